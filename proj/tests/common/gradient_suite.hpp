#pragma once

// Finite-difference gradient checks for every layer and block, over randomized
// small shapes. Shared by the unit tests and the acceptance binary.

#include <array>
#include <random>
#include <string>
#include <vector>

#include "../unit/test_util.hpp"
#include "vqi/blocks.hpp"
#include "vqi/model.hpp"
#include "vqi/trainer.hpp"

namespace vqi::testing {

struct LayerReport {
  std::string name;
  int shapes = 0;
  FdResult fd;
};

namespace detail_grad {

inline int pick(std::mt19937_64& rng, std::initializer_list<int> xs) {
  return *(xs.begin() + static_cast<long>(rng() % xs.size()));
}
inline int between(std::mt19937_64& rng, int lo, int hi) { return lo + static_cast<int>(rng() % (hi - lo + 1)); }

inline Tensor<double> probs(std::mt19937_64& rng, std::size_t n, std::size_t c) {
  return softmax(random_tensor({n, c}, rng, -2, 2));
}

}  // namespace detail_grad

inline LayerReport check_conv(std::mt19937_64& rng, int shapes, const std::string& variant) {
  using namespace detail_grad;
  LayerReport r{"conv2d " + variant, shapes, {}};
  for (int t = 0; t < shapes; ++t) {
    ConvSpec s;
    const int g = variant == "grouped" ? pick(rng, {2, 3}) : 1;
    s.in_channels = g * pick(rng, {1, 2});
    s.out_channels = g * pick(rng, {1, 2});
    s.groups = g;
    s.kernel_h = s.kernel_w = variant == "1x1" ? 1 : 3;
    s.stride = variant == "strided" ? 2 : 1;
    s.padding = s.kernel_h == 3 ? pick(rng, {0, 1}) : 0;
    if (variant == "depthwise") {
      s.in_channels = s.out_channels = s.groups = pick(rng, {2, 3});
      s.padding = 1;
    }
    const std::size_t n = pick(rng, {1, 2});
    auto x = random_tensor({n, std::size_t(s.in_channels), std::size_t(between(rng, 3, 6)), std::size_t(between(rng, 3, 6))}, rng);
    auto w = random_tensor(s.weight_shape(), rng);
    auto b = random_tensor({std::size_t(s.out_channels)}, rng);
    const auto R = random_tensor(conv2d_forward(x, w, b, s).shape(), rng);
    auto loss = [&] { return dot(conv2d_forward(x, w, b, s), R); };
    const auto gr = conv2d_backward(R, x, w, s);
    fd_check(x, gr.input, loss, r.fd, "input");
    fd_check(w, gr.weights, loss, r.fd, "weights");
    fd_check(b, gr.bias, loss, r.fd, "bias");
  }
  return r;
}

inline LayerReport check_blur_pool(std::mt19937_64& rng, int shapes) {
  using namespace detail_grad;
  LayerReport r{"blur_pool", shapes, {}};
  for (int t = 0; t < shapes; ++t) {
    const int stride = pick(rng, {2, 3});
    auto x = random_tensor({std::size_t(pick(rng, {1, 2})), std::size_t(pick(rng, {1, 3})), std::size_t(between(rng, 2, 7)),
                            std::size_t(between(rng, 2, 7))},
                           rng);
    const auto R = random_tensor(blur_pool(x, stride).shape(), rng);
    fd_check(x, blur_pool_backward(R, x.shape(), stride), [&] { return dot(blur_pool(x, stride), R); }, r.fd, "input");
  }
  return r;
}

inline LayerReport check_pointwise(std::mt19937_64& rng, int shapes) {
  using namespace detail_grad;
  LayerReport r{"relu/sigmoid/max_pool/upsample/GAP/standardize", shapes, {}};
  for (int t = 0; t < shapes; ++t) {
    const std::size_t n = pick(rng, {1, 2}), c = pick(rng, {1, 3}), h = 2 * between(rng, 1, 3), w = 2 * between(rng, 1, 3);
    auto x = random_tensor({n, c, h, w}, rng);
    auto R = random_tensor(x.shape(), rng);
    fd_check(x, relu_backward(R, x), [&] { return dot(relu(x), R); }, r.fd, "relu");
    fd_check(x, sigmoid_backward(R, sigmoid(x)), [&] { return dot(sigmoid(x), R); }, r.fd, "sigmoid");
    fd_check(x, standardize_backward(R, x, standardize(x)), [&] { return dot(standardize(x), R); }, r.fd, "standardize");
    auto Rm = random_tensor(max_pool(x, 2, 2).shape(), rng);
    fd_check(x, max_pool_backward(Rm, x, 2, 2), [&] { return dot(max_pool(x, 2, 2), Rm); }, r.fd, "max_pool");
    auto Ru = random_tensor(nearest_upsample(x, 2).shape(), rng);
    fd_check(x, nearest_upsample_backward(Ru, 2), [&] { return dot(nearest_upsample(x, 2), Ru); }, r.fd, "upsample");
    auto Rg = random_tensor({n, c}, rng);
    fd_check(x, global_avg_pool_backward(Rg, x.shape()), [&] { return dot(global_avg_pool(x), Rg); }, r.fd, "gap");
  }
  return r;
}

inline LayerReport check_fc_softmax(std::mt19937_64& rng, int shapes) {
  using namespace detail_grad;
  LayerReport r{"fully_connected/softmax", shapes, {}};
  for (int t = 0; t < shapes; ++t) {
    const std::size_t n = pick(rng, {1, 3}), f = between(rng, 1, 6), o = between(rng, 2, 4);
    auto x = random_tensor({n, f}, rng);
    auto w = random_tensor({o, f}, rng);
    auto b = random_tensor({o}, rng);
    auto R = random_tensor({n, o}, rng);
    auto loss = [&] { return dot(softmax(fully_connected(x, w, b)), R); };
    const auto gz = softmax_backward(R, softmax(fully_connected(x, w, b)));
    const auto lg = fully_connected_backward(gz, x, w);
    fd_check(x, lg.input, loss, r.fd, "input");
    fd_check(w, lg.weights, loss, r.fd, "weights");
    fd_check(b, lg.bias, loss, r.fd, "bias");
  }
  return r;
}

inline LayerReport check_vac(std::mt19937_64& rng, int shapes) {
  using namespace detail_grad;
  LayerReport r{"VAC", shapes, {}};
  for (int t = 0; t < shapes; ++t) {
    VacSpec s;
    s.embed_groups = pick(rng, {1, 2});
    s.channels = s.embed_groups * pick(rng, {1, 2});
    s.embed_channels = s.embed_groups * pick(rng, {1, 2});
    s.condense_stride = 2;
    const std::size_t n = pick(rng, {1, 2});
    auto v = random_tensor({n, std::size_t(s.channels), std::size_t(2 * between(rng, 2, 4)), std::size_t(2 * between(rng, 2, 4))}, rng);
    VacParams<double> p;
    p.embed1_w = random_tensor(s.embed1().weight_shape(), rng);
    p.embed1_b = random_tensor({std::size_t(s.embed_channels)}, rng, 0.1, 0.5);
    p.embed2_w = random_tensor(s.embed2().weight_shape(), rng);
    p.embed2_b = random_tensor({std::size_t(s.embed_channels)}, rng, 0.1, 0.5);
    p.proj_w = random_tensor(s.projection().weight_shape(), rng);
    p.proj_b = random_tensor({std::size_t(s.channels)}, rng);
    const auto R = random_tensor(v.shape(), rng);
    auto loss = [&] { return dot(vac_forward(v, p, s), R); };
    VacCache<double> cache;
    vac_forward(v, p, s, &cache);
    const auto g = vac_backward(R, v, p, s, cache);
    fd_check(v, g.input, loss, r.fd, "input");
    fd_check(p.embed1_w, g.params.embed1_w, loss, r.fd, "embed1_w");
    fd_check(p.embed1_b, g.params.embed1_b, loss, r.fd, "embed1_b");
    fd_check(p.embed2_w, g.params.embed2_w, loss, r.fd, "embed2_w");
    fd_check(p.embed2_b, g.params.embed2_b, loss, r.fd, "embed2_b");
    fd_check(p.proj_w, g.params.proj_w, loss, r.fd, "proj_w");
    fd_check(p.proj_b, g.params.proj_b, loss, r.fd, "proj_b");
  }
  return r;
}

inline LayerReport check_aads(std::mt19937_64& rng, int shapes) {
  using namespace detail_grad;
  LayerReport r{"AADSDown", shapes, {}};
  for (int t = 0; t < shapes; ++t) {
    AadsSpec s;
    s.conv_kernel = pick(rng, {0, 1, 3});
    s.in_channels = pick(rng, {1, 2, 4});
    s.groups = s.conv_kernel && s.in_channels % 2 == 0 ? pick(rng, {1, 2}) : 1;
    s.out_channels = s.conv_kernel ? s.groups * pick(rng, {1, 2}) : s.in_channels;
    auto v = random_tensor({std::size_t(pick(rng, {1, 2})), std::size_t(s.in_channels), std::size_t(between(rng, 2, 7)),
                            std::size_t(between(rng, 2, 7))},
                           rng);
    AadsParams<double> p;
    if (s.has_conv()) {
      p.conv_w = random_tensor(s.conv().weight_shape(), rng);
      p.conv_b = random_tensor({std::size_t(s.out_channels)}, rng);
    }
    const auto R = random_tensor(aads_down_block(v, p, s).shape(), rng);
    auto loss = [&] { return dot(aads_down_block(v, p, s), R); };
    AadsCache<double> cache;
    aads_down_block(v, p, s, &cache);
    const auto g = aads_down_backward(R, v, p, s, cache);
    fd_check(v, g.input, loss, r.fd, "input");
    if (s.has_conv()) {
      fd_check(p.conv_w, g.params.conv_w, loss, r.fd, "conv_w");
      fd_check(p.conv_b, g.params.conv_b, loss, r.fd, "conv_b");
    }
  }
  return r;
}

inline LayerReport check_dual_head(std::mt19937_64& rng, int shapes) {
  using namespace detail_grad;
  LayerReport r{"dual head", shapes, {}};
  for (int t = 0; t < shapes; ++t) {
    const std::size_t n = pick(rng, {1, 2, 4}), f = between(rng, 2, 8), c = 2;
    auto x = random_tensor({n, f}, rng);
    DualHeadParams<double> p{random_tensor({c, f}, rng), random_tensor({c}, rng), random_tensor({c, f}, rng),
                             random_tensor({c}, rng)};
    const auto R1 = random_tensor({n, c}, rng), R2 = random_tensor({n, c}, rng), R3 = random_tensor({n, c}, rng);
    auto loss = [&] {
      const auto o = dual_head_forward(x, p);
      return dot(o.p1, R1) + dot(o.p2, R2) + dot(o.p_agg, R3);
    };
    const auto g = dual_head_backward(x, p, dual_head_forward(x, p), R1, R2, R3);
    fd_check(x, g.features, loss, r.fd, "features");
    fd_check(p.w1, g.params.w1, loss, r.fd, "w1");
    fd_check(p.b1, g.params.b1, loss, r.fd, "b1");
    fd_check(p.w2, g.params.w2, loss, r.fd, "w2");
    fd_check(p.b2, g.params.b2, loss, r.fd, "b2");
  }
  return r;
}

inline LayerReport check_total_loss(std::mt19937_64& rng, int shapes) {
  using namespace detail_grad;
  LayerReport r{"total_loss (through dual head)", shapes, {}};
  for (int t = 0; t < shapes; ++t) {
    const std::size_t n = pick(rng, {1, 2, 5}), f = between(rng, 2, 6);
    const double lambda = pick(rng, {0, 1, 2}) * 0.1;
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(rng() % 2);
    // loss on the distributions themselves
    auto p1 = probs(rng, n, 2), p2 = probs(rng, n, 2), pa = probs(rng, n, 2);
    auto direct = [&] { return total_loss(p1, p2, pa, labels, lambda).total; };
    const auto lg = total_loss_grad(p1, p2, pa, labels, lambda);
    fd_check(p1, lg.p1, direct, r.fd, "p1");
    fd_check(p2, lg.p2, direct, r.fd, "p2");
    fd_check(pa, lg.p_agg, direct, r.fd, "p_agg");
    // and through the dual head
    auto x = random_tensor({n, f}, rng);
    DualHeadParams<double> p{random_tensor({2, f}, rng), random_tensor({2}, rng), random_tensor({2, f}, rng),
                             random_tensor({2}, rng)};
    auto stacked = [&] {
      const auto o = dual_head_forward(x, p);
      return total_loss(o.p1, o.p2, o.p_agg, labels, lambda).total;
    };
    const auto o = dual_head_forward(x, p);
    const auto g = total_loss_grad(o.p1, o.p2, o.p_agg, labels, lambda);
    const auto hg = dual_head_backward(x, p, o, g.p1, g.p2, g.p_agg);
    fd_check(x, hg.features, stacked, r.fd, "features");
    fd_check(p.w1, hg.params.w1, stacked, r.fd, "w1");
    fd_check(p.w2, hg.params.w2, stacked, r.fd, "w2");
    fd_check(p.b1, hg.params.b1, stacked, r.fd, "b1");
  }
  return r;
}

/// Small graph: standardized input, conv, VAC, AADS, GAP, two heads.
inline ArchGraph toy_graph(int side, int width) {
  ArchGraph g;
  g.version = "toy";
  BlockSpec in;
  in.kind = BlockKind::Input;
  in.height = in.width = side;
  in.standardize = true;
  g.add(in);
  BlockSpec c;
  c.kind = BlockKind::Conv3x3;
  c.inputs = {0};
  c.out_channels = width;
  g.add(c);
  BlockSpec v;
  v.kind = BlockKind::VAC;
  v.inputs = {1};
  v.condense_stride = 2;
  v.embed_channels = width;
  g.add(v);
  BlockSpec d;
  d.kind = BlockKind::AADSDown;
  d.inputs = {2};
  d.conv_kernel = 3;
  d.out_channels = width;
  g.add(d);
  BlockSpec gap;
  gap.kind = BlockKind::GAP;
  gap.inputs = {3};
  g.add(gap);
  for (int k = 0; k < 2; ++k) {
    BlockSpec h;
    h.kind = BlockKind::FCHead;
    h.inputs = {4};
    h.out_channels = 2;
    h.column = k;
    g.add(h);
  }
  BlockSpec agg;
  agg.kind = BlockKind::Aggregate;
  agg.inputs = {5, 6};
  g.add(agg);
  return g;
}

inline LayerReport check_graph(std::mt19937_64& rng, int shapes) {
  using namespace detail_grad;
  LayerReport r{"model graph (forward/backward)", shapes, {}};
  for (int t = 0; t < shapes; ++t) {
    const auto g = toy_graph(2 * between(rng, 2, 3), pick(rng, {1, 2}));
    auto params = ModelParams<double>::kaiming_uniform(g, rng());
    for (auto& node : params.values)
      for (auto& p : node)
        for (auto& v : p.values()) v += std::uniform_real_distribution<double>(-0.05, 0.05)(rng);
    const std::size_t n = pick(rng, {1, 2});
    auto x = random_tensor({n, 1, std::size_t(g.input_height()), std::size_t(g.input_width())}, rng, 0, 1);
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(rng() % 2);
    const double lambda = 0.1;
    auto loss = [&] {
      const auto o = forward(g, params, x);
      return total_loss(o.p1, o.p2, o.p_agg, labels, lambda).total;
    };
    ForwardTrace<double> trace;
    const auto o = forward(g, params, x, &trace);
    const auto lg = total_loss_grad(o.p1, o.p2, o.p_agg, labels, lambda);
    params.zero_grad();
    const auto gx = backward(g, params, x, trace, lg.p1, lg.p2, lg.p_agg);
    fd_check(x, gx, loss, r.fd, "input");
    for (std::size_t id = 0; id < params.values.size(); ++id)
      for (std::size_t k = 0; k < params.values[id].size(); ++k)
        fd_check(params.values[id][k], params.grads[id][k], loss, r.fd, "node" + std::to_string(id) + "." + std::to_string(k));
  }
  return r;
}

inline std::vector<LayerReport> run_gradient_suite(int shapes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<LayerReport> out;
  for (const char* v : {"3x3", "1x1", "depthwise", "grouped", "strided"}) out.push_back(check_conv(rng, shapes, v));
  out.push_back(check_blur_pool(rng, shapes));
  out.push_back(check_pointwise(rng, shapes));
  out.push_back(check_fc_softmax(rng, shapes));
  out.push_back(check_vac(rng, shapes));
  out.push_back(check_aads(rng, shapes));
  out.push_back(check_dual_head(rng, shapes));
  out.push_back(check_total_loss(rng, shapes));
  out.push_back(check_graph(rng, shapes));
  return out;
}

}  // namespace vqi::testing
