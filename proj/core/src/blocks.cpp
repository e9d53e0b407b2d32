#include "vqi/blocks.hpp"

#include <string>

namespace vqi {

void VacSpec::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("VacSpec: " + m); };
  if (channels < 1 || embed_channels < 1 || embed_groups < 1) fail("channel counts must be positive");
  if (condense_stride < 2) fail("condense_stride must be >= 2");
  if (channels % embed_groups || embed_channels % embed_groups) {
    fail("embed_groups=" + std::to_string(embed_groups) + " must divide channels=" + std::to_string(channels) +
         " and embed_channels=" + std::to_string(embed_channels));
  }
}

ConvSpec VacSpec::embed1() const {
  return {channels, embed_channels, 3, 3, 1, 1, embed_groups};
}

ConvSpec VacSpec::embed2() const {
  return {embed_channels, embed_channels, 3, 3, 1, 1, embed_groups};
}

ConvSpec VacSpec::projection() const {
  return {embed_channels, channels, 1, 1, 1, 0, 1};
}

template <typename T>
VacParams<T> VacParams<T>::zeros(const VacSpec& spec) {
  const auto e = static_cast<std::size_t>(spec.embed_channels);
  const auto c = static_cast<std::size_t>(spec.channels);
  return {Tensor<T>(spec.embed1().weight_shape()), Tensor<T>({e}), Tensor<T>(spec.embed2().weight_shape()),
          Tensor<T>({e}),                          Tensor<T>(spec.projection().weight_shape()), Tensor<T>({c})};
}

template <typename T>
Tensor<T> vac_forward(const Tensor<T>& v, const VacParams<T>& params, const VacSpec& spec, VacCache<T>* cache) {
  spec.validate();
  if (v.rank() != 4) throw ShapeError("vac_forward: expected NCHW input, got " + shape_str(v.shape()));
  if (v.dim(1) != static_cast<std::size_t>(spec.channels)) {
    throw ShapeError("vac_forward: channels (dim 1) is " + std::to_string(v.dim(1)) + ", expected " +
                     std::to_string(spec.channels));
  }
  const auto s = static_cast<std::size_t>(spec.condense_stride);
  if (v.dim(2) % s || v.dim(3) % s) {
    throw ShapeError("vac_forward: spatial extent " + shape_str(v.shape()) + " not divisible by condense_stride " +
                     std::to_string(s));
  }
  VacCache<T> local;
  VacCache<T>& c = cache ? *cache : local;
  c.condensed = max_pool(v, spec.condense_stride, spec.condense_stride);
  c.embed1 = conv2d_forward(c.condensed, params.embed1_w, params.embed1_b, spec.embed1());
  relu_inplace(c.embed1);
  c.embed2 = conv2d_forward(c.embed1, params.embed2_w, params.embed2_b, spec.embed2());
  relu_inplace(c.embed2);
  const Tensor<T> attention = conv2d_forward(c.embed2, params.proj_w, params.proj_b, spec.projection());
  c.gate = sigmoid(nearest_upsample(attention, spec.condense_stride));
  return multiply(v, c.gate);
}

template <typename T>
VacGrads<T> vac_backward(const Tensor<T>& grad_out, const Tensor<T>& v, const VacParams<T>& params,
                         const VacSpec& spec, const VacCache<T>& cache) {
  expect_shape(grad_out.shape(), v.shape(), "vac_backward grad_out");
  VacGrads<T> g;
  // out = v * gate
  g.input = multiply(grad_out, cache.gate);
  Tensor<T> grad_gate = multiply(grad_out, v);
  Tensor<T> grad_attention =
      nearest_upsample_backward(sigmoid_backward(grad_gate, cache.gate), spec.condense_stride);

  auto proj = conv2d_backward(grad_attention, cache.embed2, params.proj_w, spec.projection());
  auto e2 = conv2d_backward(relu_backward(proj.input, cache.embed2), cache.embed1, params.embed2_w, spec.embed2());
  auto e1 = conv2d_backward(relu_backward(e2.input, cache.embed1), cache.condensed, params.embed1_w, spec.embed1());
  add_inplace(g.input, max_pool_backward(e1.input, v, spec.condense_stride, spec.condense_stride));

  g.params.embed1_w = std::move(e1.weights);
  g.params.embed1_b = std::move(e1.bias);
  g.params.embed2_w = std::move(e2.weights);
  g.params.embed2_b = std::move(e2.bias);
  g.params.proj_w = std::move(proj.weights);
  g.params.proj_b = std::move(proj.bias);
  return g;
}

void AadsSpec::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("AadsSpec: " + m); };
  if (in_channels < 1 || out_channels < 1) fail("channel counts must be positive");
  if (conv_kernel != 0 && conv_kernel != 1 && conv_kernel != 3) fail("conv_kernel must be 0, 1 or 3");
  if (!has_conv() && in_channels != out_channels) fail("identity downsample cannot change channel count");
  if (has_conv()) conv().validate();
}

ConvSpec AadsSpec::conv() const {
  return {in_channels, out_channels, conv_kernel, conv_kernel, 1, conv_kernel / 2, groups};
}

template <typename T>
Tensor<T> aads_down_block(const Tensor<T>& v, const AadsParams<T>& params, const AadsSpec& spec,
                          AadsCache<T>* cache) {
  spec.validate();
  if (v.rank() != 4 || v.dim(2) < 2 || v.dim(3) < 2) {
    throw ShapeError("aads_down_block: needs NCHW input with spatial extents >= 2, got " + shape_str(v.shape()));
  }
  AadsCache<T> local;
  AadsCache<T>& c = cache ? *cache : local;
  if (spec.has_conv()) {
    c.pre_blur = conv2d_forward(v, params.conv_w, params.conv_b, spec.conv());
    relu_inplace(c.pre_blur);
  } else {
    if (v.dim(1) != static_cast<std::size_t>(spec.in_channels)) {
      throw ShapeError("aads_down_block: channels (dim 1) is " + std::to_string(v.dim(1)) + ", expected " +
                       std::to_string(spec.in_channels));
    }
    return blur_pool(v, 2);
  }
  return blur_pool(c.pre_blur, 2);
}

template <typename T>
AadsGrads<T> aads_down_backward(const Tensor<T>& grad_out, const Tensor<T>& v, const AadsParams<T>& params,
                                const AadsSpec& spec, const AadsCache<T>& cache) {
  AadsGrads<T> g;
  if (!spec.has_conv()) {
    g.input = blur_pool_backward(grad_out, v.shape(), 2);
    return g;
  }
  Tensor<T> grad_pre = blur_pool_backward(grad_out, cache.pre_blur.shape(), 2);
  auto cg = conv2d_backward(relu_backward(grad_pre, cache.pre_blur), v, params.conv_w, spec.conv());
  g.input = std::move(cg.input);
  g.params.conv_w = std::move(cg.weights);
  g.params.conv_b = std::move(cg.bias);
  return g;
}

template <typename T>
Tensor<T> aggregate_heads(const Tensor<T>& p1, const Tensor<T>& p2) {
  expect_shape(p2.shape(), p1.shape(), "aggregate_heads");
  Tensor<T> out(p1.shape());
  for (std::size_t i = 0; i < p1.numel(); ++i) out[i] = (p1[i] + p2[i]) / T(2);
  return out;
}

template <typename T>
DualHeadOutput<T> dual_head_forward(const Tensor<T>& features, const DualHeadParams<T>& params) {
  if (features.rank() != 2) throw ShapeError("dual_head_forward: expected (N,F) features");
  DualHeadOutput<T> out;
  out.p1 = softmax(fully_connected(features, params.w1, params.b1));
  out.p2 = softmax(fully_connected(features, params.w2, params.b2));
  out.p_agg = aggregate_heads(out.p1, out.p2);
  return out;
}

template <typename T>
DualHeadGrads<T> dual_head_backward(const Tensor<T>& features, const DualHeadParams<T>& params,
                                    const DualHeadOutput<T>& out, const Tensor<T>& grad_p1,
                                    const Tensor<T>& grad_p2, const Tensor<T>& grad_p_agg) {
  Tensor<T> g1 = grad_p1, g2 = grad_p2;
  for (std::size_t i = 0; i < g1.numel(); ++i) {
    g1[i] += grad_p_agg[i] / T(2);
    g2[i] += grad_p_agg[i] / T(2);
  }
  auto l1 = fully_connected_backward(softmax_backward(g1, out.p1), features, params.w1);
  auto l2 = fully_connected_backward(softmax_backward(g2, out.p2), features, params.w2);
  DualHeadGrads<T> g;
  g.features = add(l1.input, l2.input);
  g.params = {std::move(l1.weights), std::move(l1.bias), std::move(l2.weights), std::move(l2.bias)};
  return g;
}

#define VQI_INSTANTIATE_BLOCKS(T)                                                                         \
  template struct VacParams<T>;                                                                           \
  template Tensor<T> vac_forward(const Tensor<T>&, const VacParams<T>&, const VacSpec&, VacCache<T>*);    \
  template VacGrads<T> vac_backward(const Tensor<T>&, const Tensor<T>&, const VacParams<T>&, const VacSpec&, \
                                    const VacCache<T>&);                                                  \
  template Tensor<T> aads_down_block(const Tensor<T>&, const AadsParams<T>&, const AadsSpec&, AadsCache<T>*); \
  template AadsGrads<T> aads_down_backward(const Tensor<T>&, const Tensor<T>&, const AadsParams<T>&,        \
                                           const AadsSpec&, const AadsCache<T>&);                         \
  template Tensor<T> aggregate_heads(const Tensor<T>&, const Tensor<T>&);                                 \
  template DualHeadOutput<T> dual_head_forward(const Tensor<T>&, const DualHeadParams<T>&);               \
  template DualHeadGrads<T> dual_head_backward(const Tensor<T>&, const DualHeadParams<T>&,                \
                                               const DualHeadOutput<T>&, const Tensor<T>&, const Tensor<T>&, \
                                               const Tensor<T>&);

VQI_INSTANTIATE_BLOCKS(float)
VQI_INSTANTIATE_BLOCKS(double)

#undef VQI_INSTANTIATE_BLOCKS

}  // namespace vqi
