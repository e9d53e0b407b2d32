#include "vqi/robustness.hpp"

#include <algorithm>
#include <stdexcept>

#include "vqi/trainer.hpp"

namespace vqi {

ArchGraph max_pool_twin(const ArchGraph& graph) {
  graph.require_valid();
  const auto shapes = graph.infer_shapes();
  ArchGraph twin;
  twin.version = graph.version + "+maxpool";
  std::vector<int> remap(graph.nodes.size());
  for (int id = 0; id < graph.size(); ++id) {
    BlockSpec b = graph.nodes[id];
    for (auto& src : b.inputs) src = remap[src];
    if (b.kind != BlockKind::AADSDown) {
      remap[id] = twin.add(b);
      continue;
    }
    int x = b.inputs[0];
    if (b.conv_kernel > 0) {
      BlockSpec conv;
      conv.kind = b.conv_kernel == 1 ? BlockKind::Conv1x1 : BlockKind::Conv3x3;
      conv.inputs = {x};
      conv.column = b.column;
      conv.out_channels = b.out_channels > 0 ? b.out_channels : shapes[graph.nodes[id].inputs[0]].channels;
      conv.groups = b.groups;
      conv.stride = 1;
      conv.relu = true;
      x = twin.add(conv);
    }
    BlockSpec pool;
    pool.kind = BlockKind::MaxPool;
    pool.inputs = {x};
    pool.column = b.column;
    pool.pool_kernel = 2;
    pool.stride = 2;
    remap[id] = twin.add(pool);
  }
  twin.require_valid();
  return twin;
}

Tensor<float> shift_images(const Tensor<float>& images, int dx, int dy) {
  if (images.rank() != 4) throw ShapeError("shift_images: expected NCHW, got " + shape_str(images.shape()));
  const long planes = long(images.dim(0) * images.dim(1)), H = long(images.dim(2)), W = long(images.dim(3));
  Tensor<float> out(images.shape());
  for (long p = 0; p < planes; ++p) {
    const float* in = images.data() + p * H * W;
    float* o = out.data() + p * H * W;
    for (long y = 0; y < H; ++y) {
      const long sy = std::clamp(y - dy, 0L, H - 1);
      for (long x = 0; x < W; ++x) o[y * W + x] = in[sy * W + std::clamp(x - dx, 0L, W - 1)];
    }
  }
  return out;
}

const std::vector<std::pair<int, int>>& one_pixel_shifts() {
  static const std::vector<std::pair<int, int>> s = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}, {1, 1}, {1, -1}, {-1, 1}, {-1, -1}};
  return s;
}

namespace {

std::vector<int> argmax_rows(const Tensor<double>& p) {
  std::vector<int> out(p.dim(0));
  const std::size_t C = p.dim(1);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double* row = p.data() + i * C;
    out[i] = static_cast<int>(std::max_element(row, row + C) - row);
  }
  return out;
}

template <typename T>
Tensor<double> as_double(const Tensor<T>& t) {
  Tensor<double> d(t.shape());
  std::copy(t.values().begin(), t.values().end(), d.values().begin());
  return d;
}

}  // namespace

template <typename T>
FlipReport shift_flip_rate(const ArchGraph& graph, const ModelParams<T>& params, const Tensor<float>& images,
                           const std::vector<std::pair<int, int>>& shifts) {
  const auto base = argmax_rows(as_double(predict_proba(graph, params, images)));
  FlipReport r;
  for (const auto& [dx, dy] : shifts) {
    const auto moved = argmax_rows(as_double(predict_proba(graph, params, shift_images(images, dx, dy))));
    for (std::size_t i = 0; i < base.size(); ++i) r.flips += moved[i] != base[i];
    r.comparisons += base.size();
  }
  return r;
}

template FlipReport shift_flip_rate(const ArchGraph&, const ModelParams<float>&, const Tensor<float>&,
                                    const std::vector<std::pair<int, int>>&);
template FlipReport shift_flip_rate(const ArchGraph&, const ModelParams<double>&, const Tensor<float>&,
                                    const std::vector<std::pair<int, int>>&);

}  // namespace vqi
