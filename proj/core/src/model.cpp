#include "vqi/model.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"

namespace vqi {

namespace {

std::string label(int id, const BlockSpec& b) {
  return "node " + std::to_string(id) + " (" + std::string(to_string(b.kind)) + ")";
}

template <typename T>
VacParams<T> vac_params(const std::vector<Tensor<T>>& v) {
  return {v[0], v[1], v[2], v[3], v[4], v[5]};
}

template <typename T>
AadsParams<T> aads_params(const std::vector<Tensor<T>>& v) {
  if (v.empty()) return {};
  return {v[0], v[1]};
}

template <typename T>
void accumulate(Tensor<T>& slot, Tensor<T>&& g) {
  if (slot.empty()) {
    slot = std::move(g);
  } else {
    add_inplace(slot, g);
  }
}

template <typename T>
void scale_inplace(Tensor<T>& t, T s) {
  for (auto& v : t.values()) v *= s;
}

}  // namespace

template <typename T>
ModelParams<T> ModelParams<T>::zeros(const ArchGraph& graph) {
  ModelParams<T> p;
  for (const auto& node : param_shapes(graph)) {
    auto& vals = p.values.emplace_back();
    auto& grads = p.grads.emplace_back();
    for (const auto& s : node) {
      vals.emplace_back(s);
      grads.emplace_back(s);
    }
  }
  return p;
}

template <typename T>
ModelParams<T> ModelParams<T>::kaiming_uniform(const ArchGraph& graph, std::uint64_t seed) {
  ModelParams<T> p = zeros(graph);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (auto& node : p.values) {
    for (auto& t : node) {
      if (t.rank() < 2) continue;  // biases stay zero
      std::size_t fan_in = 1;
      for (std::size_t i = 1; i < t.rank(); ++i) fan_in *= t.dim(i);
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (auto& v : t.values()) v = static_cast<T>(bound * unit(rng));
    }
  }
  return p;
}

template <typename T>
void ModelParams<T>::zero_grad() {
  for (auto& node : grads)
    for (auto& t : node) t.fill(T(0));
}

template <typename T>
std::int64_t ModelParams<T>::count() const {
  std::int64_t n = 0;
  for (const auto& node : values)
    for (const auto& t : node) n += static_cast<std::int64_t>(t.numel());
  return n;
}

template <typename T>
void ModelParams<T>::check_against(const ArchGraph& graph) const {
  const auto shapes = param_shapes(graph);
  if (values.size() != shapes.size()) {
    throw ShapeError("params cover " + std::to_string(values.size()) + " nodes, graph has " +
                     std::to_string(shapes.size()));
  }
  for (std::size_t id = 0; id < shapes.size(); ++id) {
    if (values[id].size() != shapes[id].size()) {
      throw ShapeError(label(int(id), graph.nodes[id]) + ": expected " + std::to_string(shapes[id].size()) +
                       " parameter tensors, got " + std::to_string(values[id].size()));
    }
    for (std::size_t k = 0; k < shapes[id].size(); ++k) {
      const std::string what = label(int(id), graph.nodes[id]) + " param " + std::to_string(k);
      expect_shape(values[id][k].shape(), shapes[id][k], what.c_str());
    }
  }
}

template <typename T>
HeadOutputs<T> forward(const ArchGraph& graph, const ModelParams<T>& params, const Tensor<T>& batch,
                       ForwardTrace<T>* trace) {
  const auto shapes = graph.infer_shapes();
  params.check_against(graph);
  const NodeShape& in = shapes[0];
  if (batch.rank() != 4) throw ShapeError("node 0 (Input): batch must be NCHW, got " + shape_str(batch.shape()));
  expect_shape(batch.shape(), {batch.dim(0), std::size_t(in.channels), std::size_t(in.height), std::size_t(in.width)},
               "node 0 (Input) batch");

  const int n = graph.size();
  std::vector<Tensor<T>> out(n);
  std::vector<NodeCache<T>> caches(n);
  auto cons = graph.consumers();
  std::vector<int> pending(n);
  for (int i = 0; i < n; ++i) pending[i] = static_cast<int>(cons[i].size());
  const auto heads = graph.head_ids();
  const int agg = graph.aggregate_id();

  for (int id = 0; id < n; ++id) {
    const BlockSpec& b = graph.nodes[id];
    const auto& pv = params.values[id];
    try {
      switch (b.kind) {
        case BlockKind::Input:
          out[id] = b.standardize ? standardize(batch) : batch;
          break;
        case BlockKind::Conv3x3:
        case BlockKind::ConvDepthwise:
        case BlockKind::Conv1x1:
          out[id] = conv2d_forward(out[b.inputs[0]], pv[0], pv[1], conv_spec_for(b, shapes[b.inputs[0]]));
          if (b.relu) relu_inplace(out[id]);
          break;
        case BlockKind::VAC: {
          VacCache<T> cache;
          out[id] = vac_forward(out[b.inputs[0]], vac_params(pv), vac_spec_for(b, shapes[b.inputs[0]]),
                                trace ? &cache : nullptr);
          if (trace) caches[id] = std::move(cache);
          break;
        }
        case BlockKind::AADSDown: {
          AadsCache<T> cache;
          out[id] = aads_down_block(out[b.inputs[0]], aads_params(pv), aads_spec_for(b, shapes[b.inputs[0]]),
                                    trace ? &cache : nullptr);
          if (trace) caches[id] = std::move(cache);
          break;
        }
        case BlockKind::MaxPool:
          out[id] = max_pool(out[b.inputs[0]], b.pool_kernel, b.stride, b.pool_padding);
          break;
        case BlockKind::GAP:
          out[id] = global_avg_pool(out[b.inputs[0]]);
          break;
        case BlockKind::Concat: {
          std::vector<const Tensor<T>*> parts;
          for (int src : b.inputs) parts.push_back(&out[src]);
          out[id] = concat_channels<T>(parts);
          break;
        }
        case BlockKind::Add:
          out[id] = out[b.inputs[0]];
          for (std::size_t k = 1; k < b.inputs.size(); ++k) add_inplace(out[id], out[b.inputs[k]]);
          break;
        case BlockKind::FCHead:
          out[id] = softmax(fully_connected(out[b.inputs[0]], pv[0], pv[1]));
          break;
        case BlockKind::Aggregate:
          out[id] = aggregate_heads(out[b.inputs[0]], out[b.inputs[1]]);
          break;
      }
    } catch (const ShapeError& e) {
      throw ShapeError(label(id, b) + ": " + e.what());
    }
    if (!trace) {
      for (int src : b.inputs) {
        const bool keep = src == heads[0] || src == heads[1];
        if (--pending[src] == 0 && !keep) out[src] = Tensor<T>();
      }
    }
  }

  HeadOutputs<T> result{out[heads[0]], out[heads[1]], out[agg]};
  if (trace) {
    trace->outputs = std::move(out);
    trace->caches = std::move(caches);
  }
  return result;
}

template <typename T>
Tensor<T> backward(const ArchGraph& graph, ModelParams<T>& params, const Tensor<T>& batch,
                   const ForwardTrace<T>& trace, const Tensor<T>& grad_p1, const Tensor<T>& grad_p2,
                   const Tensor<T>& grad_p_agg) {
  const auto shapes = graph.infer_shapes();
  const int n = graph.size();
  if (static_cast<int>(trace.outputs.size()) != n) throw std::invalid_argument("backward: trace does not match graph");
  const auto heads = graph.head_ids();
  std::vector<Tensor<T>> g(n);
  g[graph.aggregate_id()] = grad_p_agg;
  accumulate(g[heads[0]], Tensor<T>(grad_p1));
  accumulate(g[heads[1]], Tensor<T>(grad_p2));

  auto add_grads = [&](int id, std::size_t k, const Tensor<T>& grad) { add_inplace(params.grads[id][k], grad); };

  for (int id = n - 1; id >= 1; --id) {
    if (g[id].empty()) continue;
    const BlockSpec& b = graph.nodes[id];
    const auto& pv = params.values[id];
    const int src = b.inputs[0];
    const Tensor<T>& x = trace.outputs[src];
    Tensor<T> grad = std::move(g[id]);
    try {
      switch (b.kind) {
        case BlockKind::Input:
          break;
        case BlockKind::Conv3x3:
        case BlockKind::ConvDepthwise:
        case BlockKind::Conv1x1: {
          if (b.relu) grad = relu_backward(grad, trace.outputs[id]);
          auto cg = conv2d_backward(grad, x, pv[0], conv_spec_for(b, shapes[src]));
          add_grads(id, 0, cg.weights);
          add_grads(id, 1, cg.bias);
          accumulate(g[src], std::move(cg.input));
          break;
        }
        case BlockKind::VAC: {
          const auto& cache = std::get<VacCache<T>>(trace.caches[id]);
          auto vg = vac_backward(grad, x, vac_params(pv), vac_spec_for(b, shapes[src]), cache);
          add_grads(id, 0, vg.params.embed1_w);
          add_grads(id, 1, vg.params.embed1_b);
          add_grads(id, 2, vg.params.embed2_w);
          add_grads(id, 3, vg.params.embed2_b);
          add_grads(id, 4, vg.params.proj_w);
          add_grads(id, 5, vg.params.proj_b);
          accumulate(g[src], std::move(vg.input));
          break;
        }
        case BlockKind::AADSDown: {
          const auto& cache = std::get<AadsCache<T>>(trace.caches[id]);
          auto spec = aads_spec_for(b, shapes[src]);
          auto ag = aads_down_backward(grad, x, aads_params(pv), spec, cache);
          if (spec.has_conv()) {
            add_grads(id, 0, ag.params.conv_w);
            add_grads(id, 1, ag.params.conv_b);
          }
          accumulate(g[src], std::move(ag.input));
          break;
        }
        case BlockKind::MaxPool:
          accumulate(g[src], max_pool_backward(grad, x, b.pool_kernel, b.stride, b.pool_padding));
          break;
        case BlockKind::GAP:
          accumulate(g[src], global_avg_pool_backward(grad, x.shape()));
          break;
        case BlockKind::Concat: {
          std::size_t offset = 0;
          for (int s : b.inputs) {
            const std::size_t c = static_cast<std::size_t>(shapes[s].channels);
            accumulate(g[s], slice_channels(grad, offset, c));
            offset += c;
          }
          break;
        }
        case BlockKind::Add:
          for (std::size_t k = 0; k < b.inputs.size(); ++k) accumulate(g[b.inputs[k]], Tensor<T>(grad));
          break;
        case BlockKind::FCHead: {
          auto lg = fully_connected_backward(softmax_backward(grad, trace.outputs[id]), x, pv[0]);
          add_grads(id, 0, lg.weights);
          add_grads(id, 1, lg.bias);
          accumulate(g[src], std::move(lg.input));
          break;
        }
        case BlockKind::Aggregate:
          scale_inplace(grad, T(0.5));
          accumulate(g[b.inputs[0]], Tensor<T>(grad));
          accumulate(g[b.inputs[1]], std::move(grad));
          break;
      }
    } catch (const ShapeError& e) {
      throw ShapeError(label(id, b) + ": " + e.what());
    }
  }
  if (g[0].empty()) return Tensor<T>(batch.shape());
  if (graph.nodes[0].standardize) return standardize_backward(g[0], batch, trace.outputs[0]);
  return std::move(g[0]);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCkptMagic[4] = {'V', 'Q', 'I', 'C'};
constexpr std::uint32_t kCkptVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff), char((v >> 24) & 0xff)};
  os.write(b, 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("checkpoint: truncated");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
  const auto n = get_u32(is);
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw std::runtime_error("checkpoint: truncated string");
  return s;
}

}  // namespace

void write_params(std::ostream& os, const ModelParams<float>& params) {
  std::uint32_t count = 0;
  for (const auto& node : params.values) count += static_cast<std::uint32_t>(node.size());
  put_u32(os, count);
  for (const auto& node : params.values)
    for (const auto& t : node) write_tensor(os, t);
}

ModelParams<float> read_params(std::istream& is, const ArchGraph& graph) {
  ModelParams<float> p = ModelParams<float>::zeros(graph);
  std::uint32_t expected = 0;
  for (const auto& node : p.values) expected += static_cast<std::uint32_t>(node.size());
  const auto count = get_u32(is);
  if (count != expected) {
    throw ShapeError("checkpoint holds " + std::to_string(count) + " tensors, graph needs " + std::to_string(expected));
  }
  for (auto& node : p.values)
    for (auto& t : node) {
      Tensor<float> loaded = read_tensor<float>(is);
      expect_shape(loaded.shape(), t.shape(), "checkpoint tensor");
      t = std::move(loaded);
    }
  return p;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  ckpt.params.check_against(ckpt.graph);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  os.write(kCkptMagic, 4);
  put_u32(os, kCkptVersion);
  put_string(os, graph_to_json(ckpt.graph, -1));
  put_string(os, ckpt.metadata_json);
  write_params(os, ckpt.params);
  if (!os) throw std::runtime_error("write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::string_view(magic, 4) != std::string_view(kCkptMagic, 4)) {
    throw std::runtime_error(path + ": not a vqi checkpoint");
  }
  if (const auto v = get_u32(is); v != kCkptVersion) {
    throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(v));
  }
  Checkpoint ckpt;
  ckpt.graph = graph_from_json(get_string(is));
  ckpt.graph.require_valid();
  ckpt.metadata_json = get_string(is);
  ckpt.params = read_params(is, ckpt.graph);
  return ckpt;
}

template struct ModelParams<float>;
template struct ModelParams<double>;

#define VQI_INSTANTIATE_EXEC(T)                                                                             \
  template HeadOutputs<T> forward(const ArchGraph&, const ModelParams<T>&, const Tensor<T>&, ForwardTrace<T>*); \
  template Tensor<T> backward(const ArchGraph&, ModelParams<T>&, const Tensor<T>&, const ForwardTrace<T>&,       \
                              const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);

VQI_INSTANTIATE_EXEC(float)
VQI_INSTANTIATE_EXEC(double)

#undef VQI_INSTANTIATE_EXEC

}  // namespace vqi
