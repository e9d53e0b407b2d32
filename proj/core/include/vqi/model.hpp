#pragma once

// Parameters bound to an ArchGraph, graph execution and checkpoints.

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "vqi/blocks.hpp"
#include "vqi/graph.hpp"
#include "vqi/tensor.hpp"

namespace vqi {

template <typename T>
struct ModelParams {
  std::vector<std::vector<Tensor<T>>> values;  // per node, in param_shapes order
  std::vector<std::vector<Tensor<T>>> grads;   // same layout as values

  static ModelParams zeros(const ArchGraph& graph);
  /// Kaiming-uniform (fan-in, ReLU gain) weights, zero biases; fully determined by seed.
  static ModelParams kaiming_uniform(const ArchGraph& graph, std::uint64_t seed);

  void zero_grad();
  std::int64_t count() const;
  /// Throws ShapeError when any tensor disagrees with the graph.
  void check_against(const ArchGraph& graph) const;

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (const auto& node : values) {
      auto& dst = out.values.emplace_back();
      for (const auto& t : node) dst.push_back(t.template cast<U>());
    }
    for (const auto& node : grads) {
      auto& dst = out.grads.emplace_back();
      for (const auto& t : node) dst.push_back(t.template cast<U>());
    }
    return out;
  }
};

template <typename T>
struct HeadOutputs {
  Tensor<T> p1, p2, p_agg;
};

template <typename T>
using NodeCache = std::variant<std::monostate, VacCache<T>, AadsCache<T>>;

/// Activations retained by a training forward pass.
template <typename T>
struct ForwardTrace {
  std::vector<Tensor<T>> outputs;
  std::vector<NodeCache<T>> caches;
};

/// Runs the graph in topological (id) order. Batch must be (N, C, H, W) with
/// C/H/W equal to the Input node's extents. Pass a trace to enable backward().
template <typename T>
HeadOutputs<T> forward(const ArchGraph& graph, const ModelParams<T>& params, const Tensor<T>& batch,
                       ForwardTrace<T>* trace = nullptr);

/// Accumulates parameter gradients into params.grads and returns d/d(batch).
template <typename T>
Tensor<T> backward(const ArchGraph& graph, ModelParams<T>& params, const Tensor<T>& batch,
                   const ForwardTrace<T>& trace, const Tensor<T>& grad_p1, const Tensor<T>& grad_p2,
                   const Tensor<T>& grad_p_agg);

/// Checkpoint: magic "VQIC", u32 format version, u32 graph-json length, graph
/// json, u32 metadata-json length, metadata json, u32 tensor count, then one
/// TNSR blob per parameter tensor in node order.
struct Checkpoint {
  ArchGraph graph;
  ModelParams<float> params;
  std::string metadata_json = "{}";
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);
void write_params(std::ostream& os, const ModelParams<float>& params);
ModelParams<float> read_params(std::istream& is, const ArchGraph& graph);

extern template struct ModelParams<float>;
extern template struct ModelParams<double>;

}  // namespace vqi
