#pragma once

// Shift robustness: the max-pool twin of a graph and the 1-pixel-shift
// prediction flip rate.

#include <utility>
#include <vector>

#include "vqi/graph.hpp"
#include "vqi/model.hpp"

namespace vqi {

/// Same graph with every AADSDown replaced by its stride-1 conv (when present)
/// followed by MaxPool(2, stride 2). Parameter shapes are unchanged; the result
/// is not feasible under the AADS-only downsampling rule.
ArchGraph max_pool_twin(const ArchGraph& graph);

/// Translates every (N,C,H,W) plane by (dx, dy) pixels, replicating the edge.
Tensor<float> shift_images(const Tensor<float>& images, int dx, int dy);

/// The eight one-pixel translations.
const std::vector<std::pair<int, int>>& one_pixel_shifts();

struct FlipReport {
  std::size_t comparisons = 0;  // images x shifts
  std::size_t flips = 0;        // argmax differs from the unshifted prediction
  double rate() const { return comparisons ? static_cast<double>(flips) / static_cast<double>(comparisons) : 0.0; }
};

template <typename T>
FlipReport shift_flip_rate(const ArchGraph& graph, const ModelParams<T>& params, const Tensor<float>& images,
                           const std::vector<std::pair<int, int>>& shifts = one_pixel_shifts());

}  // namespace vqi
