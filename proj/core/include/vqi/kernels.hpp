#pragma once

// Forward and backward kernels for every layer the architecture family uses.
// All functions are pure: outputs depend only on arguments.

#include <cstddef>
#include <span>

#include "vqi/tensor.hpp"

namespace vqi {

struct ConvSpec {
  int in_channels = 1;
  int out_channels = 1;
  int kernel_h = 1;
  int kernel_w = 1;
  int stride = 1;
  int padding = 0;
  int groups = 1;

  /// Throws std::invalid_argument when a field breaks the group/stride rules.
  void validate() const;
  Shape weight_shape() const;
  std::size_t out_extent_h(std::size_t h) const;
  std::size_t out_extent_w(std::size_t w) const;
  bool is_depthwise() const { return groups == in_channels && groups == out_channels; }
};

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> weights;
  Tensor<T> bias;
};

/// Cross-correlation (no kernel flip) plus per-channel bias.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                         const ConvSpec& spec);
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& weights,
                             const ConvSpec& spec);

// Anti-aliased downsampling: the separable binomial [1,2,1]x[1,2,1]/16 applied
// depthwise with reflect padding 1, evaluated only at the strided output sites.
template <typename T>
Tensor<T> blur_pool(const Tensor<T>& input, int stride);
template <typename T>
Tensor<T> blur_pool_backward(const Tensor<T>& grad_out, const Shape& input_shape, int stride);
/// Stride-1 blur (no subsampling).
template <typename T>
Tensor<T> binomial_blur(const Tensor<T>& input);

/// Max pooling with -inf padding. Ties resolve to the first maximum in scan order.
template <typename T>
Tensor<T> max_pool(const Tensor<T>& input, int kernel, int stride, int padding = 0);
template <typename T>
Tensor<T> max_pool_backward(const Tensor<T>& grad_out, const Tensor<T>& input, int kernel, int stride,
                            int padding = 0);

template <typename T>
Tensor<T> nearest_upsample(const Tensor<T>& input, int factor);
template <typename T>
Tensor<T> nearest_upsample_backward(const Tensor<T>& grad_out, int factor);

/// (N,C,H,W) -> (N,C)
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input);
template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& grad_out, const Shape& input_shape);

/// Per-sample standardization over (C,H,W): (x - mean) / sqrt(var + eps).
inline constexpr double kStandardizeEps = 1e-5;
template <typename T>
Tensor<T> standardize(const Tensor<T>& input);
/// Takes the forward *output*.
template <typename T>
Tensor<T> standardize_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& y);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& x);
template <typename T>
void relu_inplace(Tensor<T>& x);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
/// Takes the forward *output* y = sigmoid(x).
template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& grad_out, const Tensor<T>& y);

template <typename T>
struct LinearGrads {
  Tensor<T> input;
  Tensor<T> weights;
  Tensor<T> bias;
};

/// x (N,F), W (O,F), b (O) -> (N,O)
template <typename T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias);
template <typename T>
LinearGrads<T> fully_connected_backward(const Tensor<T>& grad_out, const Tensor<T>& x,
                                        const Tensor<T>& weights);

/// Row-wise softmax over the class axis of (N,C) logits, max-subtracted.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);
/// Takes the forward probabilities.
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& grad_out, const Tensor<T>& probs);

// Elementwise helpers shared by blocks and the graph executor.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
void add_inplace(Tensor<T>& acc, const Tensor<T>& b);
template <typename T>
Tensor<T> multiply(const Tensor<T>& a, const Tensor<T>& b);
/// Concatenates NCHW tensors along the channel axis.
template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> parts);
/// Inverse of concat_channels for gradients: slices channels [begin, begin+count).
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t count);

}  // namespace vqi
