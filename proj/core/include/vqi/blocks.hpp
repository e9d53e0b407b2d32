#pragma once

// Composite blocks: visual attention condenser (VAC), anti-aliased downsample
// (AADS) block and the two-column classification head.

#include <optional>

#include "vqi/kernels.hpp"
#include "vqi/tensor.hpp"

namespace vqi {

/// Visual attention condenser geometry.
///
/// The block computes, for input V,
///   A  = proj( relu(embed2( relu(embed1( maxpool(V, s) )) )) )   at 1/s resolution
///   V' = V * sigmoid( upsample(A, s) )
/// where embed1/embed2 are grouped 3x3 convolutions and proj is a pointwise
/// convolution back to `channels`. Projection runs before upsampling; the two
/// commute exactly for a pointwise map and nearest-neighbour expansion.
struct VacSpec {
  int channels = 0;
  int condense_stride = 2;
  int embed_groups = 1;
  int embed_channels = 0;

  void validate() const;
  ConvSpec embed1() const;
  ConvSpec embed2() const;
  ConvSpec projection() const;
};

template <typename T>
struct VacParams {
  Tensor<T> embed1_w, embed1_b;
  Tensor<T> embed2_w, embed2_b;
  Tensor<T> proj_w, proj_b;

  static VacParams zeros(const VacSpec& spec);
};

template <typename T>
struct VacCache {
  Tensor<T> condensed;  // maxpool output
  Tensor<T> embed1;     // post-relu
  Tensor<T> embed2;     // post-relu
  Tensor<T> gate;       // sigmoid(upsample(A)), full resolution
};

template <typename T>
struct VacGrads {
  Tensor<T> input;
  VacParams<T> params;
};

template <typename T>
Tensor<T> vac_forward(const Tensor<T>& v, const VacParams<T>& params, const VacSpec& spec,
                      VacCache<T>* cache = nullptr);
template <typename T>
VacGrads<T> vac_backward(const Tensor<T>& grad_out, const Tensor<T>& v, const VacParams<T>& params,
                         const VacSpec& spec, const VacCache<T>& cache);

/// Stride-1 convolution (kernel 1 or 3, or none for identity) + ReLU, then blur_pool(2).
struct AadsSpec {
  int in_channels = 0;
  int out_channels = 0;
  int conv_kernel = 0;  // 0 = identity
  int groups = 1;

  void validate() const;
  bool has_conv() const { return conv_kernel > 0; }
  ConvSpec conv() const;
};

template <typename T>
struct AadsParams {
  Tensor<T> conv_w, conv_b;  // empty when the block is an identity downsample
};

template <typename T>
struct AadsCache {
  Tensor<T> pre_blur;  // post-relu conv output; unused for identity blocks
};

template <typename T>
struct AadsGrads {
  Tensor<T> input;
  AadsParams<T> params;
};

template <typename T>
Tensor<T> aads_down_block(const Tensor<T>& v, const AadsParams<T>& params, const AadsSpec& spec,
                          AadsCache<T>* cache = nullptr);
template <typename T>
AadsGrads<T> aads_down_backward(const Tensor<T>& grad_out, const Tensor<T>& v, const AadsParams<T>& params,
                                const AadsSpec& spec, const AadsCache<T>& cache);

template <typename T>
struct DualHeadParams {
  Tensor<T> w1, b1;
  Tensor<T> w2, b2;
};

template <typename T>
struct DualHeadOutput {
  Tensor<T> p1, p2, p_agg;
};

template <typename T>
struct DualHeadGrads {
  Tensor<T> features;
  DualHeadParams<T> params;
};

/// Two independent FC->softmax columns over GAP features; p_agg is their mean.
template <typename T>
DualHeadOutput<T> dual_head_forward(const Tensor<T>& features, const DualHeadParams<T>& params);
/// Gradients w.r.t. p1, p2 and p_agg are all honoured (p_agg routes half to each column).
template <typename T>
DualHeadGrads<T> dual_head_backward(const Tensor<T>& features, const DualHeadParams<T>& params,
                                    const DualHeadOutput<T>& out, const Tensor<T>& grad_p1,
                                    const Tensor<T>& grad_p2, const Tensor<T>& grad_p_agg);

/// Mean of two distributions, elementwise.
template <typename T>
Tensor<T> aggregate_heads(const Tensor<T>& p1, const Tensor<T>& p2);

}  // namespace vqi
