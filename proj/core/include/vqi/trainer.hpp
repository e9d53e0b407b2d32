#pragma once

// Cross-entropy with the paired L1 discrepancy term, plain SGD and the
// training loop.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "vqi/dataset.hpp"
#include "vqi/graph.hpp"
#include "vqi/model.hpp"

namespace vqi {

/// Mean over the batch of (1/C) * sum_c |p1_c - p2_c|; each per-sample term lies in [0, 2/C].
template <typename T>
double discrepancy(const Tensor<T>& p1, const Tensor<T>& p2);

/// Probability floor applied before the log in cross-entropy.
inline constexpr double kProbabilityFloor = 1e-12;

struct LossValue {
  double total = 0;
  double cross_entropy = 0;
  double discrepancy = 0;
  int clamped = 0;  // numerics events: true-class probability hit the floor
};

template <typename T>
struct LossGrads {
  Tensor<T> p1, p2, p_agg;
};

/// CE(p_agg, label) - lambda * discrepancy(p1, p2), both averaged over the batch.
/// The discrepancy is subtracted: training maximises head disagreement.
template <typename T>
LossValue total_loss(const Tensor<T>& p1, const Tensor<T>& p2, const Tensor<T>& p_agg,
                     std::span<const int> labels, double lambda_disc);
/// Gradients of total_loss w.r.t. each distribution. The |.| kink uses sign(0) = 0.
template <typename T>
LossGrads<T> total_loss_grad(const Tensor<T>& p1, const Tensor<T>& p2, const Tensor<T>& p_agg,
                             std::span<const int> labels, double lambda_disc);

/// w <- w - lr * grad for every tensor, then clears the gradients.
template <typename T>
void sgd_step(ModelParams<T>& params, double lr);

struct TrainConfig {
  int epochs = 100;
  int batch_size = 5;
  double learning_rate = 1e-3;
  double lambda_disc = 0.1;
  int lambda_warmup_epochs = 10;  // linear ramp of lambda; 0 disables the ramp
  std::uint64_t seed = 0;
  int eval_every = 1;  // test accuracy every k epochs (the final epoch is always evaluated)

  void validate() const;
  /// Effective discrepancy weight during 0-based `epoch`.
  double lambda_at(int epoch) const;

  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

struct EpochRecord {
  int epoch = 0;           // 1-based
  double loss = 0;         // mean training loss over the epoch
  double train_acc = 0;    // running accuracy on the training batches, percent
  double test_acc = -1;    // percent; -1 when the epoch was not evaluated
  double discrepancy = 0;  // mean discrepancy over the epoch
  int numerics_events = 0;
};

template <typename T>
struct TrainResult {
  ModelParams<T> params;
  std::vector<EpochRecord> history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Deterministic given cfg.seed: seeded Kaiming init and a seeded shuffle per epoch.
template <typename T>
TrainResult<T> train_tensors(const ArchGraph& graph, const TrainTestData& data, const TrainConfig& cfg,
                             const EpochCallback& on_epoch = {});
template <typename T>
TrainResult<T> train(const ArchGraph& graph, const SampleSet& dataset, const TrainConfig& cfg,
                     const EpochCallback& on_epoch = {});

/// Aggregated-head probabilities for every sample, evaluated in chunks of `batch`.
template <typename T>
Tensor<T> predict_proba(const ArchGraph& graph, const ModelParams<T>& params, const Tensor<float>& inputs,
                        int batch = 10);
template <typename T>
double accuracy_percent(const ArchGraph& graph, const ModelParams<T>& params, const LabeledTensors& data,
                        int batch = 10);

/// History as CSV with header `epoch,loss,test_acc`.
std::string history_csv(const std::vector<EpochRecord>& history);

}  // namespace vqi
