#include "vqi/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <stdexcept>

#include "json.hpp"
#include "rng.hpp"

namespace vqi {

namespace {

template <typename T>
void check_pair(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.rank() != 2) throw ShapeError(std::string(what) + ": expected (N,C) distributions, got " + shape_str(a.shape()));
  expect_shape(b.shape(), a.shape(), what);
}

template <typename T>
void check_labels(const Tensor<T>& p, std::span<const int> labels, const char* what) {
  if (labels.size() != p.dim(0)) {
    throw ShapeError(std::string(what) + ": " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(p.dim(0)));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= p.dim(1)) {
      throw std::invalid_argument(std::string(what) + ": label " + std::to_string(y) + " out of range");
    }
  }
}

int sign(double v) { return (v > 0) - (v < 0); }

}  // namespace

template <typename T>
double discrepancy(const Tensor<T>& p1, const Tensor<T>& p2) {
  check_pair(p1, p2, "discrepancy");
  const std::size_t n = p1.dim(0), c = p1.dim(1);
  if (n == 0 || c == 0) return 0.0;
  double s = 0;
  for (std::size_t i = 0; i < p1.numel(); ++i) s += std::abs(static_cast<double>(p1[i]) - static_cast<double>(p2[i]));
  return s / static_cast<double>(n * c);
}

template <typename T>
LossValue total_loss(const Tensor<T>& p1, const Tensor<T>& p2, const Tensor<T>& p_agg, std::span<const int> labels,
                     double lambda_disc) {
  check_pair(p1, p2, "total_loss");
  expect_shape(p_agg.shape(), p1.shape(), "total_loss p_agg");
  check_labels(p_agg, labels, "total_loss");
  LossValue v;
  const std::size_t n = p_agg.dim(0), c = p_agg.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double p = static_cast<double>(p_agg[i * c + static_cast<std::size_t>(labels[i])]);
    if (p < kProbabilityFloor) {
      p = kProbabilityFloor;
      ++v.clamped;
    }
    v.cross_entropy -= std::log(p);
  }
  if (n) v.cross_entropy /= static_cast<double>(n);
  v.discrepancy = discrepancy(p1, p2);
  v.total = v.cross_entropy - lambda_disc * v.discrepancy;
  return v;
}

template <typename T>
LossGrads<T> total_loss_grad(const Tensor<T>& p1, const Tensor<T>& p2, const Tensor<T>& p_agg,
                             std::span<const int> labels, double lambda_disc) {
  check_pair(p1, p2, "total_loss_grad");
  expect_shape(p_agg.shape(), p1.shape(), "total_loss_grad p_agg");
  check_labels(p_agg, labels, "total_loss_grad");
  LossGrads<T> g{Tensor<T>(p1.shape()), Tensor<T>(p1.shape()), Tensor<T>(p1.shape())};
  const std::size_t n = p_agg.dim(0), c = p_agg.dim(1);
  if (n == 0 || c == 0) return g;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i * c + static_cast<std::size_t>(labels[i]);
    const double p = static_cast<double>(p_agg[k]);
    if (p >= kProbabilityFloor) g.p_agg[k] = static_cast<T>(-inv_n / p);
  }
  const double w = lambda_disc * inv_n / static_cast<double>(c);
  for (std::size_t i = 0; i < p1.numel(); ++i) {
    const int s = sign(static_cast<double>(p1[i]) - static_cast<double>(p2[i]));
    g.p1[i] = static_cast<T>(-w * s);
    g.p2[i] = static_cast<T>(w * s);
  }
  return g;
}

template <typename T>
void sgd_step(ModelParams<T>& params, double lr) {
  if (params.grads.size() != params.values.size()) throw std::invalid_argument("sgd_step: gradient layout mismatch");
  const T step = static_cast<T>(lr);
  for (std::size_t n = 0; n < params.values.size(); ++n) {
    auto& vals = params.values[n];
    auto& grads = params.grads[n];
    if (grads.size() != vals.size()) throw std::invalid_argument("sgd_step: gradient layout mismatch");
    for (std::size_t t = 0; t < vals.size(); ++t) {
      expect_shape(grads[t].shape(), vals[t].shape(), "sgd_step gradient");
      T* w = vals[t].data();
      const T* g = grads[t].data();
      for (std::size_t i = 0; i < vals[t].numel(); ++i) w[i] -= step * g[i];
      grads[t].fill(T(0));
    }
  }
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) fail("learning_rate must be finite and >= 0");
  if (!(lambda_disc >= 0) || !std::isfinite(lambda_disc)) fail("lambda_disc must be finite and >= 0");
  if (lambda_warmup_epochs < 0) fail("lambda_warmup_epochs must be >= 0");
  if (eval_every < 1) fail("eval_every must be >= 1");
}

double TrainConfig::lambda_at(int epoch) const {
  if (lambda_warmup_epochs == 0) return lambda_disc;
  return lambda_disc * std::min(1.0, static_cast<double>(epoch + 1) / lambda_warmup_epochs);
}

std::string TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["learning_rate"] = learning_rate;
  j["lambda_disc"] = lambda_disc;
  j["lambda_warmup_epochs"] = lambda_warmup_epochs;
  j["seed"] = seed;
  j["eval_every"] = eval_every;
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  if (!j.is_object()) throw std::invalid_argument("TrainConfig: expected a JSON object");
  TrainConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "epochs") c.epochs = value.get<int>();
    else if (key == "batch_size") c.batch_size = value.get<int>();
    else if (key == "learning_rate") c.learning_rate = value.get<double>();
    else if (key == "lambda_disc") c.lambda_disc = value.get<double>();
    else if (key == "lambda_warmup_epochs") c.lambda_warmup_epochs = value.get<int>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "eval_every") c.eval_every = value.get<int>();
    else throw std::invalid_argument("TrainConfig: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

namespace {

template <typename T>
Tensor<T> gather(const Tensor<float>& inputs, const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end) {
  Shape s = inputs.shape();
  const std::size_t per = inputs.numel() / s[0];
  s[0] = end - begin;
  Tensor<T> out(s);
  for (std::size_t b = begin; b < end; ++b) {
    const float* src = inputs.data() + idx[b] * per;
    T* dst = out.data() + (b - begin) * per;
    for (std::size_t i = 0; i < per; ++i) dst[i] = static_cast<T>(src[i]);
  }
  return out;
}

template <typename T>
int argmax_row(const Tensor<T>& p, std::size_t row) {
  const std::size_t c = p.dim(1);
  int best = 0;
  for (std::size_t k = 1; k < c; ++k) {
    if (p[row * c + k] > p[row * c + static_cast<std::size_t>(best)]) best = static_cast<int>(k);
  }
  return best;
}

}  // namespace

template <typename T>
Tensor<T> predict_proba(const ArchGraph& graph, const ModelParams<T>& params, const Tensor<float>& inputs, int batch) {
  if (batch < 1) throw std::invalid_argument("predict_proba: batch must be >= 1");
  const std::size_t n = inputs.rank() ? inputs.dim(0) : 0;
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Tensor<T> out;
  for (std::size_t b = 0; b < n; b += static_cast<std::size_t>(batch)) {
    const std::size_t e = std::min(n, b + static_cast<std::size_t>(batch));
    auto heads = forward(graph, params, gather<T>(inputs, idx, b, e));
    if (out.empty()) out = Tensor<T>({n, heads.p_agg.dim(1)});
    std::copy(heads.p_agg.data(), heads.p_agg.data() + heads.p_agg.numel(), out.data() + b * heads.p_agg.dim(1));
  }
  return out;
}

template <typename T>
double accuracy_percent(const ArchGraph& graph, const ModelParams<T>& params, const LabeledTensors& data, int batch) {
  if (data.labels.empty()) return 0.0;
  const Tensor<T> p = predict_proba(graph, params, data.inputs, batch);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.labels.size(); ++i) hits += argmax_row(p, i) == data.labels[i];
  return 100.0 * static_cast<double>(hits) / static_cast<double>(data.labels.size());
}

template <typename T>
TrainResult<T> train_tensors(const ArchGraph& graph, const TrainTestData& data, const TrainConfig& cfg,
                             const EpochCallback& on_epoch) {
  cfg.validate();
  graph.require_valid();
  const std::size_t n = data.train.labels.size();
  if (n == 0) throw std::invalid_argument("train: training split is empty");
  if (data.train.inputs.rank() != 4 || data.train.inputs.dim(0) != n) {
    throw ShapeError("train: training inputs " + shape_str(data.train.inputs.shape()) + " do not match " +
                     std::to_string(n) + " labels");
  }
  TrainResult<T> result{ModelParams<T>::kaiming_uniform(graph, cfg.seed), {}};
  std::mt19937_64 shuffle_rng(detail::mix(cfg.seed, 0x5348554646ULL));
  std::vector<std::size_t> order(n);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[detail::below(shuffle_rng, i)]);
    const double lambda = cfg.lambda_at(epoch);

    EpochRecord rec;
    rec.epoch = epoch + 1;
    std::size_t hits = 0, batches = 0;
    for (std::size_t b = 0; b < n; b += bs) {
      const std::size_t e = std::min(n, b + bs);
      const Tensor<T> x = gather<T>(data.train.inputs, order, b, e);
      std::vector<int> y;
      for (std::size_t i = b; i < e; ++i) y.push_back(data.train.labels[order[i]]);

      ForwardTrace<T> trace;
      const auto heads = forward(graph, result.params, x, &trace);
      const LossValue lv = total_loss(heads.p1, heads.p2, heads.p_agg, y, lambda);
      const auto g = total_loss_grad(heads.p1, heads.p2, heads.p_agg, y, lambda);
      backward(graph, result.params, x, trace, g.p1, g.p2, g.p_agg);
      sgd_step(result.params, cfg.learning_rate);

      rec.loss += lv.total;
      rec.discrepancy += lv.discrepancy;
      rec.numerics_events += lv.clamped;
      for (std::size_t i = 0; i < y.size(); ++i) hits += argmax_row(heads.p_agg, i) == y[i];
      ++batches;
    }
    rec.loss /= static_cast<double>(batches);
    rec.discrepancy /= static_cast<double>(batches);
    rec.train_acc = 100.0 * static_cast<double>(hits) / static_cast<double>(n);
    if (!std::isfinite(rec.loss)) throw std::runtime_error("train: loss became non-finite in epoch " + std::to_string(rec.epoch));
    const bool last = epoch + 1 == cfg.epochs;
    if (!data.test.labels.empty() && (last || (epoch + 1) % cfg.eval_every == 0)) {
      rec.test_acc = accuracy_percent(graph, result.params, data.test);
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

template <typename T>
TrainResult<T> train(const ArchGraph& graph, const SampleSet& dataset, const TrainConfig& cfg,
                     const EpochCallback& on_epoch) {
  if (!dataset.is_split()) throw std::invalid_argument("train: dataset has no split; call split() first");
  return train_tensors<T>(graph, to_train_test(dataset), cfg, on_epoch);
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,loss,test_acc\n";
  char buf[96];
  for (const auto& r : history) {
    if (r.test_acc < 0) {
      std::snprintf(buf, sizeof buf, "%d,%.6f,\n", r.epoch, r.loss);
    } else {
      std::snprintf(buf, sizeof buf, "%d,%.6f,%.4f\n", r.epoch, r.loss, r.test_acc);
    }
    out += buf;
  }
  return out;
}

#define VQI_INSTANTIATE_TRAINER(T)                                                                            \
  template double discrepancy(const Tensor<T>&, const Tensor<T>&);                                            \
  template LossValue total_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::span<const int>, double); \
  template LossGrads<T> total_loss_grad(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::span<const int>, \
                                        double);                                                              \
  template void sgd_step(ModelParams<T>&, double);                                                            \
  template Tensor<T> predict_proba(const ArchGraph&, const ModelParams<T>&, const Tensor<float>&, int);       \
  template double accuracy_percent(const ArchGraph&, const ModelParams<T>&, const LabeledTensors&, int);      \
  template TrainResult<T> train_tensors(const ArchGraph&, const TrainTestData&, const TrainConfig&,           \
                                        const EpochCallback&);                                                \
  template TrainResult<T> train(const ArchGraph&, const SampleSet&, const TrainConfig&, const EpochCallback&);

VQI_INSTANTIATE_TRAINER(float)
VQI_INSTANTIATE_TRAINER(double)

#undef VQI_INSTANTIATE_TRAINER

}  // namespace vqi
