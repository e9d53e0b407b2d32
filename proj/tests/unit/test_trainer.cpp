#include <gtest/gtest.h>

#include <random>

#include "../common/gradient_suite.hpp"
#include "test_util.hpp"
#include "vqi/trainer.hpp"

using namespace vqi;
using vqi::testing::random_tensor;

namespace {

Tensor<double> dist(std::vector<double> v) {
  const std::size_t n = v.size() / 2;
  return Tensor<double>({n, 2}, std::move(v));
}

// Input(2 features as a 2x1x1 map) -> GAP -> two FC heads: a single linear layer per column.
ArchGraph linear_head_graph() {
  ArchGraph g;
  g.version = "linear";
  BlockSpec in;
  in.channels = 2;
  in.height = in.width = 1;
  g.add(in);
  BlockSpec gap;
  gap.kind = BlockKind::GAP;
  gap.inputs = {0};
  g.add(gap);
  for (int k = 0; k < 2; ++k) {
    BlockSpec h;
    h.kind = BlockKind::FCHead;
    h.inputs = {1};
    h.out_channels = 2;
    h.column = k;
    g.add(h);
  }
  BlockSpec agg;
  agg.kind = BlockKind::Aggregate;
  agg.inputs = {2, 3};
  g.add(agg);
  return g;
}

// Two Gaussian-ish blobs with a margin around the line x0 + x1 = 0.
TrainTestData separable(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  TrainTestData d;
  d.train.inputs = Tensor<float>({n, 2, 1, 1});
  for (std::size_t i = 0; i < n; ++i) {
    float a, b;
    do {
      a = u(rng);
      b = u(rng);
    } while (std::abs(a + b) < 0.3f);
    d.train.inputs[2 * i] = a;
    d.train.inputs[2 * i + 1] = b;
    d.train.labels.push_back(a + b > 0 ? 1 : 0);
  }
  d.test = d.train;
  return d;
}

double loss_on(const ArchGraph& g, const ModelParams<double>& p, const Tensor<double>& x, const std::vector<int>& y,
               double lambda) {
  const auto o = forward(g, p, x);
  return total_loss(o.p1, o.p2, o.p_agg, y, lambda).total;
}

}  // namespace

TEST(Discrepancy, Examples) {
  const auto a = dist({0.3, 0.7, 0.5, 0.5});
  EXPECT_DOUBLE_EQ(discrepancy(a, a), 0.0);
  EXPECT_DOUBLE_EQ(discrepancy(dist({1, 0}), dist({0, 1})), 1.0);
  EXPECT_NEAR(discrepancy(dist({0.9, 0.1}), dist({0.6, 0.4})), 0.3, 1e-15);
  EXPECT_THROW(discrepancy(dist({1, 0}), dist({1, 0, 0, 1})), ShapeError);
}

TEST(Discrepancy, SymmetricBoundedAndZeroOnlyWhenEqual) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 200; ++t) {
    auto p = softmax(random_tensor({3, 2}, rng, -4, 4));
    auto q = softmax(random_tensor({3, 2}, rng, -4, 4));
    const double d = discrepancy(p, q);
    EXPECT_DOUBLE_EQ(d, discrepancy(q, p));
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);  // 2/C with C = 2
    if (p != q) EXPECT_GT(d, 0.0);
  }
}

TEST(TotalLoss, OneHotPredictionCostsNothing) {
  const std::vector<int> y = {1, 0};
  const auto p = dist({0, 1, 1, 0});
  const auto v = total_loss(p, p, p, y, 0.0);
  EXPECT_DOUBLE_EQ(v.total, 0.0);
  EXPECT_EQ(v.clamped, 0);
}

TEST(TotalLoss, LambdaZeroIsCrossEntropyAndDiscrepancyIsSubtracted) {
  const std::vector<int> y = {0, 1};
  const auto p1 = dist({0.9, 0.1, 0.2, 0.8});
  const auto p2 = dist({0.6, 0.4, 0.4, 0.6});
  const auto agg = aggregate_heads(p1, p2);
  const double ce = -(std::log(0.75) + std::log(0.7)) / 2;
  EXPECT_NEAR(total_loss(p1, p2, agg, y, 0.0).total, ce, 1e-15);
  const double disc = (0.3 + 0.2) / 2;
  const auto v = total_loss(p1, p2, agg, y, 0.1);
  EXPECT_NEAR(v.cross_entropy, ce, 1e-15);
  EXPECT_NEAR(v.discrepancy, disc, 1e-15);
  EXPECT_NEAR(v.total, ce - 0.1 * disc, 1e-15);
}

TEST(TotalLoss, ZeroTrueClassProbabilityIsClampedAndCounted) {
  const std::vector<int> y = {0};
  const auto p = dist({0, 1});
  const auto v = total_loss(p, p, p, y, 0.0);
  EXPECT_NEAR(v.total, -std::log(kProbabilityFloor), 1e-9);
  EXPECT_EQ(v.clamped, 1);
  EXPECT_TRUE(std::isfinite(total_loss_grad(p, p, p, y, 0.0).p_agg[0]));
}

TEST(TotalLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  const auto r = vqi::testing::check_total_loss(rng, 20);
  EXPECT_LT(r.fd.max_rel, 1e-4) << r.fd.worst;
}

TEST(Sgd, ScalarArithmetic) {
  ModelParams<double> p;
  p.values = {{Tensor<double>({1}, 1.0)}};
  p.grads = {{Tensor<double>({1}, 2.0)}};
  sgd_step(p, 0.1);
  EXPECT_DOUBLE_EQ(p.values[0][0][0], 0.8);
  EXPECT_DOUBLE_EQ(p.grads[0][0][0], 0.0);
}

TEST(Sgd, ZeroRateAndLinearity) {
  std::mt19937_64 rng(3);
  const auto g = vqi::testing::toy_graph(8, 2);
  auto p = ModelParams<double>::kaiming_uniform(g, 4);
  const auto before = p.values;
  for (auto& node : p.grads)
    for (auto& t : node) t = random_tensor(t.shape(), rng);
  sgd_step(p, 0.0);
  EXPECT_EQ(p.values, before);

  // two steps with fixed gradients equal one step with the summed update
  auto fixed = p;
  for (auto& node : fixed.grads)
    for (auto& t : node) t = random_tensor(t.shape(), rng);
  const auto grads = fixed.grads;
  auto twice = fixed, once = fixed;
  sgd_step(twice, 0.01);
  twice.grads = grads;
  sgd_step(twice, 0.02);
  sgd_step(once, 0.03);
  for (std::size_t i = 0; i < once.values.size(); ++i)
    for (std::size_t j = 0; j < once.values[i].size(); ++j)
      for (std::size_t k = 0; k < once.values[i][j].numel(); ++k)
        EXPECT_NEAR(once.values[i][j][k], twice.values[i][j][k], 1e-15);
}

TEST(Sgd, TinyStepDoesNotIncreaseLoss) {
  std::mt19937_64 rng(5);
  const auto g = vqi::testing::toy_graph(8, 3);
  for (int t = 0; t < 5; ++t) {
    auto p = ModelParams<double>::kaiming_uniform(g, rng());
    const auto x = random_tensor({4, 1, 8, 8}, rng, 0, 1);
    const std::vector<int> y = {0, 1, 1, 0};
    const double l0 = loss_on(g, p, x, y, 0.0);
    ForwardTrace<double> trace;
    const auto o = forward(g, p, x, &trace);
    const auto lg = total_loss_grad(o.p1, o.p2, o.p_agg, y, 0.0);
    p.zero_grad();
    backward(g, p, x, trace, lg.p1, lg.p2, lg.p_agg);
    sgd_step(p, 1e-6);
    EXPECT_LE(loss_on(g, p, x, y, 0.0), l0 + 1e-8);
  }
}

TEST(TrainConfig, DefaultsAndWarmup) {
  TrainConfig c;
  EXPECT_EQ(c.epochs, 100);
  EXPECT_EQ(c.batch_size, 5);
  EXPECT_DOUBLE_EQ(c.learning_rate, 1e-3);
  EXPECT_DOUBLE_EQ(c.lambda_disc, 0.1);
  EXPECT_NEAR(c.lambda_at(0), 0.01, 1e-15);
  EXPECT_NEAR(c.lambda_at(4), 0.05, 1e-15);
  EXPECT_DOUBLE_EQ(c.lambda_at(9), 0.1);
  EXPECT_DOUBLE_EQ(c.lambda_at(50), 0.1);
  c.lambda_warmup_epochs = 0;
  EXPECT_DOUBLE_EQ(c.lambda_at(0), 0.1);
}

TEST(TrainConfig, JsonRoundTripAndValidation) {
  TrainConfig c;
  c.epochs = 30;
  c.seed = 42;
  c.lambda_disc = 0.0;
  c.eval_every = 30;
  const auto back = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.seed, 42u);
  EXPECT_THROW(TrainConfig::from_json(R"({"epoch": 3})"), std::invalid_argument);
  EXPECT_THROW(TrainConfig::from_json("[]"), std::invalid_argument);
  TrainConfig bad;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = {};
  bad.epochs = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = {};
  bad.lambda_disc = -1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Train, SeparableToyReachesFullTrainAccuracy) {
  const auto g = linear_head_graph();
  ASSERT_TRUE(g.is_valid());
  const auto data = separable(60, 7);
  // separability oracle: w = (1, 1), b = 0 classifies every point
  for (std::size_t i = 0; i < data.train.labels.size(); ++i)
    ASSERT_EQ(data.train.inputs[2 * i] + data.train.inputs[2 * i + 1] > 0, data.train.labels[i] == 1);
  TrainConfig cfg;
  cfg.epochs = 60;
  cfg.learning_rate = 0.5;
  cfg.lambda_disc = 0.0;
  cfg.seed = 1;
  const auto r = train_tensors<double>(g, data, cfg);
  EXPECT_DOUBLE_EQ(accuracy_percent(g, r.params, data.train), 100.0);
  ASSERT_EQ(r.history.size(), 60u);
  EXPECT_LT(r.history.back().loss, r.history.front().loss);
  EXPECT_DOUBLE_EQ(r.history.back().test_acc, 100.0);
}

TEST(Train, EqualSeedsGiveIdenticalHistory) {
  const auto g = vqi::testing::toy_graph(8, 2);
  std::mt19937_64 rng(8);
  TrainTestData d;
  d.train.inputs = random_tensor({12, 1, 8, 8}, rng, 0, 1).cast<float>();
  d.test.inputs = random_tensor({6, 1, 8, 8}, rng, 0, 1).cast<float>();
  for (int i = 0; i < 12; ++i) d.train.labels.push_back(i % 2);
  for (int i = 0; i < 6; ++i) d.test.labels.push_back(i % 2);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.seed = 99;
  cfg.learning_rate = 0.05;
  const auto a = train_tensors<float>(g, d, cfg);
  const auto b = train_tensors<float>(g, d, cfg);
  EXPECT_EQ(history_csv(a.history), history_csv(b.history));
  EXPECT_EQ(a.params.values, b.params.values);
  cfg.seed = 100;
  EXPECT_NE(train_tensors<float>(g, d, cfg).params.values, a.params.values);
  EXPECT_EQ(history_csv(a.history).substr(0, 22), "epoch,loss,test_acc\n1,");
}

TEST(Train, RejectsEmptyTrainingSplit) {
  const auto g = vqi::testing::toy_graph(8, 2);
  TrainTestData d;
  d.train.inputs = Tensor<float>({0, 1, 8, 8});
  EXPECT_THROW(train_tensors<float>(g, d, TrainConfig{}), std::invalid_argument);
  SampleSet unsplit;
  EXPECT_THROW(train<float>(g, unsplit, TrainConfig{}), std::invalid_argument);
}
