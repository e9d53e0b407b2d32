// Acceptance suite: one PASS/FAIL line per criterion. Exit status is non-zero
// when any criterion fails.
//
//   acceptance [--only key[,key...]] [--workdir dir]
//
// keys: gradients conv_oracle budgets flops_example training anti_aliasing
//       search table service

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../common/gradient_suite.hpp"
#include "../unit/test_util.hpp"
#include "vqi/dataset.hpp"
#include "vqi/explore.hpp"
#include "vqi/png_io.hpp"
#include "vqi/profiler.hpp"
#include "vqi/robustness.hpp"
#include "vqi/service.hpp"
#include "vqi/trainer.hpp"

using namespace vqi;
namespace fs = std::filesystem;
using Clock_t = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock_t::time_point t0) { return std::chrono::duration<double>(Clock_t::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void progress(const std::string& msg) {
  std::fprintf(stderr, "  .. %s\n", msg.c_str());
  std::fflush(stderr);
}

// ---------------------------------------------------------------------------

Outcome gradients() {
  const auto t0 = Clock_t::now();
  const auto reports = vqi::testing::run_gradient_suite(20, 20240611);
  const double secs = seconds_since(t0);
  Outcome o{secs < 120.0, ""};
  double worst = 0;
  std::string worst_name;
  for (const auto& r : reports) {
    if (r.shapes < 20 || r.fd.checked == 0 || !(r.fd.max_rel < 1e-4)) {
      o.pass = false;
      o.detail += r.name + " max_rel " + fmt("%.2e", r.fd.max_rel) + "; ";
    }
    if (r.fd.max_rel > worst) {
      worst = r.fd.max_rel;
      worst_name = r.name;
    }
  }
  o.detail += std::to_string(reports.size()) + " layers x 20 shapes, worst rel err " + fmt("%.2e", worst) + " (" +
              worst_name + "), " + fmt("%.1f", secs) + " s";
  return o;
}

Outcome conv_oracle() {
  using vqi::testing::naive_conv;
  using vqi::testing::random_tensor;
  const auto t0 = Clock_t::now();
  std::mt19937_64 rng(7);
  int cases = 0;
  double worst = 0;
  for (int k : {1, 3, 5})
    for (int stride : {1, 2, 3})
      for (int pad : {0, 1, 2})
        for (int groups : {1, 2, 4, 8}) {
          ConvSpec s{8, 16, k, k, stride, pad, groups};
          for (std::size_t side : {7u, 12u}) {
            if (side + 2 * std::size_t(pad) < std::size_t(k)) continue;
            const auto x = random_tensor({2, 8, side, side + 1}, rng);
            const auto w = random_tensor(s.weight_shape(), rng);
            const auto b = random_tensor({16}, rng);
            const auto y = conv2d_forward(x, w, b, s);
            const auto ref = naive_conv(x, w, b, s);
            if (y.shape() != ref.shape()) return {false, "shape mismatch at k" + std::to_string(k)};
            for (std::size_t i = 0; i < y.numel(); ++i) worst = std::max(worst, std::abs(y[i] - ref[i]));
            ++cases;
          }
        }
  const double secs = seconds_since(t0);
  return {worst <= 1e-10 && secs < 60.0, std::to_string(cases) + " cases, max abs diff " + fmt("%.2e", worst) + ", " +
                                             fmt("%.1f", secs) + " s"};
}

Outcome budgets() {
  const auto g = build_reference_config();
  const auto params = count_params(g);
  const auto flops = count_flops(g, 224, 224);
  const auto f = indicator_feasible(g);
  const bool ok = params >= 700'000 && params <= 850'000 && flops <= 100'000'000 && f.feasible;
  return {ok, "params " + std::to_string(params) + ", FLOPs " + std::to_string(flops) + ", feasible " +
                  (f.feasible ? "yes" : "no")};
}

Outcome flops_example() {
  ArchGraph g;
  BlockSpec in;
  in.channels = 3;
  g.add(in);
  BlockSpec c;
  c.kind = BlockKind::Conv3x3;
  c.inputs = {0};
  c.out_channels = 16;
  c.relu = false;
  g.add(c);
  const std::int64_t hand = 2LL * 224 * 224 * 16 * 3 * 3 * 3;
  const auto got = count_flops(g, 224, 224);
  return {got == 43'352'064 && hand == got, "count_flops " + std::to_string(got) + ", hand " + std::to_string(hand)};
}

// ---------------------------------------------------------------------------
// Training runs are shared by the training, anti-aliasing and service criteria.

struct Run {
  std::uint64_t seed = 0;
  double lambda = 0;
  double test_acc = 0;
  double seconds = 0;
  ModelParams<float> params;
};

struct SeedData {
  SampleSet set;
  TrainTestData tensors;
};

const SeedData& seed_data(std::uint64_t seed) {
  static std::map<std::uint64_t, SeedData> cache;
  auto it = cache.find(seed);
  if (it == cache.end()) {
    SeedData d;
    d.set = split(generate(seed), seed);
    d.tensors = to_train_test(d.set);
    it = cache.emplace(seed, std::move(d)).first;
  }
  return it->second;
}

TrainConfig protocol(std::uint64_t seed, double lambda) {
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 5;
  cfg.learning_rate = 1e-3;
  cfg.lambda_disc = lambda;
  cfg.seed = seed;
  cfg.eval_every = 30;
  return cfg;
}

const Run& trained(std::uint64_t seed, double lambda) {
  static std::map<std::pair<std::uint64_t, double>, Run> cache;
  const auto key = std::make_pair(seed, lambda);
  auto it = cache.find(key);
  if (it == cache.end()) {
    const auto& d = seed_data(seed);
    const auto t0 = Clock_t::now();
    auto r = train_tensors<float>(build_reference_config(), d.tensors, protocol(seed, lambda));
    Run run{seed, lambda, r.history.back().test_acc, seconds_since(t0), std::move(r.params)};
    progress("seed " + std::to_string(seed) + " lambda " + fmt("%.1f", lambda) + ": test " +
             fmt("%.2f", run.test_acc) + "% in " + fmt("%.0f", run.seconds) + " s");
    it = cache.emplace(key, std::move(run)).first;
  }
  return it->second;
}

const std::uint64_t kSeeds[3] = {1, 2, 3};

Outcome training() {
  double t = 0, mean_default = 0, mean_ablation = 0;
  int passing = 0;
  std::string accs = "acc(lambda=0.1)";
  for (auto s : kSeeds) {
    const auto& r = trained(s, 0.1);
    passing += r.test_acc >= 95.0;
    mean_default += r.test_acc / 3;
    accs += " " + fmt("%.2f", r.test_acc);
    t += r.seconds;
  }
  accs += "; acc(lambda=0)";
  for (auto s : kSeeds) {
    const auto& r = trained(s, 0.0);
    mean_ablation += r.test_acc / 3;
    accs += " " + fmt("%.2f", r.test_acc);
    t += r.seconds;
  }
  const bool ok = passing == 3 && mean_ablation - mean_default <= 2.0 && t <= 7200.0;
  return {ok, accs + "; means " + fmt("%.2f", mean_default) + " vs " + fmt("%.2f", mean_ablation) + "; " +
                  std::to_string(passing) + "/3 seeds >= 95%; " + fmt("%.0f", t) + " s"};
}

Outcome anti_aliasing() {
  int wins = 0;
  std::string detail;
  const auto ref = build_reference_config();
  const auto twin = max_pool_twin(ref);
  for (auto s : kSeeds) {
    const auto& aads = trained(s, 0.1);
    const auto& d = seed_data(s);
    const auto t0 = Clock_t::now();
    const auto twin_run = train_tensors<float>(twin, d.tensors, protocol(s, 0.1));
    const auto a = shift_flip_rate(ref, aads.params, d.tensors.test.inputs);
    const auto m = shift_flip_rate(twin, twin_run.params, d.tensors.test.inputs);
    progress("seed " + std::to_string(s) + ": AADS flips " + std::to_string(a.flips) + ", max-pool flips " +
             std::to_string(m.flips) + " (twin acc " + fmt("%.2f", twin_run.history.back().test_acc) + "%, " +
             fmt("%.0f", seconds_since(t0)) + " s)");
    wins += a.rate() < m.rate();
    detail += "seed " + std::to_string(s) + ": " + std::to_string(a.flips) + "/" + std::to_string(a.comparisons) +
              " vs " + std::to_string(m.flips) + "/" + std::to_string(m.comparisons) + " (twin acc " +
              fmt("%.1f", twin_run.history.back().test_acc) + "%); ";
  }
  return {wins >= 2, detail + "AADS lower on " + std::to_string(wins) + "/3 seeds"};
}

// ---------------------------------------------------------------------------

std::string search_fingerprint(const SearchState& s) {
  std::string out;
  for (const auto& e : s.log) out += e.to_json() + "\n";
  for (const auto& g : s.summaries) out += std::to_string(g.best_hash) + " " + fmt("%.17g", g.best_score) + "\n";
  return out;
}

Outcome search_soundness() {
  SearchConfig cfg;
  cfg.population = 8;
  cfg.generations = 5;
  cfg.seed = 11;
  ProxyConfig proxy;
  proxy.epochs = 5;
  proxy.seed = 11;
  std::vector<double> secs;
  std::vector<SearchState> runs;
  for (int rep = 0; rep < 2; ++rep) {
    const auto t0 = Clock_t::now();
    runs.push_back(search(default_seed_population(), cfg, make_proxy_evaluator(proxy), [&](const SearchState& s) {
      progress("search run " + std::to_string(rep + 1) + " generation " + std::to_string(s.generation) +
               " best " + fmt("%.3f", s.best_so_far.score));
    }));
    secs.push_back(seconds_since(t0));
  }
  const auto& s = runs[0];
  std::size_t violations = 0, admitted = 0;
  for (const auto& e : s.log) {
    if (!e.admitted) continue;
    ++admitted;
    if (!e.feasible) ++violations;
  }
  for (const auto& c : s.population) violations += !indicator_feasible(c.graph, cfg.constraints).feasible;
  violations += !indicator_feasible(s.best_so_far.graph, cfg.constraints).feasible;
  bool monotone = true;
  for (std::size_t i = 1; i < s.summaries.size(); ++i) monotone &= s.summaries[i].best_score >= s.summaries[i - 1].best_score;
  const bool same = search_fingerprint(runs[0]) == search_fingerprint(runs[1]);
  const double worst = *std::max_element(secs.begin(), secs.end());
  const bool ok = violations == 0 && monotone && same && s.generation == 5 && worst < 1800.0;
  return {ok, std::to_string(admitted) + " admitted, " + std::to_string(violations) + " violations, best " +
                  fmt("%.3f", s.best_so_far.score) + (monotone ? " non-decreasing" : " DECREASED") +
                  (same ? ", bitwise identical rerun" : ", rerun DIFFERS") + ", " + fmt("%.0f", secs[0]) + " s + " +
                  fmt("%.0f", secs[1]) + " s"};
}

Outcome table_fidelity() {
  const auto rows = published_rows();
  const auto report = emit_table(rows);
  std::vector<std::string> missing;
  for (const char* cell : {"ResNet-50", "92.8", "25.6", "8200", "83", "EfficientNet-B0", "98.0", "5.3", "780", "88",
                           "MnasNet", "89.4", "3.9", "630", "89", "MobileNetV3 (Large)", "97.8", "5.4", "438", "56",
                           "LightDefectNet", "98.2", "0.77", "93", "10"}) {
    if (report.text.find(cell) == std::string::npos) missing.push_back(cell);
  }
  for (const char* ratio : {"33×", "88×", "8.4×", "6.9×", "8.3×", "8.8×", "5.6×"}) {
    if (report.text.find(ratio) == std::string::npos) missing.push_back(ratio);
  }
  const bool csv_ok = rows_from_csv(report.csv) == rows;
  std::string detail = std::to_string(rows.size()) + " rows";
  for (const auto& m : missing) detail += ", missing '" + m + "'";
  if (!csv_ok) detail += ", CSV does not round-trip";
  if (missing.empty() && csv_ok) detail += ", all values and ratios 33x 88x 8.4x 6.9x 8.3x 8.8x 5.6x present";
  return {rows.size() == 5 && missing.empty() && csv_ok, detail};
}

Outcome service_durability(const fs::path& workdir) {
  const auto store = workdir / "store";
  fs::remove_all(store);
  const auto& run = trained(1, 0.1);
  Checkpoint ckpt{build_reference_config(), run.params, "{}"};
  const auto& set = seed_data(1).set;
  std::vector<const Sample*> picks;
  for (Label want : {Label::Defective, Label::NonDefective}) {
    int n = 0;
    for (const auto& s : set.samples)
      if (s.split == SplitTag::Test && s.label == want && n < 5) {
        picks.push_back(&s);
        ++n;
      }
  }
  std::int64_t tick = 1'700'000'000'000;
  auto clock = [&tick] { return tick += 250; };

  std::vector<InspectionRecord> before;
  ServiceStats stats;
  LightState light;
  std::string q_unreviewed, q_all;
  int defective_right = 0;
  double min_conf = 1;
  {
    InspectService svc(store, ckpt, clock);
    for (const auto* s : picks) {
      const auto png = encode_png(to_gray8(s->pixels, set.width, set.height));
      const auto r = svc.inspect(png.data(), png.size());
      if (s->label == Label::Defective) {
        defective_right += r.verdict == Verdict::Defective;
        min_conf = std::min(min_conf, r.confidence);
      }
    }
    svc.review(1, Verdict::Defective, "inspector-a");
    svc.review(4, Verdict::NonDefective, "inspector-b");
    svc.review(7, Verdict::Defective, "inspector-a");
    before = svc.records();
    stats = svc.stats();
    light = svc.light();
    q_unreviewed = svc.queue(QueueFilter::Unreviewed, 1).to_json();
    q_all = svc.queue(QueueFilter::All, 1).to_json();
  }
  InspectService replayed(store, ckpt, clock);
  const bool same = replayed.records() == before && replayed.stats() == stats && replayed.light() == light &&
                    replayed.queue(QueueFilter::Unreviewed, 1).to_json() == q_unreviewed &&
                    replayed.queue(QueueFilter::All, 1).to_json() == q_all;
  const bool counts = stats.total == 10 && stats.reviewed == 3;
  return {same && counts, "10 inspects, 3 reviews; replay " + std::string(same ? "identical" : "DIFFERS") +
                              " (queue, stats, light " + std::string(to_string(light.color)) + "); defective plates " +
                              std::to_string(defective_right) + "/5 flagged, min confidence " + fmt("%.3f", min_conf)};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<std::string> only;
  fs::path workdir = fs::temp_directory_path() / ("vqi_acceptance_" + std::to_string(::getpid()));
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string k; std::getline(ss, k, ',');) only.insert(k);
    } else if (a == "--workdir" && i + 1 < argc) {
      workdir = argv[++i];
    } else {
      std::fprintf(stderr, "usage: %s [--only key[,key...]] [--workdir dir]\n", argv[0]);
      return 2;
    }
  }
  fs::create_directories(workdir);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradients", gradients},
      {"conv_oracle", conv_oracle},
      {"budgets", budgets},
      {"flops_example", flops_example},
      {"training", training},
      {"anti_aliasing", anti_aliasing},
      {"search", search_soundness},
      {"table", table_fidelity},
      {"service", [&] { return service_durability(workdir); }},
  };
  int failures = 0;
  const auto t0 = Clock_t::now();
  for (const auto& [key, fn] : criteria) {
    if (!only.empty() && !only.count(key)) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", key.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("acceptance: %d failure(s), %.0f s\n", failures, seconds_since(t0));
  fs::remove_all(workdir);
  return failures ? 1 : 0;
}
