#pragma once

// Constrained architecture search: feasibility gate, performance score,
// graph mutations and an elitist evolutionary loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "vqi/graph.hpp"

namespace vqi {

struct ConstraintSet {
  std::int64_t max_flops = 100'000'000;
  bool forbid_pointwise_strided = true;
  bool aads_only_downsampling = true;

  void validate() const;
};

struct Violation {
  int node = -1;       // -1 for graph-level violations
  int constraint = 0;  // 1 = FLOPs budget, 2 = strided pointwise conv, 3 = non-AADS downsampling
  std::string message;
};

struct Feasibility {
  bool feasible = true;
  std::vector<Violation> violations;
  std::int64_t flops = 0;
};

/// Requires a structurally valid graph. The first convolution consuming the
/// input may be strided; every later spatial reduction must be an AADSDown.
Feasibility indicator_feasible(const ArchGraph& graph, const ConstraintSet& c = {});

struct SearchObjective {
  double kappa = 2.0;
  double beta = 0.5;
  double gamma = 0.5;

  void validate() const;
};

/// 20 * log10(a^kappa / (p^beta * f^gamma)) with params and flops in millions.
double universal_performance(double accuracy_pct, double params, double flops, const SearchObjective& obj = {});

enum class MutationKind { Widen, Narrow, AddVac, RemoveVac, MoveMerge, AddAads, RemoveAads, SwapKind };
std::string_view to_string(MutationKind k);

/// Applies one random structural edit and returns a valid graph (shape-checked).
/// The result may violate the ConstraintSet. Falls back to an unchanged copy when
/// no edit succeeds within `max_attempts`.
ArchGraph mutate(const ArchGraph& graph, std::mt19937_64& rng, int max_attempts = 64);
/// Same, reporting which edit was applied (unchanged copy reports nothing).
ArchGraph mutate(const ArchGraph& graph, std::mt19937_64& rng, int max_attempts, MutationKind* applied);

/// Small residual-style prototypes used to seed the search.
ArchGraph residual_prototype(int width, int blocks, int input_side = 224);
std::vector<ArchGraph> default_seed_population();

struct Candidate {
  ArchGraph graph;
  std::uint64_t hash = 0;
  double accuracy = 0;
  double score = 0;
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

struct LogEntry {
  int generation = 0;
  int index = 0;  // candidate index within the generation
  std::uint64_t hash = 0;
  std::uint64_t parent_hash = 0;
  std::string mutation;
  bool feasible = false;
  bool evaluated = false;
  bool admitted = false;
  double accuracy = 0;
  double score = 0;
  std::int64_t params = 0;
  std::int64_t flops = 0;
  std::vector<std::string> violations;

  std::string to_json() const;
};

struct GenerationSummary {
  int generation = 0;
  bool stagnant = false;
  double best_score = 0;
  std::uint64_t best_hash = 0;
};

/// Accuracy (percent) of a feasible graph under the proxy protocol.
using Evaluator = std::function<double(const ArchGraph&)>;

struct ProxyConfig {
  int epochs = 5;
  double data_fraction = 0.25;  // of the 422/400 benchmark composition
  int batch_size = 5;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

/// Trains for `epochs` on a reduced synthetic set and returns test accuracy, floored at 0.01%.
Evaluator make_proxy_evaluator(const ProxyConfig& cfg);

struct SearchConfig {
  int population = 8;
  int generations = 5;
  std::uint64_t seed = 0;
  int mutation_attempts = 64;
  int max_mutations_per_child = 2;
  ConstraintSet constraints;
  SearchObjective objective;
};

struct SearchState {
  std::vector<std::uint64_t> seeds;  // RNG seed used by each generation
  std::vector<Candidate> population;
  int generation = 0;
  Candidate best_so_far;
  std::vector<LogEntry> log;
  std::vector<GenerationSummary> summaries;
};

using GenerationCallback = std::function<void(const SearchState&)>;

SearchState search(const std::vector<ArchGraph>& seed_archs, const SearchConfig& cfg, const Evaluator& evaluate,
                   const GenerationCallback& on_generation = {});

/// Writes `generations.jsonl` (one line per candidate), `summary.jsonl` and `best_graph.json`.
void write_run(const SearchState& state, const std::filesystem::path& dir);

}  // namespace vqi
