#include "vqi/explore.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <stdexcept>

#include "json.hpp"
#include "rng.hpp"
#include "vqi/dataset.hpp"
#include "vqi/trainer.hpp"

namespace vqi {

void ConstraintSet::validate() const {
  if (max_flops <= 0) throw std::invalid_argument("ConstraintSet: max_flops must be > 0");
}

Feasibility indicator_feasible(const ArchGraph& graph, const ConstraintSet& c) {
  c.validate();
  graph.require_valid();
  Feasibility f;
  f.flops = count_flops(graph, graph.input_height(), graph.input_width());
  if (f.flops > c.max_flops) {
    f.violations.push_back({-1, 1, "FLOPs " + std::to_string(f.flops) + " exceed budget " + std::to_string(c.max_flops)});
  }
  const auto shapes = graph.infer_shapes();
  for (int id = 1; id < graph.size(); ++id) {
    const BlockSpec& b = graph.node(id);
    const std::string where = "node " + std::to_string(id) + " (" + std::string(to_string(b.kind)) + ")";
    if (c.forbid_pointwise_strided && b.kind == BlockKind::Conv1x1 && b.stride > 1) {
      f.violations.push_back({id, 2, where + ": pointwise convolution with stride " + std::to_string(b.stride)});
    }
    if (c.aads_only_downsampling && b.kind != BlockKind::AADSDown && !shapes[id].flat && !b.inputs.empty()) {
      const NodeShape& in = shapes[b.inputs[0]];
      const bool reduces = !in.flat && (shapes[id].height < in.height || shapes[id].width < in.width);
      const bool conv = b.kind == BlockKind::Conv3x3 || b.kind == BlockKind::Conv1x1 || b.kind == BlockKind::ConvDepthwise;
      const bool stem = conv && b.inputs.size() == 1 && graph.node(b.inputs[0]).kind == BlockKind::Input;
      if (reduces && !stem) {
        f.violations.push_back({id, 3, where + ": spatial reduction " + std::to_string(in.height) + "->" +
                                           std::to_string(shapes[id].height) + " outside an AADS block"});
      }
    }
  }
  f.feasible = f.violations.empty();
  return f;
}

void SearchObjective::validate() const {
  if (!(kappa > 0 && beta > 0 && gamma > 0)) throw std::invalid_argument("SearchObjective: exponents must be > 0");
}

double universal_performance(double accuracy_pct, double params, double flops, const SearchObjective& obj) {
  obj.validate();
  if (!(accuracy_pct > 0) || accuracy_pct > 100) throw std::invalid_argument("universal_performance: accuracy must be in (0, 100]");
  if (!(params > 0) || !(flops > 0)) throw std::invalid_argument("universal_performance: params and flops must be > 0");
  const double p = params / 1e6, m = flops / 1e6;
  return 20.0 * (obj.kappa * std::log10(accuracy_pct) - obj.beta * std::log10(p) - obj.gamma * std::log10(m));
}

std::string_view to_string(MutationKind k) {
  switch (k) {
    case MutationKind::Widen: return "widen";
    case MutationKind::Narrow: return "narrow";
    case MutationKind::AddVac: return "add_vac";
    case MutationKind::RemoveVac: return "remove_vac";
    case MutationKind::MoveMerge: return "move_merge";
    case MutationKind::AddAads: return "add_aads";
    case MutationKind::RemoveAads: return "remove_aads";
    case MutationKind::SwapKind: return "swap_kind";
  }
  return "?";
}

namespace {

using detail::below;

// Removes node `id`; references to it are redirected to `replacement` (< id, or -1 when it has no consumers).
void erase_node(ArchGraph& g, int id, int replacement) {
  for (auto& n : g.nodes) {
    for (int& src : n.inputs) {
      if (src == id) src = replacement;
      else if (src > id) --src;
    }
  }
  g.nodes.erase(g.nodes.begin() + id);
}

// Inserts `spec` right after `id`, consuming it; former consumers of `id` read the new node.
int insert_after(ArchGraph& g, int id, BlockSpec spec) {
  for (auto& n : g.nodes) {
    for (int& src : n.inputs) {
      if (src > id) ++src;
      else if (src == id) src = id + 1;
    }
  }
  spec.inputs = {id};
  g.nodes.insert(g.nodes.begin() + id + 1, std::move(spec));
  return id + 1;
}

void prune_dead(ArchGraph& g) {
  for (bool changed = true; changed;) {
    changed = false;
    const auto cons = g.consumers();
    const int agg = g.aggregate_id();
    for (int id = g.size() - 1; id > 0; --id) {
      if (id != agg && cons[id].empty()) {
        erase_node(g, id, -1);
        changed = true;
        break;
      }
    }
  }
}

template <typename Pred>
std::vector<int> nodes_where(const ArchGraph& g, Pred pred) {
  std::vector<int> out;
  for (int id = 0; id < g.size(); ++id)
    if (pred(id, g.node(id))) out.push_back(id);
  return out;
}

int pick(const std::vector<int>& ids, std::mt19937_64& rng) { return ids[below(rng, ids.size())]; }

int round_to(double v, int multiple) {
  const int m = std::max(1, multiple);
  return std::max(m, static_cast<int>(std::lround(v / m)) * m);
}

bool is_conv(BlockKind k) { return k == BlockKind::Conv3x3 || k == BlockKind::Conv1x1 || k == BlockKind::ConvDepthwise; }

// One attempt; false when the chosen edit has no applicable site.
bool try_edit(ArchGraph& g, MutationKind kind, std::mt19937_64& rng) {
  const auto shapes = g.infer_shapes();
  auto spatial = [&](int id) { return !shapes[id].flat; };
  switch (kind) {
    case MutationKind::Widen:
    case MutationKind::Narrow: {
      auto ids = nodes_where(g, [](int, const BlockSpec& b) {
        return ((b.kind == BlockKind::Conv3x3 || b.kind == BlockKind::Conv1x1) && b.out_channels > 0) ||
               (b.kind == BlockKind::AADSDown && b.conv_kernel > 0 && b.out_channels > 0);
      });
      if (ids.empty()) return false;
      BlockSpec& b = g.nodes[pick(ids, rng)];
      const double f = kind == MutationKind::Widen ? 1.25 : 0.8;
      const int next = round_to(b.out_channels * f, b.groups);
      if (next == b.out_channels) return false;
      b.out_channels = next;
      return true;
    }
    case MutationKind::AddVac: {
      auto ids = nodes_where(g, [&](int id, const BlockSpec& b) { return id > 0 && spatial(id) && b.kind != BlockKind::VAC; });
      if (ids.empty()) return false;
      const int at = pick(ids, rng);
      const int c = shapes[at].channels;
      std::vector<int> groups;
      for (int gr : {1, 2, 4})
        if (c % gr == 0) groups.push_back(gr);
      BlockSpec v;
      v.kind = BlockKind::VAC;
      v.column = g.node(at).column;
      v.embed_groups = groups[below(rng, groups.size())];
      v.embed_channels = round_to(c / 2.0, v.embed_groups);
      v.condense_stride = below(rng, 2) ? 4 : 2;
      insert_after(g, at, v);
      return true;
    }
    case MutationKind::RemoveVac: {
      auto ids = nodes_where(g, [](int, const BlockSpec& b) { return b.kind == BlockKind::VAC; });
      if (ids.empty()) return false;
      const int id = pick(ids, rng);
      erase_node(g, id, g.node(id).inputs[0]);
      return true;
    }
    case MutationKind::MoveMerge: {
      auto merges = nodes_where(g, [](int, const BlockSpec& b) {
        return b.kind == BlockKind::Concat || b.kind == BlockKind::Add;
      });
      if (merges.empty()) return false;
      const int m = pick(merges, rng);
      BlockSpec& mb = g.nodes[m];
      const std::size_t slot = below(rng, mb.inputs.size());
      std::vector<int> options;
      for (int j = 1; j < m; ++j) {
        if (!spatial(j) || std::find(mb.inputs.begin(), mb.inputs.end(), j) != mb.inputs.end()) continue;
        const NodeShape& cur = shapes[mb.inputs[slot]];
        const bool fits = mb.kind == BlockKind::Add ? shapes[j] == cur
                                                    : shapes[j].height == cur.height && shapes[j].width == cur.width;
        if (fits) options.push_back(j);
      }
      if (options.empty()) return false;
      mb.inputs[slot] = pick(options, rng);
      prune_dead(g);
      return true;
    }
    case MutationKind::AddAads: {
      auto ids = nodes_where(g, [&](int id, const BlockSpec&) {
        return id > 0 && spatial(id) && shapes[id].height >= 2 && shapes[id].width >= 2;
      });
      if (ids.empty()) return false;
      const int at = pick(ids, rng);
      BlockSpec a;
      a.kind = BlockKind::AADSDown;
      a.column = g.node(at).column;
      insert_after(g, at, a);
      return true;
    }
    case MutationKind::RemoveAads: {
      auto ids = nodes_where(g, [](int, const BlockSpec& b) { return b.kind == BlockKind::AADSDown; });
      if (ids.empty()) return false;
      const int id = pick(ids, rng);
      BlockSpec& b = g.nodes[id];
      if (b.conv_kernel > 0) {
        // keep the convolution, drop the downsampling
        b.kind = b.conv_kernel == 3 ? BlockKind::Conv3x3 : BlockKind::Conv1x1;
        if (b.out_channels == 0) b.out_channels = shapes[b.inputs[0]].channels;
        b.stride = 1;
        b.conv_kernel = 0;
      } else {
        erase_node(g, id, b.inputs[0]);
      }
      return true;
    }
    case MutationKind::SwapKind: {
      auto ids = nodes_where(g, [](int, const BlockSpec& b) {
        return is_conv(b.kind) || b.kind == BlockKind::MaxPool || (b.kind == BlockKind::AADSDown && b.conv_kernel == 0);
      });
      if (ids.empty()) return false;
      const int id = pick(ids, rng);
      BlockSpec& b = g.nodes[id];
      const int in_c = shapes[b.inputs[0]].channels;
      switch (b.kind) {
        case BlockKind::Conv3x3:
          if (below(rng, 2) && b.out_channels == in_c && b.stride == 1) {
            b.kind = BlockKind::ConvDepthwise;
            b.out_channels = 0;
            b.groups = 1;
          } else {
            b.kind = BlockKind::Conv1x1;
          }
          break;
        case BlockKind::Conv1x1:
          b.kind = BlockKind::Conv3x3;
          break;
        case BlockKind::ConvDepthwise:
          b.kind = BlockKind::Conv3x3;
          b.out_channels = in_c;
          b.groups = 1;
          break;
        case BlockKind::AADSDown:
          b.kind = BlockKind::MaxPool;
          b.pool_kernel = 2;
          b.stride = 2;
          b.pool_padding = 0;
          break;
        case BlockKind::MaxPool:
          b.kind = BlockKind::AADSDown;
          b.stride = 1;
          b.conv_kernel = 0;
          b.out_channels = 0;
          break;
        default:
          return false;
      }
      return true;
    }
  }
  return false;
}

}  // namespace

ArchGraph mutate(const ArchGraph& graph, std::mt19937_64& rng, int max_attempts) {
  return mutate(graph, rng, max_attempts, nullptr);
}

ArchGraph mutate(const ArchGraph& graph, std::mt19937_64& rng, int max_attempts, MutationKind* applied) {
  graph.require_valid();
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    const auto kind = static_cast<MutationKind>(below(rng, 8));
    ArchGraph g = graph;
    try {
      if (!try_edit(g, kind, rng)) continue;
    } catch (const std::exception&) {
      continue;
    }
    if (g == graph || !g.is_valid()) continue;
    if (applied) *applied = kind;
    return g;
  }
  return graph;
}

namespace {

BlockSpec make(BlockKind kind, std::vector<int> inputs, int out = 0, int groups = 1, int stride = 1) {
  BlockSpec b;
  b.kind = kind;
  b.inputs = std::move(inputs);
  b.out_channels = out;
  b.groups = groups;
  b.stride = stride;
  return b;
}

}  // namespace

ArchGraph residual_prototype(int width, int blocks, int input_side) {
  if (width < 1 || blocks < 1) throw std::invalid_argument("residual_prototype: width and blocks must be positive");
  ArchGraph g;
  g.version = "residual-proto-w" + std::to_string(width) + "-b" + std::to_string(blocks);
  BlockSpec in;
  in.kind = BlockKind::Input;
  in.height = in.width = input_side;
  in.standardize = true;
  int x = g.add(in);
  x = g.add(make(BlockKind::Conv3x3, {x}, width, 1, 2));
  int c = width;
  for (int i = 0; i < blocks; ++i) {
    BlockSpec down;
    down.kind = BlockKind::AADSDown;
    down.inputs = {x};
    if (i > 0) {
      c *= 2;
      down.conv_kernel = 1;
      down.out_channels = c;
    }
    x = g.add(down);
    const int a = g.add(make(BlockKind::Conv3x3, {x}, c, c >= 16 ? 2 : 1));
    const int b = g.add(make(BlockKind::Conv3x3, {a}, c, c >= 16 ? 2 : 1));
    x = g.add(make(BlockKind::Add, {x, b}));
  }
  const int gap = g.add(make(BlockKind::GAP, {x}));
  BlockSpec h1 = make(BlockKind::FCHead, {gap}, 2);
  BlockSpec h2 = h1;
  h2.column = 1;
  const int p1 = g.add(h1);
  const int p2 = g.add(h2);
  g.add(make(BlockKind::Aggregate, {p1, p2}));
  return g;
}

std::vector<ArchGraph> default_seed_population() {
  return {residual_prototype(8, 4), residual_prototype(12, 4), residual_prototype(16, 4), residual_prototype(8, 5)};
}

namespace {

std::string hex(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::string LogEntry::to_json() const {
  nlohmann::ordered_json j;
  j["generation"] = generation;
  j["index"] = index;
  j["hash"] = hex(hash);
  j["parent"] = hex(parent_hash);
  j["mutation"] = mutation;
  j["feasible"] = feasible;
  j["evaluated"] = evaluated;
  j["admitted"] = admitted;
  if (evaluated) {
    j["accuracy"] = accuracy;
    j["score"] = score;
  } else {
    j["accuracy"] = nullptr;
    j["score"] = nullptr;
  }
  j["params"] = params;
  j["flops"] = flops;
  j["violations"] = violations;
  return j.dump();
}

Evaluator make_proxy_evaluator(const ProxyConfig& cfg) {
  if (cfg.epochs < 1 || !(cfg.data_fraction > 0 && cfg.data_fraction <= 1)) {
    throw std::invalid_argument("ProxyConfig: epochs must be >= 1 and data_fraction in (0, 1]");
  }
  const auto n_def = static_cast<std::size_t>(std::lround(422 * cfg.data_fraction));
  const auto n_ok = static_cast<std::size_t>(std::lround(400 * cfg.data_fraction));
  auto data = std::make_shared<TrainTestData>(to_train_test(split(generate(cfg.seed, n_def, n_ok), cfg.seed)));
  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.learning_rate = cfg.learning_rate;
  tc.seed = cfg.seed;
  tc.eval_every = cfg.epochs;
  return [data, tc](const ArchGraph& g) {
    const auto r = train_tensors<float>(g, *data, tc);
    return std::max(0.01, r.history.back().test_acc);
  };
}

SearchState search(const std::vector<ArchGraph>& seed_archs, const SearchConfig& cfg, const Evaluator& evaluate,
                   const GenerationCallback& on_generation) {
  if (cfg.population < 1 || cfg.generations < 0) throw std::invalid_argument("search: population >= 1, generations >= 0");
  if (seed_archs.empty()) throw std::invalid_argument("search: need at least one seed architecture");
  cfg.constraints.validate();
  cfg.objective.validate();

  std::map<std::uint64_t, double> accuracy_cache;
  auto score = [&](const ArchGraph& g, const Feasibility& f) {
    Candidate c;
    c.graph = g;
    c.hash = g.hash();
    auto it = accuracy_cache.find(c.hash);
    c.accuracy = it != accuracy_cache.end() ? it->second : (accuracy_cache[c.hash] = evaluate(g));
    c.params = count_params(g);
    c.flops = f.flops;
    c.score = universal_performance(std::clamp(c.accuracy, 0.01, 100.0), static_cast<double>(c.params),
                                    static_cast<double>(c.flops), cfg.objective);
    return c;
  };
  auto ranked = [](std::vector<Candidate>& v) {
    std::stable_sort(v.begin(), v.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  };

  SearchState st;
  std::set<std::uint64_t> seen;
  for (std::size_t i = 0; i < seed_archs.size(); ++i) {
    const auto f = indicator_feasible(seed_archs[i], cfg.constraints);
    if (!f.feasible) {
      throw std::invalid_argument("search: seed architecture " + std::to_string(i) + " is infeasible: " +
                                  f.violations.front().message);
    }
    LogEntry e;
    e.index = static_cast<int>(i);
    e.hash = seed_archs[i].hash();
    e.mutation = "seed";
    e.feasible = true;
    if (!seen.insert(e.hash).second) {
      st.log.push_back(e);
      continue;
    }
    Candidate c = score(seed_archs[i], f);
    e.evaluated = true;
    e.accuracy = c.accuracy;
    e.score = c.score;
    e.params = c.params;
    e.flops = c.flops;
    st.population.push_back(std::move(c));
    st.log.push_back(std::move(e));
  }
  ranked(st.population);
  if (st.population.size() > static_cast<std::size_t>(cfg.population)) st.population.resize(static_cast<std::size_t>(cfg.population));
  for (auto& e : st.log) {
    e.admitted = e.evaluated && std::any_of(st.population.begin(), st.population.end(),
                                            [&](const Candidate& c) { return c.hash == e.hash; });
  }
  st.best_so_far = st.population.front();
  st.summaries.push_back({0, false, st.best_so_far.score, st.best_so_far.hash});
  if (on_generation) on_generation(st);

  for (int gen = 1; gen <= cfg.generations; ++gen) {
    const std::uint64_t gseed = detail::mix(cfg.seed, static_cast<std::uint64_t>(gen));
    st.seeds.push_back(gseed);
    std::mt19937_64 rng(gseed);
    std::vector<Candidate> children;
    std::vector<std::size_t> child_log;
    std::set<std::uint64_t> present;
    for (const auto& c : st.population) present.insert(c.hash);

    for (int k = 0; k < cfg.population; ++k) {
      // binary tournament
      const auto& a = st.population[below(rng, st.population.size())];
      const auto& b = st.population[below(rng, st.population.size())];
      const Candidate& parent = a.score >= b.score ? a : b;
      ArchGraph child = parent.graph;
      std::string applied;
      const int edits = 1 + static_cast<int>(below(rng, static_cast<std::uint64_t>(std::max(1, cfg.max_mutations_per_child))));
      for (int m = 0; m < edits; ++m) {
        MutationKind kind{};
        ArchGraph next = mutate(child, rng, cfg.mutation_attempts, &kind);
        if (next == child) continue;
        child = std::move(next);
        if (!applied.empty()) applied += "+";
        applied += to_string(kind);
      }
      LogEntry e;
      e.generation = gen;
      e.index = k;
      e.hash = child.hash();
      e.parent_hash = parent.hash;
      e.mutation = applied.empty() ? "none" : applied;
      const auto f = indicator_feasible(child, cfg.constraints);
      e.feasible = f.feasible;
      e.flops = f.flops;
      e.params = count_params(child);
      for (const auto& v : f.violations) e.violations.push_back(v.message);
      if (f.feasible && present.insert(e.hash).second) {
        Candidate c = score(child, f);
        e.evaluated = true;
        e.accuracy = c.accuracy;
        e.score = c.score;
        children.push_back(std::move(c));
        child_log.push_back(st.log.size());
      }
      st.log.push_back(std::move(e));
    }

    std::vector<Candidate> merged = st.population;
    for (auto& c : children) merged.push_back(c);
    ranked(merged);
    if (merged.size() > static_cast<std::size_t>(cfg.population)) merged.resize(static_cast<std::size_t>(cfg.population));
    for (std::size_t i : child_log) {
      st.log[i].admitted = std::any_of(merged.begin(), merged.end(), [&](const Candidate& c) { return c.hash == st.log[i].hash; });
    }
    st.population = std::move(merged);
    st.generation = gen;
    if (st.population.front().score > st.best_so_far.score) st.best_so_far = st.population.front();
    st.summaries.push_back({gen, children.empty(), st.best_so_far.score, st.best_so_far.hash});
    if (on_generation) on_generation(st);
  }
  return st;
}

void write_run(const SearchState& state, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "generations.jsonl");
    for (const auto& e : state.log) out << e.to_json() << "\n";
  }
  {
    std::ofstream out(dir / "summary.jsonl");
    for (const auto& s : state.summaries) {
      nlohmann::ordered_json j;
      j["generation"] = s.generation;
      j["stagnant"] = s.stagnant;
      j["best_score"] = s.best_score;
      j["best_hash"] = hex(s.best_hash);
      out << j.dump() << "\n";
    }
  }
  save_graph(state.best_so_far.graph, (dir / "best_graph.json").string());
}

}  // namespace vqi
