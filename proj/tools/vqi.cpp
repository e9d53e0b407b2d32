#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "vqi/dataset.hpp"
#include "vqi/explore.hpp"
#include "vqi/http_server.hpp"
#include "vqi/profiler.hpp"
#include "vqi/trainer.hpp"

namespace fs = std::filesystem;
using namespace vqi;

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

struct GendataArgs {
  std::uint64_t seed = 0;
  std::string out;
  std::size_t defective = 422, clean = 400;
  bool no_split = false;
};

int run_gendata(const GendataArgs& a) {
  SampleSet set = generate(a.seed, a.defective, a.clean);
  if (!a.no_split) set = split(std::move(set), a.seed);
  write_directory(set, a.out);
  std::cout << "wrote " << set.samples.size() << " images (" << set.count(Label::Defective) << " defective, "
            << set.count(Label::NonDefective) << " clean) to " << a.out << "\n"
            << "brightness-threshold accuracy " << brightness_threshold_accuracy(set) << "%\n";
  return 0;
}

struct TrainArgs {
  std::string config, data, out, graph;
  std::uint64_t data_seed = 0;
  int epochs = -1;
};

int run_train(const TrainArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : TrainConfig::from_json(read_text(a.config));
  if (a.epochs > 0) cfg.epochs = a.epochs;
  cfg.validate();
  const ArchGraph graph = a.graph.empty() ? build_reference_config() : load_graph(a.graph);

  SampleSet set;
  if (a.data.empty()) {
    set = generate(a.data_seed);
    std::cout << "synthetic data, seed " << a.data_seed << "\n";
  } else {
    set = load_directory(a.data);
    std::cout << "loaded " << set.samples.size() << " images from " << a.data << "\n";
  }
  if (!set.is_split()) set = split(std::move(set), cfg.seed);

  // --out is either a directory or the checkpoint path itself (*.vqic); side files go next to it
  const fs::path out(a.out);
  const bool file_out = out.extension() == ".vqic";
  const fs::path dir = file_out ? (out.has_parent_path() ? out.parent_path() : fs::path(".")) : out;
  const fs::path ckpt = file_out ? out : dir / "model.vqic";
  const std::string prefix = file_out ? out.stem().string() + "." : "";
  fs::create_directories(dir);
  auto result = train<float>(graph, set, cfg, [](const EpochRecord& e) {
    std::cout << "epoch " << e.epoch << " loss " << e.loss << " train " << e.train_acc << "%";
    if (e.test_acc >= 0) std::cout << " test " << e.test_acc << "%";
    std::cout << std::endl;
  });
  nlohmann::ordered_json meta;
  meta["test_accuracy"] = result.history.back().test_acc;
  meta["epochs"] = cfg.epochs;
  meta["config"] = nlohmann::json::parse(cfg.to_json());
  if (set.generator_seed) meta["data_seed"] = *set.generator_seed;
  save_checkpoint(ckpt.string(), {graph, std::move(result.params), meta.dump()});
  write_text(dir / (prefix + "history.csv"), history_csv(result.history));
  write_text(dir / (prefix + "config.json"), cfg.to_json() + "\n");
  save_graph(graph, (dir / (prefix + "graph.json")).string());
  std::cout << "final test accuracy " << result.history.back().test_acc << "%, checkpoint " << ckpt.string() << "\n";
  return 0;
}

struct BenchArgs {
  std::string checkpoint, emit = "table", name = "LightDefectNet (measured)";
  int batch = 10, iters = 100, warmup = 10;
  double accuracy = -1;
  bool published = false;
};

int run_bench(const BenchArgs& a) {
  std::vector<BenchRow> rows = published_rows();
  if (a.published) {
    std::cout << (a.emit == "csv" ? emit_table(rows).csv : emit_table(rows).text);
    return 0;
  }
  if (a.checkpoint.empty()) throw CLI::ValidationError("--checkpoint", "required unless --published is given");
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  double acc = a.accuracy;
  if (acc <= 0) {
    const auto meta = nlohmann::json::parse(ckpt.metadata_json);
    acc = meta.value("test_accuracy", -1.0);
    if (acc <= 0) throw std::runtime_error("checkpoint has no test_accuracy; pass --accuracy");
  }
  const auto stats = benchmark_latency(ckpt.graph, ckpt.params, a.batch, a.warmup, a.iters);
  rows.pop_back();
  rows.push_back({a.name, acc, count_params(ckpt.graph) / 1e6,
                  count_flops(ckpt.graph, ckpt.graph.input_height(), ckpt.graph.input_width()) / 1e6,
                  stats.per_sample_ms});
  const auto rep = emit_table(rows);
  if (a.emit == "csv") {
    std::cout << rep.csv;
    return 0;
  }
  std::cout << "batch " << stats.batch_size << ", " << stats.iterations << " timed iterations: median "
            << stats.median_ms << " ms, p95 " << stats.p95_ms << " ms, mean " << stats.mean_ms << " ms, "
            << stats.per_sample_ms << " ms/sample\n";
  if (stats.jitter_warning) std::cout << "warning: p95/median > 2, timings are noisy\n";
  std::cout << "\n" << rep.text;
  return 0;
}

struct ExploreArgs {
  std::uint64_t seed = 0;
  int generations = 5, population = 8, proxy_epochs = 5;
  double data_fraction = 0.25;
  std::string out;
};

int run_explore(const ExploreArgs& a) {
  SearchConfig cfg;
  cfg.seed = a.seed;
  cfg.generations = a.generations;
  cfg.population = a.population;
  ProxyConfig proxy;
  proxy.seed = a.seed;
  proxy.epochs = a.proxy_epochs;
  proxy.data_fraction = a.data_fraction;
  const auto state = search(default_seed_population(), cfg, make_proxy_evaluator(proxy), [](const SearchState& s) {
    const auto& g = s.summaries.back();
    std::cout << "generation " << g.generation << " best score " << g.best_score << (g.stagnant ? " (stagnant)" : "")
              << std::endl;
  });
  write_run(state, a.out);
  std::cout << "best: acc " << state.best_so_far.accuracy << "%, params " << state.best_so_far.params << ", FLOPs "
            << state.best_so_far.flops << ", score " << state.best_so_far.score << "\nrun written to " << a.out << "\n";
  return 0;
}

struct ServeArgs {
  std::string checkpoint, store = "inspect-store", host = "0.0.0.0";
  int port = 8080;
};

HttpFrontend* g_frontend = nullptr;

int run_serve(ServeArgs a) {
  if (const char* env = std::getenv("INSPECT_STORE"); env && *env) a.store = env;
  std::optional<Checkpoint> model;
  if (!a.checkpoint.empty()) model = load_checkpoint(a.checkpoint);
  InspectService svc(a.store, std::move(model));
  HttpFrontend http(svc);
  const int port = http.bind(a.host, a.port);
  g_frontend = &http;
  std::signal(SIGINT, [](int) {
    if (g_frontend) g_frontend->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_frontend) g_frontend->stop();
  });
  std::cout << "serving " << a.store << " on " << a.host << ":" << port
            << (svc.model_loaded() ? "" : " (no model loaded, /inspect returns 503)") << std::endl;
  http.run();
  g_frontend = nullptr;
  return 0;
}

struct GraphArgs {
  std::string graph, out;
};

int run_graph(const GraphArgs& a) {
  const ArchGraph g = a.graph.empty() ? build_reference_config() : load_graph(a.graph);
  g.require_valid();
  const auto f = indicator_feasible(g);
  std::cout << "version " << g.version << "\nnodes " << g.size() << "\nparams " << count_params(g) << "\nFLOPs "
            << count_flops(g, g.input_height(), g.input_width()) << "\nfeasible " << (f.feasible ? "yes" : "no")
            << "\n";
  for (const auto& v : f.violations) std::cout << "  violation (" << v.constraint << "): " << v.message << "\n";
  if (!a.out.empty()) save_graph(g, a.out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vqi: compact defect-inspection toolkit"};
  app.require_subcommand(1);

  GendataArgs gd;
  auto* c_gen = app.add_subcommand("gendata", "Write a synthetic plate dataset as PNGs plus manifest.csv");
  c_gen->add_option("--seed", gd.seed, "Generator seed")->required();
  c_gen->add_option("--out", gd.out, "Output directory")->required();
  c_gen->add_option("--defective", gd.defective, "Defective plates")->capture_default_str();
  c_gen->add_option("--clean", gd.clean, "Clean plates")->capture_default_str();
  c_gen->add_flag("--no-split", gd.no_split, "Skip the 25/75 train/test split");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a graph and write a checkpoint");
  c_train->add_option("--config", tr.config, "TrainConfig JSON (defaults when omitted)")->check(CLI::ExistingFile);
  c_train->add_option("--data", tr.data, "PNG directory (synthetic data when omitted)")->check(CLI::ExistingDirectory);
  c_train->add_option("--data-seed", tr.data_seed, "Seed for synthetic data")->capture_default_str();
  c_train->add_option("--graph", tr.graph, "Architecture graph JSON (reference config when omitted)")
      ->check(CLI::ExistingFile);
  c_train->add_option("--epochs", tr.epochs, "Override the configured epoch count");
  c_train->add_option("--out", tr.out, "Checkpoint path (*.vqic) or output directory")->required();

  BenchArgs be;
  auto* c_bench = app.add_subcommand("bench", "Measure latency and emit the comparison table");
  c_bench->add_option("--checkpoint", be.checkpoint, "Checkpoint file")->check(CLI::ExistingFile);
  c_bench->add_option("--batch", be.batch, "Batch size")->capture_default_str();
  c_bench->add_option("--iters", be.iters, "Timed iterations")->capture_default_str();
  c_bench->add_option("--warmup", be.warmup, "Warm-up iterations")->capture_default_str();
  c_bench->add_option("--accuracy", be.accuracy, "Accuracy for the measured row (from checkpoint when omitted)");
  c_bench->add_option("--name", be.name, "Model name for the measured row")->capture_default_str();
  c_bench->add_option("--emit", be.emit, "Output format")->check(CLI::IsMember({"table", "csv"}))->capture_default_str();
  c_bench->add_flag("--published", be.published, "Emit the published rows only");

  ExploreArgs ex;
  auto* c_explore = app.add_subcommand("explore", "Run the constrained architecture search");
  c_explore->add_option("--seed", ex.seed, "Search seed")->required();
  c_explore->add_option("--generations", ex.generations, "Generations")->capture_default_str();
  c_explore->add_option("--population", ex.population, "Population size")->capture_default_str();
  c_explore->add_option("--proxy-epochs", ex.proxy_epochs, "Proxy training epochs")->capture_default_str();
  c_explore->add_option("--data-fraction", ex.data_fraction, "Proxy data fraction")->capture_default_str();
  c_explore->add_option("--out", ex.out, "Run directory")->required();

  ServeArgs sv;
  auto* c_serve = app.add_subcommand("serve", "Run the inspection HTTP service");
  c_serve->add_option("--checkpoint", sv.checkpoint, "Checkpoint file")->check(CLI::ExistingFile);
  c_serve->add_option("--store", sv.store, "Store directory (INSPECT_STORE overrides)")->capture_default_str();
  c_serve->add_option("--host", sv.host, "Bind address")->capture_default_str();
  c_serve->add_option("--port", sv.port, "Port (0 picks a free port)")->capture_default_str();

  GraphArgs gr;
  auto* c_graph = app.add_subcommand("graph", "Print params, FLOPs and feasibility of a graph");
  c_graph->add_option("--graph", gr.graph, "Graph JSON (reference config when omitted)")->check(CLI::ExistingFile);
  c_graph->add_option("--out", gr.out, "Write the graph JSON here");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*c_gen) return run_gendata(gd);
    if (*c_train) return run_train(tr);
    if (*c_bench) return run_bench(be);
    if (*c_explore) return run_explore(ex);
    if (*c_serve) return run_serve(sv);
    if (*c_graph) return run_graph(gr);
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
