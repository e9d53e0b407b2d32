#include "vqi/profiler.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace vqi {

void BenchRow::validate() const {
  if (model_name.empty()) throw std::invalid_argument("BenchRow: empty model name");
  for (double v : {accuracy_pct, params_m, flops_m, latency_ms}) {
    if (!(v > 0) || !std::isfinite(v)) throw std::invalid_argument("BenchRow " + model_name + ": numeric fields must be > 0");
  }
}

LatencyStats summarize_latency(std::vector<double> batch_ms, int batch_size) {
  if (batch_ms.size() < 3) throw std::invalid_argument("summarize_latency: need at least 3 timed iterations");
  if (batch_size < 1) throw std::invalid_argument("summarize_latency: batch_size must be >= 1");
  std::sort(batch_ms.begin(), batch_ms.end());
  const std::size_t n = batch_ms.size();
  LatencyStats s;
  s.batch_size = batch_size;
  s.iterations = static_cast<int>(n);
  s.median_ms = n % 2 ? batch_ms[n / 2] : 0.5 * (batch_ms[n / 2 - 1] + batch_ms[n / 2]);
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  s.p95_ms = batch_ms[std::max<std::size_t>(rank, 1) - 1];
  s.mean_ms = std::accumulate(batch_ms.begin(), batch_ms.end(), 0.0) / static_cast<double>(n);
  s.per_sample_ms = s.median_ms / batch_size;
  s.jitter_warning = s.median_ms > 0 && s.p95_ms / s.median_ms > 2.0;
  return s;
}

LatencyStats benchmark_latency(const ArchGraph& graph, const ModelParams<float>& params, int batch_size,
                               int warmup_iters, int timed_iters) {
  if (timed_iters < 3) throw std::invalid_argument("benchmark_latency: timed_iters must be >= 3");
  if (batch_size < 1 || warmup_iters < 0) throw std::invalid_argument("benchmark_latency: bad batch or warmup");
  graph.require_valid();
  Tensor<float> x({static_cast<std::size_t>(batch_size), static_cast<std::size_t>(graph.input_channels()),
                   static_cast<std::size_t>(graph.input_height()), static_cast<std::size_t>(graph.input_width())});
  std::mt19937_64 rng(7);
  for (auto& v : x.values()) v = static_cast<float>(rng() >> 40) / static_cast<float>(1 << 24);
  for (int i = 0; i < warmup_iters; ++i) forward(graph, params, x);
  std::vector<double> times;
  times.reserve(static_cast<std::size_t>(timed_iters));
  for (int i = 0; i < timed_iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    forward(graph, params, x);
    times.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  return summarize_latency(std::move(times), batch_size);
}

double speedup(double baseline_ms, double subject_ms) {
  if (!(subject_ms > 0)) throw std::invalid_argument("speedup: subject must be > 0");
  if (!(baseline_ms > 0)) throw std::invalid_argument("speedup: baseline must be > 0");
  return baseline_ms / subject_ms;
}

double shrink_ratio(double baseline, double subject) {
  if (!(subject > 0)) throw std::invalid_argument("shrink_ratio: subject must be > 0");
  if (!(baseline > 0)) throw std::invalid_argument("shrink_ratio: baseline must be > 0");
  return baseline / subject;
}

std::string format_ratio(double ratio) {
  char buf[32];
  if (std::round(ratio * 10) / 10 >= 10.0) {
    std::snprintf(buf, sizeof buf, "~%.0f×", ratio);
  } else {
    std::snprintf(buf, sizeof buf, "%.1f×", ratio);
  }
  return buf;
}

std::string format_number(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw std::runtime_error("format_number: conversion failed");
  return std::string(buf, end);
}

namespace {

std::string accuracy_text(double v) {
  std::string s = format_number(v);
  if (s.find_first_of(".e") == std::string::npos) s += ".0";
  return s;
}

double parse_double(const std::string& s, const std::string& what) {
  double v = 0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e) throw std::invalid_argument("rows_from_csv: bad " + what + " '" + s + "'");
  return v;
}

std::string pad(const std::string& s, std::size_t w, bool left) {
  if (s.size() >= w) return s;
  return left ? s + std::string(w - s.size(), ' ') : std::string(w - s.size(), ' ') + s;
}

}  // namespace

std::string rows_to_csv(const std::vector<BenchRow>& rows) {
  std::string out = "model,accuracy_pct,params_m,flops_m,latency_ms\n";
  for (const auto& r : rows) {
    if (r.model_name.find_first_of(",\n\"") != std::string::npos) {
      throw std::invalid_argument("rows_to_csv: model name may not contain commas, quotes or newlines");
    }
    out += r.model_name + "," + format_number(r.accuracy_pct) + "," + format_number(r.params_m) + "," +
           format_number(r.flops_m) + "," + format_number(r.latency_ms) + "\n";
  }
  return out;
}

std::vector<BenchRow> rows_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) return {};
  std::vector<BenchRow> rows;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 5) throw std::invalid_argument("rows_from_csv: expected 5 fields in '" + line + "'");
    BenchRow r{f[0], parse_double(f[1], "accuracy"), parse_double(f[2], "params"), parse_double(f[3], "flops"),
               parse_double(f[4], "latency")};
    r.validate();
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<BenchRow> load_rows(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_rows: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return rows_from_csv(ss.str());
}

TableReport emit_table(const std::vector<BenchRow>& rows) {
  if (rows.empty()) throw std::invalid_argument("emit_table: need at least one row");
  for (const auto& r : rows) r.validate();

  // best per column: highest accuracy, lowest everything else
  double best[4] = {rows[0].accuracy_pct, rows[0].params_m, rows[0].flops_m, rows[0].latency_ms};
  for (const auto& r : rows) {
    best[0] = std::max(best[0], r.accuracy_pct);
    best[1] = std::min(best[1], r.params_m);
    best[2] = std::min(best[2], r.flops_m);
    best[3] = std::min(best[3], r.latency_ms);
  }

  const std::vector<std::string> header = {"Model", "Acc(%)", "Param(M)", "FLOPs(M)", "Inf.Speed(ms)"};
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) {
    const double vals[4] = {r.accuracy_pct, r.params_m, r.flops_m, r.latency_ms};
    std::vector<std::string> line = {r.model_name};
    for (int c = 0; c < 4; ++c) {
      std::string s = c == 0 ? accuracy_text(vals[c]) : format_number(vals[c]);
      if (vals[c] == best[c]) s = "**" + s + "**";
      line.push_back(s);
    }
    cells.push_back(std::move(line));
  }
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = header[c].size();
    for (const auto& line : cells) width[c] = std::max(width[c], line[c].size());
  }
  auto render = [&](const std::vector<std::string>& line) {
    std::string s;
    for (std::size_t c = 0; c < line.size(); ++c) {
      if (c) s += "  ";
      s += pad(line[c], width[c], c == 0);
    }
    while (!s.empty() && s.back() == ' ') s.pop_back();
    return s + "\n";
  };
  TableReport rep;
  rep.text = render(header);
  std::size_t total = 0;
  for (auto w : width) total += w;
  rep.text += std::string(total + 2 * (width.size() - 1), '-') + "\n";
  for (const auto& line : cells) rep.text += render(line);

  if (rows.size() > 1) {
    const BenchRow& s = rows.back();
    rep.text += "\n";
    for (std::size_t i = 0; i + 1 < rows.size(); ++i) {
      const BenchRow& b = rows[i];
      rep.text += s.model_name + " vs " + b.model_name + ": params " + format_ratio(shrink_ratio(b.params_m, s.params_m)) +
                  " smaller, FLOPs " + format_ratio(shrink_ratio(b.flops_m, s.flops_m)) + " fewer, " +
                  format_ratio(speedup(b.latency_ms, s.latency_ms)) + " faster\n";
    }
  }
  rep.csv = rows_to_csv(rows);
  return rep;
}

std::vector<BenchRow> published_rows() {
  return {
      {"ResNet-50", 92.8, 25.6, 8200, 83},
      {"EfficientNet-B0", 98.0, 5.3, 780, 88},
      {"MnasNet", 89.4, 3.9, 630, 89},
      {"MobileNetV3 (Large)", 97.8, 5.4, 438, 56},
      {"LightDefectNet", 98.2, 0.77, 93, 10},
  };
}

}  // namespace vqi
