#pragma once

// Latency measurement and comparison tables in the layout of the published results.

#include <cstdint>
#include <string>
#include <vector>

#include "vqi/graph.hpp"
#include "vqi/model.hpp"

namespace vqi {

struct BenchRow {
  std::string model_name;
  double accuracy_pct = 0;
  double params_m = 0;
  double flops_m = 0;
  double latency_ms = 0;  // per sample

  void validate() const;
  bool operator==(const BenchRow&) const = default;
};

struct LatencyStats {
  int batch_size = 0;
  int iterations = 0;
  double median_ms = 0;  // per batch
  double p95_ms = 0;
  double mean_ms = 0;
  double per_sample_ms = 0;  // median / batch_size
  bool jitter_warning = false;  // p95 / median > 2
};

/// Pure statistics over per-batch wall times. Rejects fewer than 3 samples.
LatencyStats summarize_latency(std::vector<double> batch_ms, int batch_size);

/// Times forward passes on a fixed pseudo-random batch with frozen weights.
LatencyStats benchmark_latency(const ArchGraph& graph, const ModelParams<float>& params, int batch_size = 10,
                               int warmup_iters = 10, int timed_iters = 100);

/// baseline / subject; both must be positive.
double speedup(double baseline_ms, double subject_ms);
double shrink_ratio(double baseline, double subject);
/// Ratios of 10 and above as "~33×", smaller ones to one decimal as "8.8×".
std::string format_ratio(double ratio);

/// Shortest decimal text that parses back to the same double.
std::string format_number(double v);

struct TableReport {
  std::string text;  // aligned, best value per column wrapped in **...**
  std::string csv;
};

/// Ratios are given for the last row against every other row (omitted for a single row).
TableReport emit_table(const std::vector<BenchRow>& rows);

std::string rows_to_csv(const std::vector<BenchRow>& rows);
std::vector<BenchRow> rows_from_csv(const std::string& text);
std::vector<BenchRow> load_rows(const std::string& path);

/// Published comparison rows, in table order.
std::vector<BenchRow> published_rows();

}  // namespace vqi
