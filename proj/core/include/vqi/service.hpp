#pragma once

// Inspection records, review queue and status light over an append-only log.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "vqi/model.hpp"

namespace vqi {

enum class Verdict : std::uint8_t { NonDefective = 0, Defective = 1 };
std::string_view to_string(Verdict v);  // "non_defective" / "defective"
Verdict verdict_from_string(std::string_view s);

struct ServiceError : std::runtime_error {
  enum class Kind { BadRequest, NotFound, Conflict, Unavailable };
  Kind kind;
  ServiceError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
  int http_status() const;
};

struct Review {
  Verdict inspector_verdict = Verdict::NonDefective;
  std::string reviewer_id;
  std::int64_t review_timestamp = 0;

  bool operator==(const Review&) const = default;
};

struct InspectionRecord {
  std::uint64_t id = 0;
  std::int64_t timestamp = 0;  // UTC milliseconds
  std::string image_ref;       // relative to the store directory
  Verdict verdict = Verdict::NonDefective;
  double confidence = 0.5;  // max of the aggregated distribution
  double latency_ms = 0;
  std::optional<Review> review;

  bool overridden() const { return review && review->inspector_verdict != verdict; }
  std::string to_json() const;
  static InspectionRecord from_json(const std::string& line);
  bool operator==(const InspectionRecord&) const = default;
};

struct LightState {
  enum class Color : std::uint8_t { Green, Red };
  Color color = Color::Green;
  std::int64_t since = 0;

  std::string to_json() const;
  bool operator==(const LightState&) const = default;
};
std::string_view to_string(LightState::Color c);

struct ServiceStats {
  std::uint64_t total = 0;
  std::uint64_t reviewed = 0;
  std::uint64_t unreviewed = 0;
  std::uint64_t defective = 0;  // model verdicts
  std::uint64_t overrides = 0;
  double mean_latency_ms = 0;
  double override_rate = 0;  // overrides / reviews

  std::string to_json() const;
  bool operator==(const ServiceStats&) const = default;
};

enum class QueueFilter { Unreviewed, All };
QueueFilter queue_filter_from_string(std::string_view s);

inline constexpr int kPageSize = 10;

struct QueuePage {
  QueueFilter filter = QueueFilter::Unreviewed;
  int page = 1;
  int page_size = kPageSize;
  std::size_t total = 0;  // matching records across all pages
  std::vector<InspectionRecord> records;

  std::string to_json() const;
};

using Clock = std::function<std::int64_t()>;
std::int64_t utc_now_ms();

/// Store layout: records.jsonl (one line per inspect or review, the last line
/// for an id wins on replay), images/<id>.png, labels.jsonl (reviewed labels
/// for retraining).
class InspectService {
 public:
  InspectService(std::filesystem::path store, std::optional<Checkpoint> model, Clock clock = utc_now_ms);

  bool model_loaded() const { return model_.has_value(); }
  const std::filesystem::path& store() const { return store_; }

  /// Decodes an 8-bit grayscale PNG of exactly the model's input size and classifies it.
  InspectionRecord inspect(const std::uint8_t* png, std::size_t size);
  InspectionRecord review(std::uint64_t id, Verdict inspector_verdict, const std::string& reviewer_id);

  QueuePage queue(QueueFilter filter, int page, int page_size = kPageSize) const;
  ServiceStats stats() const;
  LightState light() const;
  std::vector<InspectionRecord> records() const;
  /// Throws ServiceError(NotFound) for an unknown id.
  InspectionRecord record(std::uint64_t id) const;

 private:
  void replay();
  void apply(const InspectionRecord& r, std::int64_t event_time);
  void append_line(const std::filesystem::path& file, const std::string& line);

  std::filesystem::path store_;
  std::optional<Checkpoint> model_;
  Clock clock_;

  mutable std::mutex mu_;
  std::map<std::uint64_t, InspectionRecord> records_;
  std::set<std::uint64_t> unreviewed_;
  std::uint64_t next_id_ = 1;
  LightState light_;
};

}  // namespace vqi
