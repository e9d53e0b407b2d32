#include "vqi/service.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <fstream>

#include "json.hpp"
#include "vqi/png_io.hpp"

namespace vqi {

using nlohmann::ordered_json;

std::string_view to_string(Verdict v) { return v == Verdict::Defective ? "defective" : "non_defective"; }

Verdict verdict_from_string(std::string_view s) {
  if (s == "defective") return Verdict::Defective;
  if (s == "non_defective") return Verdict::NonDefective;
  throw ServiceError(ServiceError::Kind::BadRequest, "unknown verdict '" + std::string(s) + "'");
}

int ServiceError::http_status() const {
  switch (kind) {
    case Kind::BadRequest: return 400;
    case Kind::NotFound: return 404;
    case Kind::Conflict: return 409;
    case Kind::Unavailable: return 503;
  }
  return 500;
}

std::string InspectionRecord::to_json() const {
  ordered_json j;
  j["id"] = id;
  j["timestamp"] = timestamp;
  j["image_ref"] = image_ref;
  j["verdict"] = to_string(verdict);
  j["confidence"] = confidence;
  j["latency_ms"] = latency_ms;
  if (review) {
    j["review"] = {{"inspector_verdict", to_string(review->inspector_verdict)},
                   {"reviewer_id", review->reviewer_id},
                   {"review_timestamp", review->review_timestamp}};
  } else {
    j["review"] = nullptr;
  }
  return j.dump();
}

InspectionRecord InspectionRecord::from_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  InspectionRecord r;
  r.id = j.at("id").get<std::uint64_t>();
  r.timestamp = j.at("timestamp").get<std::int64_t>();
  r.image_ref = j.at("image_ref").get<std::string>();
  r.verdict = verdict_from_string(j.at("verdict").get<std::string>());
  r.confidence = j.at("confidence").get<double>();
  r.latency_ms = j.at("latency_ms").get<double>();
  if (j.contains("review") && !j["review"].is_null()) {
    const auto& rv = j["review"];
    r.review = Review{verdict_from_string(rv.at("inspector_verdict").get<std::string>()),
                      rv.at("reviewer_id").get<std::string>(), rv.at("review_timestamp").get<std::int64_t>()};
  }
  return r;
}

std::string_view to_string(LightState::Color c) { return c == LightState::Color::Red ? "red" : "green"; }

std::string LightState::to_json() const {
  ordered_json j;
  j["color"] = to_string(color);
  j["since"] = since;
  return j.dump();
}

std::string ServiceStats::to_json() const {
  ordered_json j;
  j["total"] = total;
  j["reviewed"] = reviewed;
  j["unreviewed"] = unreviewed;
  j["defective"] = defective;
  j["overrides"] = overrides;
  j["mean_latency_ms"] = mean_latency_ms;
  j["override_rate"] = override_rate;
  return j.dump();
}

QueueFilter queue_filter_from_string(std::string_view s) {
  if (s.empty() || s == "unreviewed") return QueueFilter::Unreviewed;
  if (s == "all") return QueueFilter::All;
  throw ServiceError(ServiceError::Kind::BadRequest, "filter must be 'unreviewed' or 'all'");
}

std::string QueuePage::to_json() const {
  ordered_json j;
  j["filter"] = filter == QueueFilter::All ? "all" : "unreviewed";
  j["page"] = page;
  j["page_size"] = page_size;
  j["total"] = total;
  j["records"] = ordered_json::array();
  for (const auto& r : records) j["records"].push_back(ordered_json::parse(r.to_json()));
  return j.dump();
}

std::int64_t utc_now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

InspectService::InspectService(std::filesystem::path store, std::optional<Checkpoint> model, Clock clock)
    : store_(std::move(store)), model_(std::move(model)), clock_(std::move(clock)) {
  if (model_) {
    model_->graph.require_valid();
    model_->params.check_against(model_->graph);
  }
  std::filesystem::create_directories(store_ / "images");
  replay();
}

void InspectService::replay() {
  const auto path = store_ / "records.jsonl";
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path, std::ios::binary);
  std::uintmax_t good_end = 0, pos = 0;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    const bool complete = !in.eof();
    pos += line.size() + (complete ? 1 : 0);
    if (line.empty()) {
      good_end = pos;
      continue;
    }
    InspectionRecord r;
    try {
      r = InspectionRecord::from_json(line);
    } catch (const std::exception& e) {
      // a torn final line from a crash mid-append carries no acknowledged verdict
      if (in.peek() == std::char_traits<char>::eof()) {
        in.close();
        std::filesystem::resize_file(path, good_end);
        return;
      }
      throw std::runtime_error("records.jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
    good_end = pos;
    apply(r, r.review ? r.review->review_timestamp : r.timestamp);
  }
}

void InspectService::apply(const InspectionRecord& r, std::int64_t event_time) {
  records_[r.id] = r;
  if (r.review) {
    unreviewed_.erase(r.id);
  } else {
    unreviewed_.insert(r.id);
  }
  next_id_ = std::max(next_id_, r.id + 1);
  auto color = LightState::Color::Green;
  if (!unreviewed_.empty() && records_.at(*unreviewed_.rbegin()).verdict == Verdict::Defective) {
    color = LightState::Color::Red;
  }
  if (color != light_.color) light_ = {color, event_time};
}

void InspectService::append_line(const std::filesystem::path& file, const std::string& line) {
  const int fd = ::open(file.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (fd < 0) throw std::runtime_error("cannot open " + file.string());
  const std::string data = line + "\n";
  std::size_t off = 0;
  while (off < data.size()) {
    const auto n = ::write(fd, data.data() + off, data.size() - off);
    if (n <= 0) {
      ::close(fd);
      throw std::runtime_error("write failed on " + file.string());
    }
    off += static_cast<std::size_t>(n);
  }
  ::fsync(fd);
  ::close(fd);
}

InspectionRecord InspectService::inspect(const std::uint8_t* png, std::size_t size) {
  if (!model_) throw ServiceError(ServiceError::Kind::Unavailable, "model not loaded");
  const auto t0 = std::chrono::steady_clock::now();
  GrayImage img;
  try {
    img = decode_png(png, size);
  } catch (const ImageError& e) {
    throw ServiceError(ServiceError::Kind::BadRequest, e.what());
  }
  const int h = model_->graph.input_height(), w = model_->graph.input_width();
  if (img.width != w || img.height != h) {
    throw ServiceError(ServiceError::Kind::BadRequest, "expected " + std::to_string(w) + "x" + std::to_string(h) +
                                                           " image, got " + std::to_string(img.width) + "x" +
                                                           std::to_string(img.height));
  }
  const auto px = to_unit(img);
  Tensor<float> x({1, 1, static_cast<std::size_t>(h), static_cast<std::size_t>(w)}, px);
  const auto out = forward(model_->graph, model_->params, x);
  const double p_ok = out.p_agg[0], p_ng = out.p_agg[1];
  const double latency = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

  std::lock_guard lock(mu_);
  InspectionRecord r;
  r.id = next_id_;
  r.timestamp = clock_();
  char name[40];
  std::snprintf(name, sizeof name, "images/%08llu.png", static_cast<unsigned long long>(r.id));
  r.image_ref = name;
  r.verdict = p_ng > p_ok ? Verdict::Defective : Verdict::NonDefective;
  r.confidence = std::max(p_ok, p_ng);
  r.latency_ms = latency;
  {
    std::ofstream img_out(store_ / r.image_ref, std::ios::binary);
    img_out.write(reinterpret_cast<const char*>(png), static_cast<std::streamsize>(size));
    if (!img_out) throw std::runtime_error("cannot store image " + r.image_ref);
  }
  append_line(store_ / "records.jsonl", r.to_json());
  apply(r, r.timestamp);
  return r;
}

InspectionRecord InspectService::review(std::uint64_t id, Verdict inspector_verdict, const std::string& reviewer_id) {
  if (reviewer_id.empty()) throw ServiceError(ServiceError::Kind::BadRequest, "reviewer id is required");
  std::lock_guard lock(mu_);
  auto it = records_.find(id);
  if (it == records_.end()) throw ServiceError(ServiceError::Kind::NotFound, "record " + std::to_string(id) + " not found");
  if (it->second.review) {
    throw ServiceError(ServiceError::Kind::Conflict, "record " + std::to_string(id) + " is already reviewed");
  }
  InspectionRecord r = it->second;
  r.review = Review{inspector_verdict, reviewer_id, clock_()};
  append_line(store_ / "records.jsonl", r.to_json());
  ordered_json label;
  label["id"] = r.id;
  label["image_ref"] = r.image_ref;
  label["label"] = to_string(inspector_verdict);
  label["model_verdict"] = to_string(r.verdict);
  label["reviewer_id"] = reviewer_id;
  label["review_timestamp"] = r.review->review_timestamp;
  append_line(store_ / "labels.jsonl", label.dump());
  apply(r, r.review->review_timestamp);
  return r;
}

QueuePage InspectService::queue(QueueFilter filter, int page, int page_size) const {
  if (page < 1) throw ServiceError(ServiceError::Kind::BadRequest, "page must be >= 1");
  if (page_size < 1) throw ServiceError(ServiceError::Kind::BadRequest, "page size must be >= 1");
  std::lock_guard lock(mu_);
  QueuePage q;
  q.filter = filter;
  q.page = page;
  q.page_size = page_size;
  const std::size_t first = static_cast<std::size_t>(page - 1) * static_cast<std::size_t>(page_size);
  for (const auto& [id, r] : records_) {
    if (filter == QueueFilter::Unreviewed && r.review) continue;
    if (q.total >= first && q.records.size() < static_cast<std::size_t>(page_size)) q.records.push_back(r);
    ++q.total;
  }
  return q;
}

ServiceStats InspectService::stats() const {
  std::lock_guard lock(mu_);
  ServiceStats s;
  double latency = 0;
  for (const auto& [id, r] : records_) {
    ++s.total;
    latency += r.latency_ms;
    if (r.verdict == Verdict::Defective) ++s.defective;
    if (r.review) {
      ++s.reviewed;
      if (r.overridden()) ++s.overrides;
    }
  }
  s.unreviewed = s.total - s.reviewed;
  s.mean_latency_ms = s.total ? latency / static_cast<double>(s.total) : 0.0;
  s.override_rate = s.reviewed ? static_cast<double>(s.overrides) / static_cast<double>(s.reviewed) : 0.0;
  return s;
}

LightState InspectService::light() const {
  std::lock_guard lock(mu_);
  return light_;
}

std::vector<InspectionRecord> InspectService::records() const {
  std::lock_guard lock(mu_);
  std::vector<InspectionRecord> out;
  for (const auto& [id, r] : records_) out.push_back(r);
  return out;
}

InspectionRecord InspectService::record(std::uint64_t id) const {
  std::lock_guard lock(mu_);
  auto it = records_.find(id);
  if (it == records_.end()) throw ServiceError(ServiceError::Kind::NotFound, "record " + std::to_string(id) + " not found");
  return it->second;
}

}  // namespace vqi
