#include "vqi/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "rng.hpp"
#include "vqi/png_io.hpp"

namespace vqi {

namespace fs = std::filesystem;
using detail::uniform;

std::string_view to_string(Label l) { return l == Label::Defective ? "NG" : "OK"; }

std::string_view to_string(SplitTag s) {
  switch (s) {
    case SplitTag::Train: return "train";
    case SplitTag::Test: return "test";
    default: return "none";
  }
}

std::string_view to_string(DefectKind k) {
  switch (k) {
    case DefectKind::Scratch: return "scratch";
    case DefectKind::BrightSpot: return "bright_spot";
    case DefectKind::DarkSpot: return "dark_spot";
    case DefectKind::Impurity: return "impurity";
  }
  return "?";
}

std::size_t SampleSet::count(Label l) const {
  return static_cast<std::size_t>(std::count_if(samples.begin(), samples.end(), [&](const Sample& s) { return s.label == l; }));
}

std::size_t SampleSet::count(SplitTag t) const {
  return static_cast<std::size_t>(std::count_if(samples.begin(), samples.end(), [&](const Sample& s) { return s.split == t; }));
}

bool SampleSet::is_split() const {
  return std::any_of(samples.begin(), samples.end(), [](const Sample& s) { return s.split != SplitTag::None; });
}

std::uint64_t sample_stream(std::uint64_t seed, std::uint64_t index) { return detail::mix(seed, index); }

PlateRecipe draw_recipe(std::uint64_t stream, bool defective, int height, int width) {
  std::mt19937_64 rng(stream);
  PlateRecipe r;
  r.base = uniform(rng, 0.25, 0.45);
  r.gradient = uniform(rng, 0.0, 0.045);
  r.gradient_angle = uniform(rng, 0.0, 2 * std::numbers::pi);
  r.pitch = uniform(rng, 6.0, 14.0);
  r.dot_radius = std::min(uniform(rng, 1.0, 3.0), 0.4 * r.pitch);
  r.dot_intensity = uniform(rng, 0.03, 0.09);
  r.lattice_dx = uniform(rng, 0.0, r.pitch);
  r.lattice_dy = uniform(rng, 0.0, r.pitch);
  r.staggered = (rng() & 1) != 0;
  r.noise_seed = rng();
  if (!defective) return r;

  const int n = 1 + static_cast<int>(detail::below(rng, 3));
  const double margin = 16;
  for (int i = 0; i < n; ++i) {
    DefectSpec d;
    d.kind = static_cast<DefectKind>(detail::below(rng, 4));
    // keep injections apart so opposite-signed defects cannot cancel
    for (int attempt = 0; attempt < 32; ++attempt) {
      d.x = uniform(rng, margin, width - margin);
      d.y = uniform(rng, margin, height - margin);
      const bool clear = std::all_of(r.defects.begin(), r.defects.end(), [&](const DefectSpec& o) {
        return std::hypot(o.x - d.x, o.y - d.y) > 144;
      });
      if (clear) break;
    }
    switch (d.kind) {
      case DefectKind::Scratch:
        d.length = uniform(rng, 90, 240);
        d.width = uniform(rng, 4.5, 9.0);
        d.angle = uniform(rng, 0, std::numbers::pi);
        d.delta = ((rng() & 1) ? 1.0 : -1.0) * uniform(rng, 0.4, 0.8);
        break;
      case DefectKind::BrightSpot:
        d.radius = uniform(rng, 15, 30);
        d.delta = uniform(rng, 0.4, 0.8);
        break;
      case DefectKind::DarkSpot:
        d.radius = uniform(rng, 15, 30);
        d.delta = -uniform(rng, 0.4, 0.7);
        break;
      case DefectKind::Impurity:
        d.radius = uniform(rng, 18, 36);
        d.delta = -uniform(rng, 0.5, 0.8);
        d.detail_seed = rng();
        break;
    }
    r.defects.push_back(d);
  }
  return r;
}

namespace {

double cover(double radius, double dist) { return std::clamp(radius + 0.5 - dist, 0.0, 1.0); }

double segment_distance(double px, double py, const DefectSpec& d) {
  const double hx = 0.5 * d.length * std::cos(d.angle), hy = 0.5 * d.length * std::sin(d.angle);
  const double ax = d.x - hx, ay = d.y - hy;
  const double vx = 2 * hx, vy = 2 * hy;
  const double t = std::clamp(((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy), 0.0, 1.0);
  return std::hypot(px - (ax + t * vx), py - (ay + t * vy));
}

struct Speck {
  double x, y, r;
};

std::vector<Speck> specks_for(const DefectSpec& d) {
  std::mt19937_64 rng(d.detail_seed);
  const int n = 4 + static_cast<int>(detail::below(rng, 4));
  std::vector<Speck> out;
  for (int i = 0; i < n; ++i) {
    const double a = uniform(rng, 0, 2 * std::numbers::pi);
    const double rho = d.radius * std::sqrt(detail::unit(rng));
    out.push_back({d.x + rho * std::cos(a), d.y + rho * std::sin(a), uniform(rng, 6.0, 10.5)});
  }
  return out;
}

}  // namespace

std::vector<float> render_plate(const PlateRecipe& r, int height, int width, double noise_sigma,
                                bool include_defects) {
  if (height <= 0 || width <= 0) throw std::invalid_argument("render_plate: extents must be positive");
  std::vector<double> img(static_cast<std::size_t>(height) * static_cast<std::size_t>(width));
  const double ca = std::cos(r.gradient_angle), sa = std::sin(r.gradient_angle);
  for (int y = 0; y < height; ++y) {
    const double row = std::round((y - r.lattice_dy) / r.pitch);
    for (int x = 0; x < width; ++x) {
      double v = r.base + r.gradient * ((x / double(width) - 0.5) * ca + (y / double(height) - 0.5) * sa);
      double dot = 0;
      for (double j = row - 1; j <= row + 1; ++j) {
        const double cy = r.lattice_dy + j * r.pitch;
        const double ox = r.lattice_dx + ((r.staggered && std::fmod(std::abs(j), 2.0) == 1.0) ? 0.5 * r.pitch : 0.0);
        const double cx = ox + std::round((x - ox) / r.pitch) * r.pitch;
        dot = std::max(dot, cover(r.dot_radius, std::hypot(x - cx, y - cy)));
      }
      img[static_cast<std::size_t>(y) * width + x] = v + r.dot_intensity * dot;
    }
  }
  if (include_defects) {
    for (const auto& d : r.defects) {
      const auto specks = d.kind == DefectKind::Impurity ? specks_for(d) : std::vector<Speck>{};
      const double reach = std::max({d.length, d.radius * 2 + 8, 16.0});
      const int y0 = std::max(0, static_cast<int>(d.y - reach)), y1 = std::min(height - 1, static_cast<int>(d.y + reach));
      const int x0 = std::max(0, static_cast<int>(d.x - reach)), x1 = std::min(width - 1, static_cast<int>(d.x + reach));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          double c = 0;
          switch (d.kind) {
            case DefectKind::Scratch: c = cover(0.5 * d.width, segment_distance(x, y, d)); break;
            case DefectKind::BrightSpot:
            case DefectKind::DarkSpot:
              c = std::clamp((d.radius + 1 - std::hypot(x - d.x, y - d.y)) / 2, 0.0, 1.0);
              break;
            case DefectKind::Impurity:
              for (const auto& s : specks) c = std::max(c, cover(s.r, std::hypot(x - s.x, y - s.y)));
              break;
          }
          img[static_cast<std::size_t>(y) * width + x] += d.delta * c;
        }
      }
    }
  }
  std::vector<float> out(img.size());
  std::mt19937_64 noise(r.noise_seed);
  for (std::size_t i = 0; i < img.size(); ++i) {
    // Box-Muller, one normal per pair of uniforms
    const double u1 = 1.0 - detail::unit(noise), u2 = detail::unit(noise);
    const double z = std::sqrt(-2 * std::log(u1)) * std::cos(2 * std::numbers::pi * u2);
    out[i] = static_cast<float>(std::clamp(img[i] + noise_sigma * z, 0.0, 1.0));
  }
  return out;
}

namespace {

std::string format_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu", i);
  return buf;
}

double mean_of(const std::vector<float>& px) {
  double s = 0;
  for (float v : px) s += v;
  return px.empty() ? 0.0 : s / static_cast<double>(px.size());
}

}  // namespace

SampleSet generate(std::uint64_t seed, std::size_t n_defective, std::size_t n_clean, const GeneratorConfig& cfg) {
  SampleSet set;
  set.height = cfg.height;
  set.width = cfg.width;
  set.generator_seed = seed;
  const std::size_t total = n_defective + n_clean;
  set.samples.reserve(total);
  for (std::size_t i = 0; i < total; ++i) {
    const bool defective = i < n_defective;
    const auto recipe = draw_recipe(sample_stream(seed, i), defective, cfg.height, cfg.width);
    Sample s;
    s.id = format_id(i);
    s.label = defective ? Label::Defective : Label::NonDefective;
    s.pixels = render_plate(recipe, cfg.height, cfg.width, cfg.noise_sigma);
    set.samples.push_back(std::move(s));
  }
  if (n_defective >= cfg.difficulty_check_min && n_clean >= cfg.difficulty_check_min) {
    const double acc = brightness_threshold_accuracy(set);
    if (acc >= 80.0) {
      throw std::runtime_error("generate: brightness-threshold classifier reaches " + std::to_string(acc) +
                               "% (difficulty floor is < 80%)");
    }
  }
  return set;
}

double brightness_threshold_accuracy(const SampleSet& set) {
  if (set.samples.empty()) return 0.0;
  std::vector<std::pair<double, int>> m;
  for (const auto& s : set.samples) m.emplace_back(mean_of(s.pixels), s.label == Label::Defective ? 1 : 0);
  std::sort(m.begin(), m.end());
  const auto n = static_cast<long>(m.size());
  long pos_total = 0;
  for (const auto& e : m) pos_total += e.second;
  // threshold between k-1 and k: predict defective above (or below) it
  long pos_below = 0, best = std::max(pos_total, n - pos_total);
  for (long k = 1; k <= n; ++k) {
    pos_below += m[static_cast<std::size_t>(k - 1)].second;
    if (k < n && m[static_cast<std::size_t>(k)].first == m[static_cast<std::size_t>(k - 1)].first) continue;
    const long neg_below = k - pos_below;
    const long above_rule = neg_below + (pos_total - pos_below);
    best = std::max({best, above_rule, n - above_rule});
  }
  return 100.0 * static_cast<double>(best) / static_cast<double>(n);
}

SampleSet split(SampleSet set, std::uint64_t seed, double train_fraction) {
  if (set.is_split()) throw std::invalid_argument("split: set already carries split tags");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw std::invalid_argument("split: train_fraction must be in (0,1)");
  const Label labels[2] = {Label::Defective, Label::NonDefective};
  std::vector<std::size_t> members[2];
  for (std::size_t i = 0; i < set.samples.size(); ++i) {
    members[set.samples[i].label == Label::Defective ? 0 : 1].push_back(i);
  }
  for (int c = 0; c < 2; ++c) {
    if (members[c].size() < 2) {
      throw std::invalid_argument("split: class " + std::string(to_string(labels[c])) + " has " +
                                  std::to_string(members[c].size()) + " samples (need >= 2)");
    }
  }
  const auto total = static_cast<long>(set.samples.size());
  const long target = std::lround(train_fraction * static_cast<double>(total));
  long quota[2];
  double frac[2];
  for (int c = 0; c < 2; ++c) {
    const double q = train_fraction * static_cast<double>(members[c].size());
    quota[c] = static_cast<long>(std::floor(q));
    frac[c] = q - std::floor(q);
  }
  for (long left = target - quota[0] - quota[1]; left > 0; --left) {
    const int c = frac[1] > frac[0] ? 1 : 0;
    ++quota[c];
    frac[c] = -1;
  }
  for (int c = 0; c < 2; ++c) {
    auto& idx = members[c];
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return set.samples[a].id < set.samples[b].id; });
    std::mt19937_64 rng(detail::mix(seed, static_cast<std::uint64_t>(c) + 1));
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[detail::below(rng, i)]);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      set.samples[idx[i]].split = static_cast<long>(i) < quota[c] ? SplitTag::Train : SplitTag::Test;
    }
  }
  return set;
}

namespace {

std::vector<std::string> tokens(const std::string& filename) {
  const std::string stem = fs::path(filename).stem().string();
  std::vector<std::string> out;
  std::stringstream ss(stem);
  for (std::string t; std::getline(ss, t, '_');) out.push_back(t);
  return out;
}

}  // namespace

Label label_from_filename(const std::string& filename) {
  const auto t = tokens(filename);
  if (t.size() >= 2 && t[1] == "NG") return Label::Defective;
  if (t.size() >= 2 && t[1] == "OK") return Label::NonDefective;
  throw std::invalid_argument("label_from_filename: " + filename + " does not match <id>_<OK|NG>");
}

std::string id_from_filename(const std::string& filename) {
  const auto t = tokens(filename);
  if (t.empty() || t[0].empty()) throw std::invalid_argument("id_from_filename: no id in " + filename);
  return t[0];
}

SampleSet load_directory(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::invalid_argument("load_directory: not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  SampleSet set;
  for (const auto& f : files) {
    const std::string name = f.filename().string();
    const GrayImage img = read_png(f);
    if (img.width != kImageSide || img.height != kImageSide) {
      throw ImageError("load_directory: " + name + " is " + std::to_string(img.width) + "x" +
                       std::to_string(img.height) + ", expected 224x224");
    }
    Sample s;
    s.id = id_from_filename(name);
    s.label = label_from_filename(name);
    s.pixels = to_unit(img);
    set.samples.push_back(std::move(s));
  }
  const fs::path manifest = dir / "manifest.csv";
  if (fs::exists(manifest)) {
    std::ifstream in(manifest);
    std::string line;
    std::getline(in, line);  // header
    std::vector<std::pair<std::string, SplitTag>> tags;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      std::stringstream ss(line);
      std::string file, label, split;
      std::getline(ss, file, ',');
      std::getline(ss, label, ',');
      std::getline(ss, split, ',');
      const SplitTag t = split == "train" ? SplitTag::Train : split == "test" ? SplitTag::Test : SplitTag::None;
      tags.emplace_back(file, t);
    }
    for (auto& s : set.samples) {
      for (const auto& [file, t] : tags) {
        if (id_from_filename(file) == s.id) s.split = t;
      }
    }
  }
  return set;
}

std::string manifest_csv(const SampleSet& set) {
  std::string out = "filename,label,split\n";
  for (const auto& s : set.samples) {
    out += s.filename() + "," + std::string(s.label == Label::Defective ? "defective" : "non_defective") + "," +
           std::string(to_string(s.split)) + "\n";
  }
  return out;
}

void write_directory(const SampleSet& set, const fs::path& dir) {
  fs::create_directories(dir);
  for (const auto& s : set.samples) write_png(dir / s.filename(), to_gray8(s.pixels, set.width, set.height));
  std::ofstream(dir / "manifest.csv") << manifest_csv(set);
}

LabeledTensors to_tensors(const SampleSet& set, SplitTag which) {
  std::vector<const Sample*> picked;
  for (const auto& s : set.samples) {
    if (which == SplitTag::None || s.split == which) picked.push_back(&s);
  }
  const auto h = static_cast<std::size_t>(set.height), w = static_cast<std::size_t>(set.width);
  LabeledTensors out{Tensor<float>({picked.size(), 1, h, w}), {}};
  for (std::size_t i = 0; i < picked.size(); ++i) {
    if (picked[i]->pixels.size() != h * w) {
      throw ShapeError("to_tensors: sample " + picked[i]->id + " has " + std::to_string(picked[i]->pixels.size()) +
                       " pixels, expected " + std::to_string(h * w));
    }
    std::copy(picked[i]->pixels.begin(), picked[i]->pixels.end(), out.inputs.data() + i * h * w);
    out.labels.push_back(picked[i]->label == Label::Defective ? 1 : 0);
  }
  return out;
}

TrainTestData to_train_test(const SampleSet& set) {
  return {to_tensors(set, SplitTag::Train), to_tensors(set, SplitTag::Test)};
}

}  // namespace vqi
