#pragma once

// Synthetic light-guide-plate images, the stratified split and PNG directory I/O.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vqi/tensor.hpp"

namespace vqi {

enum class Label : std::uint8_t { NonDefective = 0, Defective = 1 };
enum class SplitTag : std::uint8_t { None = 0, Train = 1, Test = 2 };

std::string_view to_string(Label l);     // "OK" / "NG"
std::string_view to_string(SplitTag s);  // "none" / "train" / "test"

inline constexpr int kImageSide = 224;

struct Sample {
  std::string id;
  Label label = Label::NonDefective;
  SplitTag split = SplitTag::None;
  std::vector<float> pixels;  // row-major, values in [0,1]

  std::string filename() const { return id + "_" + std::string(to_string(label)) + ".png"; }
  bool operator==(const Sample&) const = default;
};

struct SampleSet {
  int height = kImageSide;
  int width = kImageSide;
  std::vector<Sample> samples;
  std::optional<std::uint64_t> generator_seed;  // nullopt for externally loaded data

  std::size_t size() const { return samples.size(); }
  std::size_t count(Label l) const;
  std::size_t count(SplitTag s) const;
  bool is_split() const;
  bool operator==(const SampleSet&) const = default;
};

enum class DefectKind : std::uint8_t { Scratch, BrightSpot, DarkSpot, Impurity };
std::string_view to_string(DefectKind k);

struct DefectSpec {
  DefectKind kind = DefectKind::Scratch;
  double x = 0, y = 0;   // centre, px
  double length = 0;     // scratch length, px
  double width = 0;      // scratch width, px
  double radius = 0;     // spot radius or impurity cluster radius, px
  double angle = 0;      // radians
  double delta = 0;      // signed intensity change
  std::uint64_t detail_seed = 0;  // impurity speck placement
};

/// Everything that determines one plate image. Clean and defective renders of
/// the same plate share background, lattice and noise.
struct PlateRecipe {
  double base = 0.35;
  double gradient = 0.1;
  double gradient_angle = 0;
  double pitch = 10;
  double dot_radius = 2;
  double dot_intensity = 0.2;
  double lattice_dx = 0, lattice_dy = 0;
  bool staggered = false;
  std::uint64_t noise_seed = 0;
  std::vector<DefectSpec> defects;
};

struct GeneratorConfig {
  int height = kImageSide;
  int width = kImageSide;
  double noise_sigma = 0.01;
  /// Enforce the brightness-threshold difficulty floor when both classes have at least this many samples.
  std::size_t difficulty_check_min = 50;
};

/// Seed for sample `index` of a set generated with `seed`.
std::uint64_t sample_stream(std::uint64_t seed, std::uint64_t index);

PlateRecipe draw_recipe(std::uint64_t stream, bool defective, int height = kImageSide, int width = kImageSide);
/// Renders the plate; with include_defects=false this is the pre-injection clean twin.
std::vector<float> render_plate(const PlateRecipe& recipe, int height, int width, double noise_sigma,
                                bool include_defects = true);

/// Defective samples first (ids 00000..), then clean ones. Unsplit.
SampleSet generate(std::uint64_t seed, std::size_t n_defective = 422, std::size_t n_clean = 400,
                   const GeneratorConfig& cfg = {});

/// Best accuracy of a one-threshold classifier on mean image brightness (either polarity), percent.
double brightness_threshold_accuracy(const SampleSet& set);

/// Stratified seeded split; each class contributes its largest-remainder share of round(f * total) to train.
SampleSet split(SampleSet set, std::uint64_t seed, double train_fraction = 0.25);

/// Label from the second `_`-separated token of the file stem (NG = defective, OK = clean).
Label label_from_filename(const std::string& filename);
/// Id is the first `_`-separated token.
std::string id_from_filename(const std::string& filename);

/// Reads every *.png in `dir` sorted by filename. Applies `manifest.csv` split tags when present.
SampleSet load_directory(const std::filesystem::path& dir);
/// Writes one PNG per sample plus `manifest.csv` (filename,label,split).
void write_directory(const SampleSet& set, const std::filesystem::path& dir);

std::string manifest_csv(const SampleSet& set);

/// Dense batch views used by training.
struct LabeledTensors {
  Tensor<float> inputs;  // (N, 1, H, W)
  std::vector<int> labels;
};

struct TrainTestData {
  LabeledTensors train, test;
};

LabeledTensors to_tensors(const SampleSet& set, SplitTag which);
TrainTestData to_train_test(const SampleSet& set);

}  // namespace vqi
