#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aesb/image.hpp"
#include "aesb/tensor.hpp"

namespace aesb {

inline constexpr int kMinScore = 2;
inline constexpr int kMaxScore = 9;
inline constexpr int kClassCount = kMaxScore - kMinScore + 1;

inline int score_to_class(int score) { return score - kMinScore; }
inline int class_to_score(int cls) { return cls + kMinScore; }

enum class Split { train, val, test };
std::string to_string(Split s);

struct PreprocessSpec {
  Index resolution = 192;
  /// Optional per-channel standardization applied after scaling to [0,1].
  std::optional<std::array<double, 3>> mean;
  std::optional<std::array<double, 3>> stddev;
};

struct Sample {
  std::string id;    // path as written in the labels file
  int score = 0;     // 2..9, or 0 for unlabeled images
  VectorX<float> pixels;  // 3 x R x R, channel-major
};

struct LabeledDataset {
  std::vector<Sample> entries;
  Split split = Split::train;
  Index resolution = 0;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
  std::array<std::size_t, kClassCount> class_counts() const;

  /// Throws DataError when a score is out of range or ids repeat.
  void validate() const;
};

struct LabelRow {
  std::string path;
  int score = 0;
};

/// Labels file: header `path,score`, then one `path,score` row per image.
std::vector<LabelRow> read_labels(const std::string& labels_file);
void write_labels(const std::string& labels_file, std::span<const LabelRow> rows);

/// Squashes to R x R (aspect ratio ignored) and applies the optional
/// standardization. Result is channel-major, R*R values per channel.
VectorX<float> preprocess(const RgbImage& image, const PreprocessSpec& spec);

/// Entries sorted by id. Image paths are resolved relative to images_dir.
LabeledDataset load_dataset(const std::string& images_dir, const std::string& labels_file,
                            const PreprocessSpec& spec);

/// Every PNG/JPEG file directly inside `images_dir`, sorted by file name,
/// with score 0.
std::vector<Sample> load_images(const std::string& images_dir, const PreprocessSpec& spec);

/// Stacks the selected samples into an N x 3 x R x R batch.
Tensor<float> make_batch(std::span<const Sample> samples, std::span<const std::size_t> indices,
                         Index resolution);
Tensor<float> make_batch(std::span<const Sample> samples, Index resolution);

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct DatasetSplits {
  LabeledDataset train, val, test;
};

/// Stratified split: within each class the ids are shuffled with `seed`, then
/// floor(n*val) go to val, floor(n*test) to test, the rest to train.
DatasetSplits split(const LabeledDataset& data, const SplitFractions& fractions,
                    std::uint64_t seed);

struct SynthSpec {
  std::size_t count = 200;
  Index resolution = 192;
  std::uint64_t seed = 0;
  /// Score -> fraction of `count`. Listed classes get round-half-up(f*count)
  /// samples; the remainder is spread evenly over unlisted classes, extra
  /// samples going to the lowest scores first.
  std::map<int, double> imbalance;
};

/// Per-class sample counts implied by a SynthSpec.
std::array<std::size_t, kClassCount> synth_class_counts(const SynthSpec& spec);

struct SynthImage {
  std::string id;
  int score = 0;
  RgbImage image;  // 8-bit levels (k/255)
};

/// Renders composition images: a warm-tinted disc placed in one of the
/// eight outer cells of a 3x3 grid (the cell determines the score) and a
/// cool-tinted distractor disc in another cell. Position, radius,
/// brightness, background and pixel noise are jittered per image.
std::vector<SynthImage> synthesize_images(const SynthSpec& spec);

/// Synthesized images run through `preprocess` at the spec's resolution.
LabeledDataset synthesize(const SynthSpec& spec);

/// Writes images as PNG plus `labels.csv` into `dir`.
void write_synthetic(std::span<const SynthImage> images, const std::string& dir);

}  // namespace aesb
