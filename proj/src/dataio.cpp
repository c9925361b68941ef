#include "aesb/dataio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "aesb/seeds.hpp"

namespace fs = std::filesystem;

namespace aesb {

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::array<std::size_t, kClassCount> LabeledDataset::class_counts() const {
  std::array<std::size_t, kClassCount> counts{};
  for (const auto& e : entries) {
    if (e.score >= kMinScore && e.score <= kMaxScore) ++counts[score_to_class(e.score)];
  }
  return counts;
}

void LabeledDataset::validate() const {
  std::set<std::string> seen;
  for (const auto& e : entries) {
    if (e.score < kMinScore || e.score > kMaxScore) {
      throw DataError("sample '" + e.id + "' has score " + std::to_string(e.score) +
                      " outside [2,9]");
    }
    if (!seen.insert(e.id).second) throw DataError("duplicate sample id '" + e.id + "'");
  }
}

namespace {

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

Sample load_sample(const fs::path& path, std::string id, int score, const PreprocessSpec& spec) {
  if (!fs::exists(path)) throw DataError("missing image: " + path.string());
  Sample s;
  s.id = std::move(id);
  s.score = score;
  s.pixels = preprocess(read_image(path.string()), spec);
  return s;
}

}  // namespace

std::vector<LabelRow> read_labels(const std::string& labels_file) {
  std::ifstream in(labels_file);
  if (!in) throw DataError("cannot open labels file: " + labels_file);
  std::vector<LabelRow> rows;
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;
    if (!header_seen) {
      if (line != "path,score") {
        throw FormatError(labels_file + ": row " + std::to_string(line_no) +
                          ": expected header 'path,score'");
      }
      header_seen = true;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos || line.find(',', comma + 1) != std::string::npos) {
      throw FormatError(labels_file + ": row " + std::to_string(line_no) +
                        ": expected exactly two fields 'path,score'");
    }
    LabelRow row;
    row.path = trim(line.substr(0, comma));
    const std::string score_text = trim(line.substr(comma + 1));
    const auto [ptr, ec] =
        std::from_chars(score_text.data(), score_text.data() + score_text.size(), row.score);
    if (row.path.empty() || ec != std::errc() || ptr != score_text.data() + score_text.size()) {
      throw FormatError(labels_file + ": row " + std::to_string(line_no) + ": malformed row '" +
                        line + "'");
    }
    if (row.score < kMinScore || row.score > kMaxScore) {
      throw DataError(labels_file + ": row " + std::to_string(line_no) + ": score " +
                      std::to_string(row.score) + " outside [2,9]");
    }
    rows.push_back(std::move(row));
  }
  if (!header_seen) throw FormatError(labels_file + ": empty labels file (missing header)");
  return rows;
}

void write_labels(const std::string& labels_file, std::span<const LabelRow> rows) {
  std::ofstream out(labels_file);
  if (!out) throw DataError("cannot write labels file: " + labels_file);
  out << "path,score\n";
  for (const auto& r : rows) out << r.path << ',' << r.score << '\n';
}

VectorX<float> preprocess(const RgbImage& image, const PreprocessSpec& spec) {
  if (spec.resolution <= 0) throw ConfigError("preprocess: resolution must be positive");
  const RgbImage resized = resize_bilinear(image, spec.resolution, spec.resolution);
  const Index plane = spec.resolution * spec.resolution;
  VectorX<float> out(3 * plane);
  for (int c = 0; c < 3; ++c) {
    const double mean = spec.mean ? (*spec.mean)[c] : 0.0;
    const double sd = spec.stddev ? (*spec.stddev)[c] : 1.0;
    if (!(sd > 0)) throw ConfigError("preprocess: standard deviation must be positive");
    const auto& p = resized.channels[c];
    for (Index i = 0; i < plane; ++i) out[c * plane + i] = float((p.data()[i] - mean) / sd);
  }
  return out;
}

LabeledDataset load_dataset(const std::string& images_dir, const std::string& labels_file,
                            const PreprocessSpec& spec) {
  std::vector<LabelRow> rows = read_labels(labels_file);
  std::sort(rows.begin(), rows.end(),
            [](const LabelRow& a, const LabelRow& b) { return a.path < b.path; });
  LabeledDataset data;
  data.resolution = spec.resolution;
  data.entries.reserve(rows.size());
  for (const auto& r : rows) {
    data.entries.push_back(load_sample(fs::path(images_dir) / r.path, r.path, r.score, spec));
  }
  data.validate();
  return data;
}

std::vector<Sample> load_images(const std::string& images_dir, const PreprocessSpec& spec) {
  if (!fs::is_directory(images_dir)) throw DataError("not a directory: " + images_dir);
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(images_dir)) {
    if (entry.is_regular_file() && is_image_file(entry.path())) {
      names.push_back(entry.path().filename().string());
    }
  }
  std::sort(names.begin(), names.end());
  std::vector<Sample> out;
  for (const auto& n : names) out.push_back(load_sample(fs::path(images_dir) / n, n, 0, spec));
  return out;
}

Tensor<float> make_batch(std::span<const Sample> samples, std::span<const std::size_t> indices,
                         Index resolution) {
  const Index per_sample = 3 * resolution * resolution;
  Tensor<float> batch({Index(indices.size()), 3, resolution, resolution});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Sample& s = samples[indices[i]];
    if (s.pixels.size() != per_sample) {
      throw ShapeError("sample '" + s.id + "' was preprocessed at a different resolution");
    }
    batch.values().segment(Index(i) * per_sample, per_sample) = s.pixels;
  }
  return batch;
}

Tensor<float> make_batch(std::span<const Sample> samples, Index resolution) {
  std::vector<std::size_t> all(samples.size());
  std::iota(all.begin(), all.end(), 0);
  return make_batch(samples, all, resolution);
}

DatasetSplits split(const LabeledDataset& data, const SplitFractions& f, std::uint64_t seed) {
  if (f.train < 0 || f.val < 0 || f.test < 0 || std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be non-negative and sum to 1");
  }
  std::array<std::vector<std::size_t>, kClassCount> by_class;
  for (std::size_t i = 0; i < data.entries.size(); ++i) {
    by_class[score_to_class(data.entries[i].score)].push_back(i);
  }
  DatasetSplits out;
  out.train.split = Split::train;
  out.val.split = Split::val;
  out.test.split = Split::test;
  for (auto* d : {&out.train, &out.val, &out.test}) d->resolution = data.resolution;

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> train_idx, val_idx, test_idx;
  for (auto& members : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    const auto n = members.size();
    const auto n_val = std::size_t(std::floor(double(n) * f.val));
    const auto n_test = std::size_t(std::floor(double(n) * f.test));
    for (std::size_t k = 0; k < n; ++k) {
      if (k < n_val) {
        val_idx.push_back(members[k]);
      } else if (k < n_val + n_test) {
        test_idx.push_back(members[k]);
      } else {
        train_idx.push_back(members[k]);
      }
    }
  }
  // Entry indices follow id order, so sorting them keeps each split sorted by id.
  auto fill = [&](LabeledDataset& d, std::vector<std::size_t>& idx) {
    std::sort(idx.begin(), idx.end());
    for (auto i : idx) d.entries.push_back(data.entries[i]);
  };
  fill(out.train, train_idx);
  fill(out.val, val_idx);
  fill(out.test, test_idx);
  return out;
}

std::array<std::size_t, kClassCount> synth_class_counts(const SynthSpec& spec) {
  std::array<std::size_t, kClassCount> counts{};
  std::array<bool, kClassCount> fixed{};
  std::size_t assigned = 0;
  for (const auto& [score, fraction] : spec.imbalance) {
    if (score < kMinScore || score > kMaxScore) {
      throw ConfigError("imbalance profile names score " + std::to_string(score) +
                        " outside [2,9]");
    }
    if (!(fraction >= 0 && fraction <= 1)) {
      throw ConfigError("imbalance fraction for score " + std::to_string(score) +
                        " must be in [0,1]");
    }
    const int c = score_to_class(score);
    counts[c] = std::size_t(std::floor(fraction * double(spec.count) + 0.5));
    fixed[c] = true;
    assigned += counts[c];
  }
  if (assigned > spec.count) throw ConfigError("imbalance profile exceeds the sample count");
  const auto free_classes = std::size_t(std::count(fixed.begin(), fixed.end(), false));
  const std::size_t rest = spec.count - assigned;
  if (free_classes == 0) {
    if (rest != 0) throw ConfigError("imbalance profile covers every class but not every sample");
    return counts;
  }
  std::size_t extra = rest % free_classes;
  for (int c = 0; c < kClassCount; ++c) {
    if (fixed[c]) continue;
    counts[c] = rest / free_classes + (extra > 0 ? 1 : 0);
    if (extra > 0) --extra;
  }
  return counts;
}

namespace {

constexpr double kBackgroundLo = 0.20, kBackgroundHi = 0.45;
constexpr double kDiscLo = 0.40, kDiscHi = 0.65;
constexpr double kTint = 0.03;
constexpr double kNoise = 0.20;

// Outer cells of a 3x3 grid in reading order, skipping the center.
constexpr std::array<int, kClassCount> kCells = {0, 1, 2, 3, 5, 6, 7, 8};

// The subject is a warm-tinted disc whose grid cell gives the class. A
// cool-tinted distractor disc of similar brightness sits in another cell,
// so colour as well as brightness has to be learned.
RgbImage render_composition(int cls, Index res, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

  struct Disc {
    double cx, cy, radius, level;
    std::array<double, 3> tint;
  };
  const double third = double(res) / 3.0;
  auto place = [&](int cell, double level, std::array<double, 3> tint) {
    return Disc{(cell % 3 + 0.5) * third + uniform(-0.12, 0.12) * third,
                (cell / 3 + 0.5) * third + uniform(-0.12, 0.12) * third,
                0.3 * third * uniform(0.85, 1.15), level, tint};
  };

  const int cell = kCells[cls];
  int other = int(uniform(0.0, 8.0));
  if (other >= cell) ++other;
  const double bg = uniform(kBackgroundLo, kBackgroundHi);
  const std::array<Disc, 2> discs = {
      place(cell, uniform(kDiscLo, kDiscHi), {kTint, -kTint / 2, -kTint / 2}),
      place(other, uniform(kDiscLo, kDiscHi), {-kTint / 2, -kTint / 2, kTint})};

  RgbImage img(res, res);
  for (Index y = 0; y < res; ++y) {
    for (Index x = 0; x < res; ++x) {
      const double noise = uniform(-kNoise, kNoise);
      std::array<double, 3> v{bg + noise, bg + noise, bg + noise};
      for (const Disc& d : discs) {
        const double dist = std::hypot(double(x) + 0.5 - d.cx, double(y) + 0.5 - d.cy);
        const double cover = std::clamp(d.radius - dist + 0.5, 0.0, 1.0);
        for (int c = 0; c < 3; ++c) v[c] = v[c] * (1.0 - cover) + (d.level + d.tint[c] + noise) * cover;
      }
      for (int c = 0; c < 3; ++c) img.channels[c](y, x) = double(to_byte(v[c])) / 255.0;
    }
  }
  return img;
}

}  // namespace

std::vector<SynthImage> synthesize_images(const SynthSpec& spec) {
  if (spec.resolution < 16) throw ConfigError("synthesize: resolution must be at least 16");
  if (spec.count == 0) throw ConfigError("synthesize: count must be positive");
  const auto counts = synth_class_counts(spec);

  std::vector<int> classes;
  for (int c = 0; c < kClassCount; ++c) classes.insert(classes.end(), counts[c], c);
  std::mt19937_64 order_rng(derive_seed(spec.seed, "order"));
  std::shuffle(classes.begin(), classes.end(), order_rng);

  std::vector<SynthImage> out;
  out.reserve(classes.size());
  for (std::size_t i = 0; i < classes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "synth_%05zu.png", i);
    out.push_back({name, class_to_score(classes[i]),
                   render_composition(classes[i], spec.resolution, derive_seed(spec.seed, i))});
  }
  return out;
}

LabeledDataset synthesize(const SynthSpec& spec) {
  PreprocessSpec pre;
  pre.resolution = spec.resolution;
  LabeledDataset data;
  data.resolution = spec.resolution;
  for (auto& s : synthesize_images(spec)) {
    data.entries.push_back({std::move(s.id), s.score, preprocess(s.image, pre)});
  }
  return data;
}

void write_synthetic(std::span<const SynthImage> images, const std::string& dir) {
  fs::create_directories(dir);
  std::vector<LabelRow> rows;
  for (const auto& s : images) {
    write_png(s.image, (fs::path(dir) / s.id).string());
    rows.push_back({s.id, s.score});
  }
  write_labels((fs::path(dir) / "labels.csv").string(), rows);
}

}  // namespace aesb
