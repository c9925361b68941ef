#pragma once

// Two-model probability fusion: p = w1 * p_a + w2 * p_b per class, the
// score is the argmax class, and a one-axis grid over w1 (w2 = 1 - w1)
// picks the weights with the best macro F1.

#include <map>
#include <string>
#include <vector>

#include "aesb/tensor.hpp"

namespace aesb {

/// Per-image 8-way class probabilities, columns ordered by score 2..9.
struct ProbabilityTable {
  std::string model;
  std::vector<std::string> ids;
  MatrixR<double> rows;

  std::size_t size() const { return ids.size(); }

  /// Throws DataError naming the first offending row (1-based) when a row is
  /// negative, does not sum to 1 within `tolerance`, or repeats an id.
  void validate(double tolerance = 1e-6) const;

  /// Row index of `id`; throws DataError when absent.
  Index row_of(const std::string& id) const;
};

struct EnsembleWeights {
  double w1 = 0.7;
  double w2 = 0.3;
};

/// Output rows follow `a`'s id order; `b` is matched by id.
ProbabilityTable fuse(const ProbabilityTable& a, const ProbabilityTable& b,
                      const EnsembleWeights& w);

/// argmax score per row; ties resolve to the lowest score.
std::vector<int> predict(const ProbabilityTable& table);

struct SweepPoint {
  double w1 = 0;
  double ave_f1 = 0;
};

struct SweepResult {
  std::vector<SweepPoint> grid;
  EnsembleWeights best;
  double best_f1 = 0;
};

/// Grid points w1 = k/n for k = 0..n with n = 1/step. The first maximal
/// point (smallest w1) wins ties.
std::vector<double> weight_grid(double step);

SweepResult sweep(const ProbabilityTable& a, const ProbabilityTable& b,
                  const std::map<std::string, int>& truth, double step = 0.1);

/// Macro F1 over scores 2..9 of `table`'s predictions against `truth`.
double macro_f1(const ProbabilityTable& table, const std::map<std::string, int>& truth);

/// Text format: header `id,p2,...,p9`, one row per image, 17 significant digits.
void export_probabilities(const ProbabilityTable& table, const std::string& path);

/// Rows must sum to 1 within 1e-4; the model tag is the file stem.
ProbabilityTable import_probabilities(const std::string& path);

/// Truth labels from a `path,score` labels file.
std::map<std::string, int> read_truth(const std::string& labels_file);

std::string format_sweep(const SweepResult& result);

}  // namespace aesb
