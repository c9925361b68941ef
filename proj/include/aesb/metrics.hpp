#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace aesb {

/// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  std::vector<int> labels;
  Eigen::Matrix<long, Eigen::Dynamic, Eigen::Dynamic> counts;

  long total() const { return counts.sum(); }
  long correct() const { return counts.trace(); }
};

struct ClassMetrics {
  int label = 0;
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  long support = 0;
};

struct MetricsReport {
  std::vector<ClassMetrics> per_class;
  double ave_precision = 0;
  double ave_recall = 0;
  double ave_f1 = 0;
  double accuracy = 0;
  long samples = 0;
  /// Optional display names for labels (e.g. "low"/"high").
  std::vector<std::string> label_names;
};

ConfusionMatrix confusion_matrix(std::span<const int> truth, std::span<const int> predicted,
                                 std::span<const int> classes);

/// Per-class precision/recall/F1 with 0 for empty denominators; macro values
/// are unweighted means over every class in `classes`.
MetricsReport evaluate(std::span<const int> truth, std::span<const int> predicted,
                       std::span<const int> classes);
MetricsReport evaluate(const ConfusionMatrix& cm);

/// The eight score classes 2..9.
std::vector<int> score_classes();

inline constexpr int kLow = 0;
inline constexpr int kHigh = 1;

/// score < threshold -> kLow, otherwise kHigh.
std::vector<int> binarize(std::span<const int> scores, int threshold = 5);

/// 100 * (candidate - baseline) / baseline.
double improvement(double candidate, double baseline);

/// Truncates toward zero at one decimal.
double one_decimal(double percent);

/// Aligned plain-text table followed by a comma-separated summary block with
/// columns accuracy,avePrecision,aveRecall,aveF1.
std::string format_report(const MetricsReport& report, const std::string& title);

}  // namespace aesb
