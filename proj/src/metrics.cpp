#include "aesb/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "aesb/errors.hpp"

namespace aesb {

ConfusionMatrix confusion_matrix(std::span<const int> truth, std::span<const int> predicted,
                                 std::span<const int> classes) {
  if (truth.size() != predicted.size()) {
    throw DataError("evaluate: " + std::to_string(truth.size()) + " truth labels vs " +
                    std::to_string(predicted.size()) + " predictions");
  }
  if (classes.empty()) throw DataError("evaluate: empty class set");
  ConfusionMatrix cm;
  cm.labels.assign(classes.begin(), classes.end());
  const Eigen::Index k = Eigen::Index(classes.size());
  cm.counts.setZero(k, k);
  auto index_of = [&](int label) {
    const auto it = std::find(cm.labels.begin(), cm.labels.end(), label);
    if (it == cm.labels.end()) throw DataError("evaluate: unknown label " + std::to_string(label));
    return Eigen::Index(it - cm.labels.begin());
  };
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++cm.counts(index_of(truth[i]), index_of(predicted[i]));
  }
  return cm;
}

MetricsReport evaluate(const ConfusionMatrix& cm) {
  MetricsReport r;
  const Eigen::Index k = cm.counts.rows();
  r.samples = cm.total();
  for (Eigen::Index c = 0; c < k; ++c) {
    const long tp = cm.counts(c, c);
    const long predicted = cm.counts.col(c).sum();
    const long actual = cm.counts.row(c).sum();
    ClassMetrics m;
    m.label = cm.labels[c];
    m.support = actual;
    m.precision = predicted > 0 ? double(tp) / double(predicted) : 0.0;
    m.recall = actual > 0 ? double(tp) / double(actual) : 0.0;
    m.f1 = (m.precision + m.recall) > 0
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
    r.ave_precision += m.precision;
    r.ave_recall += m.recall;
    r.ave_f1 += m.f1;
    r.per_class.push_back(m);
  }
  r.ave_precision /= double(k);
  r.ave_recall /= double(k);
  r.ave_f1 /= double(k);
  r.accuracy = r.samples > 0 ? double(cm.correct()) / double(r.samples) : 0.0;
  return r;
}

MetricsReport evaluate(std::span<const int> truth, std::span<const int> predicted,
                       std::span<const int> classes) {
  return evaluate(confusion_matrix(truth, predicted, classes));
}

std::vector<int> score_classes() { return {2, 3, 4, 5, 6, 7, 8, 9}; }

std::vector<int> binarize(std::span<const int> scores, int threshold) {
  std::vector<int> out;
  out.reserve(scores.size());
  for (int s : scores) {
    if (s < 2 || s > 9) throw DataError("binarize: score " + std::to_string(s) + " outside [2,9]");
    out.push_back(s < threshold ? kLow : kHigh);
  }
  return out;
}

double improvement(double candidate, double baseline) {
  if (!(baseline > 0)) throw DataError("improvement: baseline must be positive");
  return 100.0 * (candidate - baseline) / baseline;
}

double one_decimal(double percent) {
  // The nudge keeps values such as 5.4 (stored as 5.39999...) from dropping a digit.
  const double scaled = percent * 10.0;
  const double nudged = scaled + std::copysign(1e-9 * std::max(1.0, std::abs(scaled)), scaled);
  return std::trunc(nudged) / 10.0;
}

std::string format_report(const MetricsReport& r, const std::string& title) {
  std::ostringstream os;
  char line[160];
  os << title << '\n';
  std::snprintf(line, sizeof line, "%-8s %10s %10s %10s %8s\n", "class", "precision", "recall",
                "f1", "support");
  os << line;
  for (std::size_t i = 0; i < r.per_class.size(); ++i) {
    const auto& m = r.per_class[i];
    const std::string name =
        i < r.label_names.size() ? r.label_names[i] : std::to_string(m.label);
    std::snprintf(line, sizeof line, "%-8s %10.6f %10.6f %10.6f %8ld\n", name.c_str(),
                  m.precision, m.recall, m.f1, m.support);
    os << line;
  }
  std::snprintf(line, sizeof line, "%-8s %10.6f %10.6f %10.6f %8ld\n", "macro", r.ave_precision,
                r.ave_recall, r.ave_f1, r.samples);
  os << line;
  std::snprintf(line, sizeof line, "%-8s %10.6f\n", "accuracy", r.accuracy);
  os << line << '\n';
  os << "accuracy,avePrecision,aveRecall,aveF1\n";
  std::snprintf(line, sizeof line, "%.9g,%.9g,%.9g,%.9g\n", r.accuracy, r.ave_precision,
                r.ave_recall, r.ave_f1);
  os << line;
  return os.str();
}

}  // namespace aesb
