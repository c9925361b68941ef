#include "aesb/ensemble.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "aesb/dataio.hpp"
#include "aesb/metrics.hpp"
#include "aesb/modelb.hpp"

namespace aesb {

void ProbabilityTable::validate(double tolerance) const {
  if (rows.rows() != Index(ids.size())) throw DataError("probability table: id/row count mismatch");
  if (rows.cols() != kClassCount) {
    throw DataError("probability table: expected 8 columns, got " + std::to_string(rows.cols()));
  }
  std::set<std::string> seen;
  for (Index i = 0; i < rows.rows(); ++i) {
    const std::string where = "probability table '" + model + "' row " + std::to_string(i + 1);
    if (!seen.insert(ids[i]).second) throw DataError(where + ": duplicate id '" + ids[i] + "'");
    if (!rows.row(i).allFinite() || (rows.row(i).array() < 0).any()) {
      throw DataError(where + ": negative or non-finite probability");
    }
    const double sum = rows.row(i).sum();
    if (std::abs(sum - 1.0) > tolerance) {
      throw DataError(where + " (id '" + ids[i] + "'): probabilities sum to " +
                      std::to_string(sum));
    }
  }
}

Index ProbabilityTable::row_of(const std::string& id) const {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == id) return Index(i);
  }
  throw DataError("probability table '" + model + "' has no row for id '" + id + "'");
}

ProbabilityTable fuse(const ProbabilityTable& a, const ProbabilityTable& b,
                      const EnsembleWeights& w) {
  a.validate();
  b.validate();
  if (a.size() != b.size() || std::set(a.ids.begin(), a.ids.end()) != std::set(b.ids.begin(), b.ids.end())) {
    throw DataError("fuse: tables '" + a.model + "' and '" + b.model + "' cover different ids");
  }
  std::map<std::string, Index> b_rows;
  for (std::size_t i = 0; i < b.ids.size(); ++i) b_rows[b.ids[i]] = Index(i);

  ProbabilityTable out;
  out.model = a.model + "+" + b.model;
  out.ids = a.ids;
  out.rows.resize(a.rows.rows(), a.rows.cols());
  for (Index i = 0; i < a.rows.rows(); ++i) {
    out.rows.row(i) = w.w1 * a.rows.row(i) + w.w2 * b.rows.row(b_rows.at(a.ids[i]));
  }
  return out;
}

std::vector<int> predict(const ProbabilityTable& table) {
  if (table.size() == 0) throw DataError("predict: empty probability table");
  std::vector<int> scores;
  scores.reserve(table.size());
  for (Index i = 0; i < table.rows.rows(); ++i) {
    scores.push_back(class_to_score(int(argmax_first(table.rows.row(i)))));
  }
  return scores;
}

std::vector<double> weight_grid(double step) {
  if (!(step > 0 && step <= 1)) throw ConfigError("sweep step must be in (0,1]");
  const double n = std::round(1.0 / step);
  if (std::abs(n * step - 1.0) > 1e-9) {
    throw ConfigError("sweep step " + std::to_string(step) + " does not divide 1 evenly");
  }
  std::vector<double> grid;
  for (int k = 0; k <= int(n); ++k) grid.push_back(double(k) / n);
  return grid;
}

double macro_f1(const ProbabilityTable& table, const std::map<std::string, int>& truth) {
  const std::vector<int> predicted = predict(table);
  std::vector<int> actual;
  actual.reserve(table.size());
  for (const auto& id : table.ids) {
    const auto it = truth.find(id);
    if (it == truth.end()) throw DataError("no truth label for id '" + id + "'");
    actual.push_back(it->second);
  }
  const auto classes = score_classes();
  return evaluate(actual, predicted, classes).ave_f1;
}

SweepResult sweep(const ProbabilityTable& a, const ProbabilityTable& b,
                  const std::map<std::string, int>& truth, double step) {
  SweepResult result;
  bool first = true;
  for (double w1 : weight_grid(step)) {
    const EnsembleWeights w{w1, 1.0 - w1};
    const double f1 = macro_f1(fuse(a, b, w), truth);
    result.grid.push_back({w1, f1});
    if (first || f1 > result.best_f1) {
      result.best = w;
      result.best_f1 = f1;
      first = false;
    }
  }
  return result;
}

void export_probabilities(const ProbabilityTable& table, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write probability file: " + path);
  out << "id,p2,p3,p4,p5,p6,p7,p8,p9\n";
  char buf[32];
  for (Index i = 0; i < table.rows.rows(); ++i) {
    out << table.ids[i];
    for (Index c = 0; c < table.rows.cols(); ++c) {
      std::snprintf(buf, sizeof buf, ",%.17g", table.rows(i, c));
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw DataError("failed writing probability file: " + path);
}

ProbabilityTable import_probabilities(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open probability file: " + path);
  ProbabilityTable table;
  table.model = std::filesystem::path(path).stem().string();
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::array<double, kClassCount>> values;
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!header) {
      if (line != "id,p2,p3,p4,p5,p6,p7,p8,p9") {
        throw FormatError(path + ": row " + std::to_string(line_no) +
                          ": expected header 'id,p2,p3,p4,p5,p6,p7,p8,p9'");
      }
      header = true;
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 1 + kClassCount || fields[0].empty()) {
      throw FormatError(path + ": row " + std::to_string(line_no) + ": expected 9 fields");
    }
    std::array<double, kClassCount> row{};
    for (int c = 0; c < kClassCount; ++c) {
      try {
        std::size_t used = 0;
        row[c] = std::stod(fields[c + 1], &used);
        if (used != fields[c + 1].size()) throw std::invalid_argument("trailing");
      } catch (const std::logic_error&) {
        throw FormatError(path + ": row " + std::to_string(line_no) + ": malformed value '" +
                          fields[c + 1] + "'");
      }
    }
    double sum = 0;
    for (double v : row) sum += v;
    if (std::abs(sum - 1.0) > 1e-4) {
      throw DataError(path + ": row " + std::to_string(line_no) + " (id '" + fields[0] +
                      "'): probabilities sum to " + std::to_string(sum));
    }
    table.ids.push_back(fields[0]);
    values.push_back(row);
  }
  if (!header) throw FormatError(path + ": missing header");
  table.rows.resize(Index(values.size()), kClassCount);
  for (std::size_t i = 0; i < values.size(); ++i) {
    for (int c = 0; c < kClassCount; ++c) table.rows(Index(i), c) = values[i][c];
  }
  table.validate(1e-4);
  return table;
}

std::map<std::string, int> read_truth(const std::string& labels_file) {
  std::map<std::string, int> truth;
  for (const auto& row : read_labels(labels_file)) {
    if (!truth.emplace(row.path, row.score).second) {
      throw DataError(labels_file + ": duplicate id '" + row.path + "'");
    }
  }
  return truth;
}

std::string format_sweep(const SweepResult& r) {
  std::ostringstream os;
  char buf[96];
  os << "w1,w2,aveF1\n";
  for (const auto& p : r.grid) {
    std::snprintf(buf, sizeof buf, "%.6g,%.6g,%.9f\n", p.w1, 1.0 - p.w1, p.ave_f1);
    os << buf;
  }
  return os.str();
}

}  // namespace aesb
