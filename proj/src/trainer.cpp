#include "aesb/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "aesb/metrics.hpp"
#include "aesb/seeds.hpp"

namespace aesb {

namespace {

void require_labels(const LabeledDataset& data, Index resolution) {
  if (data.empty()) throw DataError("training data is empty");
  data.validate();
  if (data.resolution != resolution) {
    throw ShapeError("dataset resolution " + std::to_string(data.resolution) +
                     " does not match network input " + std::to_string(resolution));
  }
}

std::vector<int> true_scores(const LabeledDataset& data) {
  std::vector<int> out;
  out.reserve(data.size());
  for (const auto& e : data.entries) out.push_back(e.score);
  return out;
}

}  // namespace

TrainResult train(Network<float> net, const LabeledDataset& data, TrainRun run) {
  if (run.batch_size == 0) throw ConfigError("batch size must be positive");
  run.loss_trace.clear();
  run.snapshots.clear();
  if (run.epochs > 0) require_labels(data, net.config.input_resolution);

  SgdState<float> sgd;
  sgd.learning_rate = float(run.learning_rate);
  sgd.momentum_coef = float(run.momentum);
  sgd.seed = run.shuffle_seed;

  net.meta.learning_rate = run.learning_rate;
  net.meta.momentum = run.momentum;
  net.meta.batch_size = run.batch_size;

  std::vector<std::size_t> order(data.size());
  std::vector<Index> labels;
  const Index res = net.config.input_resolution;
  for (std::uint32_t epoch = 0; epoch < run.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(run.shuffle_seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += run.batch_size) {
      const std::size_t stop = std::min(order.size(), start + run.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      labels.clear();
      for (auto i : idx) labels.push_back(score_to_class(data.entries[i].score));

      const Tensor<float> batch = make_batch(data.entries, idx, res);
      auto art = forward(net, batch, Mode::train, true);
      const auto ce = batch_cross_entropy<float>(art.logits, labels);
      if (!std::isfinite(ce.loss)) {
        throw NumericError("training diverged: non-finite loss in epoch " +
                           std::to_string(epoch + 1));
      }
      loss_sum += double(ce.loss) * double(idx.size());
      const auto grads = backward(net, art, ce.logit_grad);
      commit_running_stats(net, art);
      apply_sgd(net, grads, sgd);
    }
    const double mean_loss = loss_sum / double(order.size());
    ++net.meta.epochs;
    run.loss_trace.push_back(mean_loss);
    if (run.keep_snapshots) run.snapshots.push_back(net);
    if (run.on_epoch) run.on_epoch(epoch, mean_loss);
  }

  return {std::move(net), std::move(run)};
}

MatrixR<double> predict_probabilities(const Network<float>& net, std::span<const Sample> samples,
                                      std::size_t chunk) {
  MatrixR<double> probs(Index(samples.size()), net.config.class_count);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    const std::size_t stop = std::min(samples.size(), start + chunk);
    idx.resize(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto art =
        forward(net, make_batch(samples, idx, net.config.input_resolution), Mode::infer);
    probs.middleRows(Index(start), Index(stop - start)) = art.probs.cast<double>();
  }
  return probs;
}

std::vector<int> predict_scores(const Network<float>& net, std::span<const Sample> samples) {
  const MatrixR<double> probs = predict_probabilities(net, samples);
  std::vector<int> scores;
  scores.reserve(samples.size());
  for (Index i = 0; i < probs.rows(); ++i) {
    scores.push_back(int(argmax_first(probs.row(i)) + net.config.score_offset));
  }
  return scores;
}

double accuracy(const Network<float>& net, const LabeledDataset& data) {
  const auto classes = score_classes();
  return evaluate(true_scores(data), predict_scores(net, data.entries), classes).accuracy;
}

double macro_f1(const Network<float>& net, const LabeledDataset& data) {
  const auto classes = score_classes();
  return evaluate(true_scores(data), predict_scores(net, data.entries), classes).ave_f1;
}

// ---------------------------------------------------------------------------

std::vector<int> majority_scores(const std::array<std::size_t, kClassCount>& counts) {
  const std::size_t total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  std::vector<int> out;
  // count > total / 8, compared in integers
  for (int c = 0; c < kClassCount; ++c) {
    if (counts[c] * kClassCount > total) out.push_back(class_to_score(c));
  }
  return out;
}

std::vector<DroppedSample> select_drops(const Network<float>& net, const LabeledDataset& data,
                                        double drop_fraction) {
  if (!(drop_fraction > 0 && drop_fraction < 1)) {
    throw ConfigError("drop fraction must be in (0,1)");
  }
  const auto counts = data.class_counts();
  const auto majority = majority_scores(counts);
  if (majority.empty()) return {};

  const MatrixR<double> probs = predict_probabilities(net, data.entries);
  std::vector<DroppedSample> dropped;
  for (int score : majority) {
    const int cls = score_to_class(score);
    std::vector<DroppedSample> members;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (data.entries[i].score == score) {
        members.push_back({data.entries[i].id, score, probs(Index(i), cls)});
      }
    }
    const auto n_drop = std::size_t(std::floor(drop_fraction * double(counts[cls])));
    std::sort(members.begin(), members.end(), [](const DroppedSample& a, const DroppedSample& b) {
      return a.likelihood != b.likelihood ? a.likelihood < b.likelihood : a.id < b.id;
    });
    dropped.insert(dropped.end(), members.begin(), members.begin() + std::ptrdiff_t(n_drop));
  }
  return dropped;
}

RsrlResult rsrl(const Network<float>& initial, const LabeledDataset& train_data,
                const LabeledDataset& val_data, const RsrlPlan& plan) {
  if (!(plan.drop_fraction > 0 && plan.drop_fraction < 1)) {
    throw ConfigError("drop fraction must be in (0,1)");
  }
  RsrlResult result;
  result.best = initial;
  result.trace.drop_fraction = plan.drop_fraction;
  if (plan.iterations == 0) return result;

  if (val_data.empty()) throw DataError("rsrl: validation split is empty");
  require_labels(train_data, initial.config.input_resolution);
  require_labels(val_data, initial.config.input_resolution);
  for (const auto& v : val_data.entries) {
    for (const auto& t : train_data.entries) {
      if (v.id == t.id) throw DataError("rsrl: sample '" + v.id + "' is in both splits");
    }
  }

  Network<float> current = initial;
  LabeledDataset data = train_data;
  double best_f1 = 0;
  for (std::uint32_t t = 1; t <= plan.iterations; ++t) {
    RsrlIteration rec;
    rec.iteration = t;
    rec.size_before = data.size();
    rec.majority_scores = majority_scores(data.class_counts());
    rec.dropped = select_drops(current, data, plan.drop_fraction);

    std::vector<std::string> drop_ids;
    for (const auto& d : rec.dropped) drop_ids.push_back(d.id);
    std::sort(drop_ids.begin(), drop_ids.end());
    std::erase_if(data.entries, [&](const Sample& s) {
      return std::binary_search(drop_ids.begin(), drop_ids.end(), s.id);
    });
    rec.size_after = data.size();

    TrainRun run = plan.retrain;
    run.shuffle_seed = derive_seed(plan.retrain.shuffle_seed, std::uint64_t(t));
    run.keep_snapshots = false;
    run.on_epoch = plan.retrain.on_epoch;
    current = train(std::move(current), data, std::move(run)).net;
    current.meta.rsrl_iteration = t;

    char name[32];
    std::snprintf(name, sizeof name, "rsrl_iter_%02u", t);
    rec.snapshot = name;
    rec.val_macro_f1 = macro_f1(current, val_data);
    if (t == 1 || rec.val_macro_f1 > best_f1) {
      best_f1 = rec.val_macro_f1;
      result.best = current;
      result.best_iteration = t;
    }
    result.snapshots.push_back(current);
    result.trace.iterations.push_back(std::move(rec));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Trace text format

namespace {

void check_token(const std::string& id) {
  if (id.empty() || id.find_first_of(" \t\n;:=") != std::string::npos) {
    throw FormatError("rsrl trace: id '" + id + "' contains a reserved character");
  }
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string format_rsrl_trace(const RsrlTrace& trace) {
  std::ostringstream os;
  os << "# rsrl-trace v1 drop_fraction=" << fmt_double(trace.drop_fraction) << '\n';
  for (const auto& it : trace.iterations) {
    os << "iteration=" << it.iteration << " size_before=" << it.size_before
       << " size_after=" << it.size_after << " majority=";
    for (std::size_t i = 0; i < it.majority_scores.size(); ++i) {
      os << (i ? "," : "") << it.majority_scores[i];
    }
    check_token(it.snapshot);
    os << " val_macro_f1=" << fmt_double(it.val_macro_f1) << " snapshot=" << it.snapshot
       << " dropped=" << it.dropped.size() << " ids=";
    for (std::size_t i = 0; i < it.dropped.size(); ++i) {
      const auto& d = it.dropped[i];
      check_token(d.id);
      os << (i ? ";" : "") << d.id << ':' << d.score << ':' << fmt_double(d.likelihood);
    }
    os << '\n';
  }
  return os.str();
}

RsrlTrace parse_rsrl_trace(const std::string& text) {
  RsrlTrace trace;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool header = false;
  auto fail = [&](const std::string& why) -> FormatError {
    return FormatError("rsrl trace line " + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (!header) {
      const std::string prefix = "# rsrl-trace v1 drop_fraction=";
      if (line.rfind(prefix, 0) != 0) throw fail("missing '# rsrl-trace v1' header");
      trace.drop_fraction = std::stod(line.substr(prefix.size()));
      header = true;
      continue;
    }
    RsrlIteration it;
    std::istringstream fields(line);
    std::string tok;
    std::size_t declared_drops = 0;
    int seen = 0;
    while (fields >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw fail("token without '=': " + tok);
      const std::string key = tok.substr(0, eq), value = tok.substr(eq + 1);
      try {
        if (key == "iteration") {
          it.iteration = std::uint32_t(std::stoul(value));
        } else if (key == "size_before") {
          it.size_before = std::stoull(value);
        } else if (key == "size_after") {
          it.size_after = std::stoull(value);
        } else if (key == "majority") {
          std::istringstream ms(value);
          std::string s;
          while (std::getline(ms, s, ',')) it.majority_scores.push_back(std::stoi(s));
        } else if (key == "val_macro_f1") {
          it.val_macro_f1 = std::stod(value);
        } else if (key == "snapshot") {
          it.snapshot = value;
        } else if (key == "dropped") {
          declared_drops = std::stoull(value);
        } else if (key == "ids") {
          std::istringstream ds(value);
          std::string rec;
          while (std::getline(ds, rec, ';')) {
            const auto a = rec.find(':'), b = rec.rfind(':');
            if (a == std::string::npos || a == b) throw fail("malformed dropped record " + rec);
            it.dropped.push_back(
                {rec.substr(0, a), std::stoi(rec.substr(a + 1, b - a - 1)), std::stod(rec.substr(b + 1))});
          }
        } else {
          throw fail("unknown key '" + key + "'");
        }
      } catch (const std::logic_error&) {
        throw fail("malformed value for '" + key + "'");
      }
      ++seen;
    }
    if (seen != 8) throw fail("expected 8 fields");
    if (declared_drops != it.dropped.size()) throw fail("dropped count disagrees with ids");
    trace.iterations.push_back(std::move(it));
  }
  if (!header) throw FormatError("rsrl trace: empty");
  return trace;
}

std::string summarize_rsrl_trace(const RsrlTrace& trace) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "RSRL trace (drop fraction %g, %zu iterations)\n",
                trace.drop_fraction, trace.iterations.size());
  os << buf;
  std::snprintf(buf, sizeof buf, "%-10s %12s %11s %8s %14s  %s\n", "iteration", "size_before",
                "size_after", "dropped", "val_macro_f1", "majority");
  os << buf;
  std::size_t best = 0;
  for (std::size_t i = 0; i < trace.iterations.size(); ++i) {
    const auto& it = trace.iterations[i];
    std::string maj;
    for (std::size_t k = 0; k < it.majority_scores.size(); ++k) {
      maj += (k ? "," : "") + std::to_string(it.majority_scores[k]);
    }
    std::snprintf(buf, sizeof buf, "%-10u %12zu %11zu %8zu %14.6f  %s\n", it.iteration,
                  it.size_before, it.size_after, it.dropped.size(), it.val_macro_f1,
                  maj.empty() ? "-" : maj.c_str());
    os << buf;
    if (it.val_macro_f1 > trace.iterations[best].val_macro_f1) best = i;
  }
  if (trace.iterations.empty()) {
    os << "no iterations: the initial network is the result\n";
  } else {
    os << "selected: " << trace.iterations[best].snapshot << " (iteration "
       << trace.iterations[best].iteration << ", val_macro_f1 "
       << fmt_double(trace.iterations[best].val_macro_f1) << ")\n";
  }
  return os.str();
}

}  // namespace aesb
