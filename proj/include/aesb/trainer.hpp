#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "aesb/dataio.hpp"
#include "aesb/modelb.hpp"

namespace aesb {

struct TrainRun {
  std::uint32_t epochs = 30;
  std::uint32_t batch_size = 8;
  std::uint64_t shuffle_seed = 0;
  double learning_rate = 0.01;
  double momentum = 0.9;
  /// Mean per-sample loss of each epoch, filled by train().
  std::vector<double> loss_trace;
  bool keep_snapshots = false;
  std::vector<Network<float>> snapshots;
  /// Optional progress callback (epoch index from 0, mean loss).
  std::function<void(std::uint32_t, double)> on_epoch;
};

struct TrainResult {
  Network<float> net;
  TrainRun run;
};

/// Mini-batch momentum SGD on softmax cross-entropy. Sample order is
/// reshuffled every epoch from `run.shuffle_seed`; optimizer velocity starts
/// at zero.
TrainResult train(Network<float> net, const LabeledDataset& data, TrainRun run);

/// Infer-mode class probabilities, one row per sample (batch x 8).
MatrixR<double> predict_probabilities(const Network<float>& net, std::span<const Sample> samples,
                                      std::size_t chunk = 8);

/// Argmax scores (2..9) of the network's infer-mode predictions.
std::vector<int> predict_scores(const Network<float>& net, std::span<const Sample> samples);

double accuracy(const Network<float>& net, const LabeledDataset& data);
double macro_f1(const Network<float>& net, const LabeledDataset& data);

// ---------------------------------------------------------------------------
// Repetitive self-revised learning

struct RsrlPlan {
  std::uint32_t iterations = 5;
  double drop_fraction = 0.1;
  /// Settings of the warm-start retraining run in every iteration; the
  /// shuffle seed is derived per iteration from `retrain.shuffle_seed`.
  TrainRun retrain;
};

struct DroppedSample {
  std::string id;
  int score = 0;
  double likelihood = 0;
};

struct RsrlIteration {
  std::uint32_t iteration = 0;
  std::size_t size_before = 0;
  std::size_t size_after = 0;
  std::vector<int> majority_scores;
  std::vector<DroppedSample> dropped;
  std::string snapshot;
  double val_macro_f1 = 0;
};

struct RsrlTrace {
  double drop_fraction = 0;
  std::vector<RsrlIteration> iterations;
};

struct RsrlResult {
  Network<float> best;
  /// 0 when no iteration ran (the initial network is returned).
  std::uint32_t best_iteration = 0;
  RsrlTrace trace;
  std::vector<Network<float>> snapshots;  // one per iteration
};

/// Scores whose count strictly exceeds the mean count over all 8 classes.
std::vector<int> majority_scores(const std::array<std::size_t, kClassCount>& counts);

/// For every majority class, the floor(fraction * count) samples with the
/// lowest true-class probability (ties by id ascending).
std::vector<DroppedSample> select_drops(const Network<float>& net, const LabeledDataset& data,
                                        double drop_fraction);

RsrlResult rsrl(const Network<float>& initial, const LabeledDataset& train_data,
                const LabeledDataset& val_data, const RsrlPlan& plan);

/// One header line, then one line per iteration with space-separated fields
///   iteration=<t> size_before=<n> size_after=<m> majority=<s,..>
///   val_macro_f1=<f> snapshot=<name> dropped=<k> ids=<id:score:likelihood;...>
std::string format_rsrl_trace(const RsrlTrace& trace);
RsrlTrace parse_rsrl_trace(const std::string& text);

/// Human-readable summary of a trace, naming the selected iteration.
std::string summarize_rsrl_trace(const RsrlTrace& trace);

}  // namespace aesb
