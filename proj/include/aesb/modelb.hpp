#pragma once

// The B1-B4 gated-convolution networks.
//
//   input (3 x R x R)
//   CB1  conv1x1 -> 128, batchnorm, self-gate      R x R
//   maxpool 8/8                                    R/8
//   CB2  conv1x1 -> 96,  batchnorm, self-gate
//   maxpool 4/4                                    7 (R=227) or 6 (R=192)
//   CB3  conv1x1 (B1,B3) or conv3x3 (B2,B4) -> 96
//   fc_1 (96*r*r -> 36), fc_2 (36 -> 8), softmax
//
// Class index i corresponds to aesthetic score i + 2.

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aesb/nn.hpp"
#include "aesb/tensor.hpp"

namespace aesb {

enum class Variant : std::uint32_t { B1 = 1, B2 = 2, B3 = 3, B4 = 4 };

std::string to_string(Variant v);
Variant parse_variant(std::string_view text);

struct ModelConfig {
  Variant variant = Variant::B4;
  Index input_resolution = 192;
  Index cb1_channels = 128;
  Index cb2_channels = 96;
  Index cb3_channels = 96;
  Index cb3_kernel = 3;
  Index pool1 = 8;
  Index pool2 = 4;
  Index fc1_width = 36;
  Index class_count = 8;
  Index score_offset = 2;
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.1;

  /// The published configuration of a variant.
  static ModelConfig for_variant(Variant v);

  /// Same topology with narrower layers; used for cheap gradient checks.
  ModelConfig with_widths(Index cb1, Index cb2, Index cb3, Index fc1) const;

  Index after_pool1() const { return pooled_extent(input_resolution, pool1, pool1); }
  Index last_conv_resolution() const { return pooled_extent(after_pool1(), pool2, pool2); }
  Index fc1_inputs() const { return cb3_channels * last_conv_resolution() * last_conv_resolution(); }

  /// Throws ConfigError on an invalid variant/resolution/kernel combination.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct TrainingMeta {
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint32_t batch_size = 8;
  std::uint64_t seed = 0;
  std::uint32_t epochs = 0;
  std::uint32_t rsrl_iteration = 0;

  bool operator==(const TrainingMeta&) const = default;
};

template <typename Scalar>
struct NetworkParams {
  ConvParams<Scalar> cb1_conv, cb2_conv, cb3_conv;
  BatchNormParams<Scalar> cb1_bn, cb2_bn, cb3_bn;
  FcParams<Scalar> fc1, fc2;
};

/// Visits learnable blocks in checkpoint order as (name, Eigen object).
template <typename Params, typename Fn>
void for_each_trainable(Params& p, Fn&& fn) {
  fn("cb1.conv.weight", p.cb1_conv.weights);
  fn("cb1.conv.bias", p.cb1_conv.bias);
  fn("cb1.bn.scale", p.cb1_bn.scale);
  fn("cb1.bn.shift", p.cb1_bn.shift);
  fn("cb2.conv.weight", p.cb2_conv.weights);
  fn("cb2.conv.bias", p.cb2_conv.bias);
  fn("cb2.bn.scale", p.cb2_bn.scale);
  fn("cb2.bn.shift", p.cb2_bn.shift);
  fn("cb3.conv.weight", p.cb3_conv.weights);
  fn("cb3.conv.bias", p.cb3_conv.bias);
  fn("cb3.bn.scale", p.cb3_bn.scale);
  fn("cb3.bn.shift", p.cb3_bn.shift);
  fn("fc1.weight", p.fc1.weights);
  fn("fc1.bias", p.fc1.bias);
  fn("fc2.weight", p.fc2.weights);
  fn("fc2.bias", p.fc2.bias);
}

/// Learnable blocks followed by batchnorm running statistics.
template <typename Params, typename Fn>
void for_each_block(Params& p, Fn&& fn) {
  for_each_trainable(p, fn);
  fn("cb1.bn.running_mean", p.cb1_bn.running_mean);
  fn("cb1.bn.running_var", p.cb1_bn.running_var);
  fn("cb2.bn.running_mean", p.cb2_bn.running_mean);
  fn("cb2.bn.running_var", p.cb2_bn.running_var);
  fn("cb3.bn.running_mean", p.cb3_bn.running_mean);
  fn("cb3.bn.running_var", p.cb3_bn.running_var);
}

template <typename Scalar>
struct Network {
  ModelConfig config;
  NetworkParams<Scalar> params;
  TrainingMeta meta;

  template <typename Other>
  Network<Other> cast() const;
};

/// One row of the layer table: operator, input resolution, output channels.
struct StageRow {
  std::string op;
  std::string resolution;
  Index channels = 0;
  bool operator==(const StageRow&) const = default;
};

template <typename Scalar>
struct ForwardTrace {
  Tensor<Scalar> input;
  GatedPoolResult<Scalar> cb1_pool1;
  GatedBlockResult<Scalar> cb2, cb3;
  PoolResult<Scalar> pool2;
  MatrixR<Scalar> fc1_out;
};

template <typename Scalar>
struct ForwardArtifacts {
  MatrixR<Scalar> logits;  // batch x classes
  MatrixR<Scalar> probs;   // row-wise softmax of logits
  /// CB3 output before flattening: batch x 96 x r x r.
  Tensor<Scalar> last_conv_maps;
  Index input_resolution = 0;
  std::vector<StageRow> stages;
  /// Batchnorm running statistics produced by a train-mode pass.
  std::array<VectorX<Scalar>, 3> running_mean, running_var;
  /// Present only when requested; consumed by backward().
  std::optional<ForwardTrace<Scalar>> trace;
};

Index trainable_parameter_count(const ModelConfig& config);

// ---------------------------------------------------------------------------

template <typename Scalar>
Network<Scalar> build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Network<Scalar> net;
  net.config = config;
  net.meta.seed = seed;
  auto& p = net.params;
  p.cb1_conv = ConvParams<Scalar>(1, 3, config.cb1_channels);
  p.cb2_conv = ConvParams<Scalar>(1, config.cb1_channels, config.cb2_channels);
  p.cb3_conv = ConvParams<Scalar>(config.cb3_kernel, config.cb2_channels, config.cb3_channels);
  p.cb1_bn = BatchNormParams<Scalar>(config.cb1_channels);
  p.cb2_bn = BatchNormParams<Scalar>(config.cb2_channels);
  p.cb3_bn = BatchNormParams<Scalar>(config.cb3_channels);
  for (auto* bn : {&p.cb1_bn, &p.cb2_bn, &p.cb3_bn}) {
    bn->epsilon = Scalar(config.bn_epsilon);
    bn->momentum = Scalar(config.bn_momentum);
  }
  p.fc1 = FcParams<Scalar>(config.fc1_inputs(), config.fc1_width);
  p.fc2 = FcParams<Scalar>(config.fc1_width, config.class_count);

  // He-normal weights, zero biases.
  std::mt19937_64 rng(seed);
  auto init = [&rng](MatrixR<Scalar>& w) {
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / double(w.cols())));
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = Scalar(normal(rng));
  };
  init(p.cb1_conv.weights);
  init(p.cb2_conv.weights);
  init(p.cb3_conv.weights);
  init(p.fc1.weights);
  init(p.fc2.weights);
  return net;
}

template <typename Scalar>
template <typename Other>
Network<Other> Network<Scalar>::cast() const {
  Network<Other> out = build<Other>(config, meta.seed);
  out.meta = meta;
  std::vector<VectorX<Other>> flat;
  for_each_block(params, [&](std::string_view, auto& block) {
    flat.push_back(Eigen::Map<const VectorX<Scalar>>(block.data(), block.size()).template cast<Other>());
  });
  std::size_t i = 0;
  for_each_block(out.params, [&](std::string_view, auto& block) {
    Eigen::Map<VectorX<Other>>(block.data(), block.size()) = flat[i++];
  });
  return out;
}

namespace detail {
inline std::string resolution_label(Index h, Index w) {
  return std::to_string(h) + "x" + std::to_string(w);
}
inline std::string kernel_label(Index k) { return k == 1 ? "conv1x1" : "conv3x3"; }
}  // namespace detail

/// Runs the network. Train mode normalizes with batch statistics and reports
/// the updated running statistics; infer mode uses stored ones. When
/// `retain_trace` is set, intermediates needed by backward() are kept.
template <typename Scalar>
ForwardArtifacts<Scalar> forward(const Network<Scalar>& net, const Tensor<Scalar>& batch, Mode mode,
                                 bool retain_trace = false) {
  const ModelConfig& cfg = net.config;
  const auto& p = net.params;
  if (batch.channels() != 3 || batch.height() != cfg.input_resolution ||
      batch.width() != cfg.input_resolution) {
    throw ShapeError("forward: expected N x 3 x " + std::to_string(cfg.input_resolution) + " x " +
                     std::to_string(cfg.input_resolution) + " input, got " +
                     to_string(batch.shape()));
  }
  if (batch.batch() == 0) throw ShapeError("forward: empty batch");

  ForwardArtifacts<Scalar> art;
  art.input_resolution = cfg.input_resolution;
  const Index n = batch.batch();

  // CB1 and the first pool run fused; the full-resolution activations are
  // never materialized.
  auto cb1 = gated_pool_forward(batch, p.cb1_conv, p.cb1_bn, mode, cfg.pool1);
  art.stages.push_back({"CB1, " + detail::kernel_label(p.cb1_conv.kernel),
                        detail::resolution_label(batch.height(), batch.width()),
                        cb1.pooled.channels()});
  const Tensor<Scalar>& pooled1 = cb1.pooled;

  auto cb2 = gated_block_forward(pooled1, p.cb2_conv, p.cb2_bn, mode);
  art.stages.push_back({"CB2, " + detail::kernel_label(p.cb2_conv.kernel),
                        detail::resolution_label(pooled1.height(), pooled1.width()),
                        cb2.out.channels()});
  auto pool2 = maxpool_forward(cb2.out, cfg.pool2, cfg.pool2);
  cb2.out = Tensor<Scalar>();

  auto cb3 = gated_block_forward(pool2.output, p.cb3_conv, p.cb3_bn, mode);
  art.stages.push_back({"CB3, " + detail::kernel_label(p.cb3_conv.kernel),
                        detail::resolution_label(pool2.output.height(), pool2.output.width()),
                        cb3.out.channels()});
  art.last_conv_maps = std::move(cb3.out);

  const Eigen::Map<const MatrixR<Scalar>> flat(art.last_conv_maps.data(), n,
                                               art.last_conv_maps.sample_size());
  MatrixR<Scalar> fc1_out = fully_connected<Scalar>(flat, p.fc1);
  art.stages.push_back({"fc_1",
                        detail::resolution_label(art.last_conv_maps.height(),
                                                 art.last_conv_maps.width()),
                        fc1_out.cols()});
  art.logits = fully_connected<Scalar>(fc1_out, p.fc2);
  art.stages.push_back({"fc_2", detail::resolution_label(1, fc1_out.cols()), art.logits.cols()});

  art.probs.resize(n, art.logits.cols());
  for (Index i = 0; i < n; ++i) {
    art.probs.row(i) = softmax<Scalar>(art.logits.row(i).transpose()).transpose();
  }

  art.running_mean = {cb1.running_mean, cb2.running_mean, cb3.running_mean};
  art.running_var = {cb1.running_var, cb2.running_var, cb3.running_var};

  if (retain_trace) {
    ForwardTrace<Scalar> t;
    t.input = batch;
    t.cb1_pool1 = std::move(cb1);
    t.cb2 = std::move(cb2);
    t.cb3 = std::move(cb3);
    t.pool2 = std::move(pool2);
    t.fc1_out = std::move(fc1_out);
    art.trace = std::move(t);
  }
  return art;
}

/// Gradients of a scalar loss with respect to every learnable block, given
/// d(loss)/d(logits). Consumes the retained trace. Running-statistic fields
/// of the result are left empty.
template <typename Scalar>
NetworkParams<Scalar> backward(const Network<Scalar>& net, ForwardArtifacts<Scalar>& art,
                               const MatrixR<Scalar>& logit_grad) {
  if (!art.trace) throw ShapeError("backward: forward pass did not retain its trace");
  if (logit_grad.rows() != art.logits.rows() || logit_grad.cols() != art.logits.cols()) {
    throw ShapeError("backward: logit gradient shape mismatch");
  }
  const auto& p = net.params;
  ForwardTrace<Scalar>& t = *art.trace;
  const Index n = art.logits.rows();
  NetworkParams<Scalar> g;

  auto g2 = fully_connected_backward<Scalar>(t.fc1_out, p.fc2, logit_grad);
  g.fc2.weights = std::move(g2.weights);
  g.fc2.bias = std::move(g2.bias);
  const Eigen::Map<const MatrixR<Scalar>> flat(art.last_conv_maps.data(), n,
                                               art.last_conv_maps.sample_size());
  auto g1 = fully_connected_backward<Scalar>(flat, p.fc1, g2.input);
  g.fc1.weights = std::move(g1.weights);
  g.fc1.bias = std::move(g1.bias);

  Tensor<Scalar> d_last(art.last_conv_maps.shape(),
                        Eigen::Map<const VectorX<Scalar>>(g1.input.data(), g1.input.size()));

  auto store = [](ConvParams<Scalar>& conv, BatchNormParams<Scalar>& bn, GatedBlockGrads<Scalar>& gb) {
    conv = std::move(gb.conv);
    bn.scale = std::move(gb.bn_scale);
    bn.shift = std::move(gb.bn_shift);
  };

  auto gb3 = gated_block_backward(t.pool2.output, p.cb3_conv, p.cb3_bn, t.cb3, d_last);
  store(g.cb3_conv, g.cb3_bn, gb3);
  Tensor<Scalar> d_cb2 = maxpool_backward(t.pool2, gb3.input);
  gb3.input = Tensor<Scalar>();

  auto gb2 = gated_block_backward(t.cb1_pool1.pooled, p.cb2_conv, p.cb2_bn, t.cb2, d_cb2);
  store(g.cb2_conv, g.cb2_bn, gb2);
  d_cb2 = Tensor<Scalar>();

  auto gb1 = gated_pool_backward(t.input, p.cb1_conv, p.cb1_bn, t.cb1_pool1, gb2.input);
  store(g.cb1_conv, g.cb1_bn, gb1);

  art.trace.reset();
  return g;
}

/// Installs the running statistics reported by a train-mode forward pass.
template <typename Scalar>
void commit_running_stats(Network<Scalar>& net, const ForwardArtifacts<Scalar>& art) {
  BatchNormParams<Scalar>* bns[3] = {&net.params.cb1_bn, &net.params.cb2_bn, &net.params.cb3_bn};
  for (int i = 0; i < 3; ++i) {
    bns[i]->running_mean = art.running_mean[i];
    bns[i]->running_var = art.running_var[i];
  }
}

/// One momentum-SGD step over every learnable block.
template <typename Scalar>
void apply_sgd(Network<Scalar>& net, const NetworkParams<Scalar>& grads, SgdState<Scalar>& state) {
  std::vector<ParamView<Scalar>> params;
  std::vector<ConstParamView<Scalar>> gviews;
  for_each_trainable(net.params, [&](std::string_view, auto& block) {
    params.emplace_back(block.data(), block.size());
  });
  for_each_trainable(grads, [&](std::string_view, const auto& block) {
    gviews.emplace_back(block.data(), block.size());
  });
  sgd_step<Scalar>(params, gviews, state);
}

/// Index of the first maximal entry, so ties resolve to the lowest score.
template <typename Derived>
Index argmax_first(const Eigen::MatrixBase<Derived>& row) {
  Index best = 0;
  for (Index i = 1; i < row.size(); ++i) {
    if (row(i) > row(best)) best = i;
  }
  return best;
}

struct ScorePrediction {
  int score = 0;
  VectorX<double> probs;
};

template <typename Scalar>
ScorePrediction predict_score(const Network<Scalar>& net, const Tensor<Scalar>& image) {
  if (image.batch() != 1) throw ShapeError("predict_score: expected a single image");
  const auto art = forward(net, image, Mode::infer);
  ScorePrediction out;
  out.probs = art.probs.row(0).transpose().template cast<double>();
  out.score = int(argmax_first(art.probs.row(0)) + net.config.score_offset);
  return out;
}

/// Walks a one-image forward pass and reports the realized layer table.
template <typename Scalar>
std::vector<StageRow> describe_stages(const Network<Scalar>& net) {
  const Index r = net.config.input_resolution;
  return forward(net, Tensor<Scalar>({1, 3, r, r}), Mode::infer).stages;
}

// ---------------------------------------------------------------------------
// Checkpoints (32-bit float parameters; see docs/checkpoint-format.md)

std::vector<std::uint8_t> save_checkpoint(const Network<float>& net);
Network<float> load_checkpoint(std::span<const std::uint8_t> bytes);

void write_checkpoint_file(const Network<float>& net, const std::string& path);
Network<float> read_checkpoint_file(const std::string& path);

}  // namespace aesb
