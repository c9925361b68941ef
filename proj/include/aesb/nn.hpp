#pragma once

// Differentiable operators used by the gated convolutional networks:
// convolution, batch normalization, the sigmoid self-gate, max pooling,
// fully-connected layers, softmax cross-entropy and momentum SGD.
//
// Every operator is a free function templated on the scalar type so the
// same code runs at 32-bit for training and 64-bit for gradient checks.
// Forward functions never mutate their parameters; batch normalization
// returns updated running statistics in its result instead.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "aesb/errors.hpp"
#include "aesb/tensor.hpp"

namespace aesb {

enum class Mode { train, infer };

// ---------------------------------------------------------------------------
// Convolution

/// Square convolution, stride 1. Kernel 3 uses one pixel of zero padding so
/// spatial extents are preserved; kernel 1 uses none.
template <typename Scalar>
struct ConvParams {
  Index kernel = 1;
  Index in_channels = 0;
  Index out_channels = 0;
  /// (out, in, k, k) flattened row-major into out x (in*k*k).
  MatrixR<Scalar> weights;
  VectorX<Scalar> bias;

  ConvParams() = default;
  ConvParams(Index k, Index in, Index out)
      : kernel(k),
        in_channels(in),
        out_channels(out),
        weights(MatrixR<Scalar>::Zero(out, in * k * k)),
        bias(VectorX<Scalar>::Zero(out)) {
    validate();
  }

  Index padding() const { return kernel / 2; }
  Index patch_size() const { return in_channels * kernel * kernel; }

  void validate() const {
    if (kernel != 1 && kernel != 3) {
      throw ShapeError("convolution kernel must be 1 or 3, got " + std::to_string(kernel));
    }
    if (in_channels <= 0 || out_channels <= 0) {
      throw ShapeError("convolution channel counts must be positive");
    }
    if (weights.rows() != out_channels || weights.cols() != patch_size() ||
        bias.size() != out_channels) {
      throw ShapeError("convolution weight/bias extents do not match channel counts");
    }
  }
};

template <typename Scalar>
struct ConvGrads {
  Tensor<Scalar> input;  // empty when the input gradient was not requested
  MatrixR<Scalar> weights;
  VectorX<Scalar> bias;
};

namespace detail {

/// Unfolds one sample into a (in*k*k) x (h*w) patch matrix (zero padded).
template <typename Scalar>
void im2col(const Tensor<Scalar>& input, Index n, Index kernel, MatrixR<Scalar>& cols) {
  const Index channels = input.channels(), height = input.height(), width = input.width();
  const Index pad = kernel / 2;
  cols.setZero(channels * kernel * kernel, height * width);
  for (Index c = 0; c < channels; ++c) {
    const auto plane = input.plane(n, c);
    for (Index kh = 0; kh < kernel; ++kh) {
      for (Index kw = 0; kw < kernel; ++kw) {
        auto row = cols.row((c * kernel + kh) * kernel + kw);
        for (Index h = 0; h < height; ++h) {
          const Index ih = h + kh - pad;
          if (ih < 0 || ih >= height) continue;
          for (Index w = 0; w < width; ++w) {
            const Index iw = w + kw - pad;
            if (iw < 0 || iw >= width) continue;
            row[h * width + w] = plane(ih, iw);
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: accumulates patch gradients back into sample n.
template <typename Scalar>
void col2im(const MatrixR<Scalar>& cols, Index kernel, Tensor<Scalar>& grad, Index n) {
  const Index channels = grad.channels(), height = grad.height(), width = grad.width();
  const Index pad = kernel / 2;
  for (Index c = 0; c < channels; ++c) {
    auto plane = grad.plane(n, c);
    for (Index kh = 0; kh < kernel; ++kh) {
      for (Index kw = 0; kw < kernel; ++kw) {
        const auto row = cols.row((c * kernel + kh) * kernel + kw);
        for (Index h = 0; h < height; ++h) {
          const Index ih = h + kh - pad;
          if (ih < 0 || ih >= height) continue;
          for (Index w = 0; w < width; ++w) {
            const Index iw = w + kw - pad;
            if (iw < 0 || iw >= width) continue;
            plane(ih, iw) += row[h * width + w];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> conv2d_forward(const Tensor<Scalar>& input, const ConvParams<Scalar>& params) {
  params.validate();
  if (input.channels() != params.in_channels) {
    throw ShapeError("conv2d: input has " + std::to_string(input.channels()) +
                     " channels, expected " + std::to_string(params.in_channels));
  }
  if (input.height() < params.kernel || input.width() < params.kernel) {
    throw ShapeError("conv2d: spatial extent smaller than kernel");
  }
  input.require_finite("conv2d");

  Tensor<Scalar> output({input.batch(), params.out_channels, input.height(), input.width()});
  MatrixR<Scalar> cols;
  for (Index n = 0; n < input.batch(); ++n) {
    auto out = output.sample(n);
    if (params.kernel == 1) {
      out.noalias() = params.weights * input.sample(n);
    } else {
      detail::im2col(input, n, params.kernel, cols);
      out.noalias() = params.weights * cols;
    }
    out.colwise() += params.bias;
  }
  return output;
}

template <typename Scalar>
ConvGrads<Scalar> conv2d_backward(const Tensor<Scalar>& input, const ConvParams<Scalar>& params,
                                  const Tensor<Scalar>& upstream, bool need_input_grad = true) {
  params.validate();
  const Shape expected{input.batch(), params.out_channels, input.height(), input.width()};
  if (upstream.shape() != expected || input.channels() != params.in_channels) {
    throw ShapeError("conv2d_backward: upstream gradient shape " + to_string(upstream.shape()) +
                     " does not match forward output " + to_string(expected));
  }

  ConvGrads<Scalar> grads;
  grads.weights = MatrixR<Scalar>::Zero(params.out_channels, params.patch_size());
  grads.bias = VectorX<Scalar>::Zero(params.out_channels);
  if (need_input_grad) grads.input = Tensor<Scalar>(input.shape());

  MatrixR<Scalar> cols, col_grad;
  for (Index n = 0; n < input.batch(); ++n) {
    const auto dy = upstream.sample(n);
    grads.bias += dy.rowwise().sum();
    if (params.kernel == 1) {
      grads.weights.noalias() += dy * input.sample(n).transpose();
      if (need_input_grad) grads.input.sample(n).noalias() = params.weights.transpose() * dy;
    } else {
      detail::im2col(input, n, params.kernel, cols);
      grads.weights.noalias() += dy * cols.transpose();
      if (need_input_grad) {
        col_grad.noalias() = params.weights.transpose() * dy;
        detail::col2im(col_grad, params.kernel, grads.input, n);
      }
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Batch normalization

template <typename Scalar>
struct BatchNormParams {
  VectorX<Scalar> scale;
  VectorX<Scalar> shift;
  VectorX<Scalar> running_mean;
  VectorX<Scalar> running_var;
  Scalar epsilon = Scalar(1e-5);
  Scalar momentum = Scalar(0.1);

  BatchNormParams() = default;
  explicit BatchNormParams(Index channels)
      : scale(VectorX<Scalar>::Ones(channels)),
        shift(VectorX<Scalar>::Zero(channels)),
        running_mean(VectorX<Scalar>::Zero(channels)),
        running_var(VectorX<Scalar>::Ones(channels)) {}

  Index channels() const { return scale.size(); }

  void validate() const {
    const Index c = scale.size();
    if (shift.size() != c || running_mean.size() != c || running_var.size() != c) {
      throw ShapeError("batchnorm parameter extents disagree");
    }
    if (!(epsilon > 0)) throw ConfigError("batchnorm epsilon must be positive");
    if (!(momentum > 0 && momentum < 1)) throw ConfigError("batchnorm momentum must be in (0,1)");
    if ((running_var.array() < 0).any()) throw NumericError("batchnorm running variance < 0");
  }
};

template <typename Scalar>
struct BatchNormResult {
  Tensor<Scalar> output;
  /// Standardized input before the affine map; kept for the backward pass.
  Tensor<Scalar> normalized;
  VectorX<Scalar> inv_std;
  /// Running statistics after this call (unchanged in infer mode).
  VectorX<Scalar> running_mean;
  VectorX<Scalar> running_var;
  Mode mode = Mode::infer;
};

template <typename Scalar>
struct BatchNormGrads {
  Tensor<Scalar> input;
  VectorX<Scalar> scale;
  VectorX<Scalar> shift;
};

/// Train mode standardizes with biased batch statistics and folds the
/// unbiased batch variance into the running estimate; infer mode uses the
/// running statistics as-is.
template <typename Scalar>
BatchNormResult<Scalar> batchnorm_forward(const Tensor<Scalar>& input,
                                          const BatchNormParams<Scalar>& params, Mode mode) {
  params.validate();
  if (input.channels() != params.channels()) {
    throw ShapeError("batchnorm: input has " + std::to_string(input.channels()) +
                     " channels, parameters have " + std::to_string(params.channels()));
  }
  input.require_finite("batchnorm");

  const Index channels = input.channels();
  const Index per_channel = input.batch() * input.plane_size();

  BatchNormResult<Scalar> result;
  result.mode = mode;
  result.running_mean = params.running_mean;
  result.running_var = params.running_var;
  result.inv_std.resize(channels);
  VectorX<Scalar> mean(channels);

  if (mode == Mode::train) {
    if (per_channel <= 1) {
      throw NumericError("batchnorm: a single element per channel gives degenerate statistics");
    }
    for (Index c = 0; c < channels; ++c) {
      double sum = 0;
      for (Index n = 0; n < input.batch(); ++n) {
        sum += input.sample(n).row(c).template cast<double>().sum();
      }
      const double mu = sum / double(per_channel);
      double sq = 0;
      for (Index n = 0; n < input.batch(); ++n) {
        sq += (input.sample(n).row(c).template cast<double>().array() - mu).square().sum();
      }
      const double var = sq / double(per_channel);
      mean[c] = Scalar(mu);
      result.inv_std[c] = Scalar(1.0 / std::sqrt(var + double(params.epsilon)));
      const double unbiased = sq / double(per_channel - 1);
      result.running_mean[c] =
          Scalar((1.0 - params.momentum) * params.running_mean[c] + params.momentum * mu);
      result.running_var[c] =
          Scalar((1.0 - params.momentum) * params.running_var[c] + params.momentum * unbiased);
    }
  } else {
    mean = params.running_mean;
    result.inv_std = (params.running_var.array() + params.epsilon).rsqrt();
  }

  result.normalized = Tensor<Scalar>(input.shape());
  result.output = Tensor<Scalar>(input.shape());
  for (Index n = 0; n < input.batch(); ++n) {
    auto xhat = result.normalized.sample(n);
    xhat = ((input.sample(n).colwise() - mean).array().colwise() * result.inv_std.array())
               .matrix();
    result.output.sample(n) =
        ((xhat.array().colwise() * params.scale.array()).colwise() + params.shift.array())
            .matrix();
  }
  return result;
}

template <typename Scalar>
BatchNormGrads<Scalar> batchnorm_backward(const BatchNormResult<Scalar>& forward,
                                          const BatchNormParams<Scalar>& params,
                                          const Tensor<Scalar>& upstream) {
  const Tensor<Scalar>& xhat = forward.normalized;
  if (upstream.shape() != xhat.shape()) {
    throw ShapeError("batchnorm_backward: upstream gradient shape mismatch");
  }
  const Index channels = xhat.channels();
  const Scalar count = Scalar(xhat.batch() * xhat.plane_size());

  BatchNormGrads<Scalar> grads;
  grads.scale = VectorX<Scalar>::Zero(channels);
  grads.shift = VectorX<Scalar>::Zero(channels);
  for (Index n = 0; n < xhat.batch(); ++n) {
    const auto dy = upstream.sample(n).array();
    grads.shift += dy.rowwise().sum().matrix();
    grads.scale += (dy * xhat.sample(n).array()).rowwise().sum().matrix();
  }

  grads.input = Tensor<Scalar>(xhat.shape());
  const VectorX<Scalar> gain = (params.scale.array() * forward.inv_std.array()).matrix();
  if (forward.mode == Mode::infer) {
    for (Index n = 0; n < xhat.batch(); ++n) {
      grads.input.sample(n) = (upstream.sample(n).array().colwise() * gain.array()).matrix();
    }
    return grads;
  }
  // dx = scale*inv_std/M * (M*dy - sum(dy) - xhat*sum(dy*xhat))
  const VectorX<Scalar> mean_dy = grads.shift / count;
  const VectorX<Scalar> mean_dy_xhat = grads.scale / count;
  for (Index n = 0; n < xhat.batch(); ++n) {
    auto dx = grads.input.sample(n).array();
    dx = (upstream.sample(n).array().colwise() - mean_dy.array()) -
         (xhat.sample(n).array().colwise() * mean_dy_xhat.array());
    dx.colwise() *= gain.array();
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Self-gate and gated convolutional block

/// Elementwise b * sigmoid(b).
template <typename Scalar>
Tensor<Scalar> gate_forward(const Tensor<Scalar>& pre_gate) {
  Tensor<Scalar> out(pre_gate.shape());
  const auto b = pre_gate.values().array();
  out.values() = (b / (Scalar(1) + (-b).exp())).matrix();
  return out;
}

template <typename Scalar>
Tensor<Scalar> gate_backward(const Tensor<Scalar>& pre_gate, const Tensor<Scalar>& upstream) {
  if (upstream.shape() != pre_gate.shape()) {
    throw ShapeError("gate_backward: upstream gradient shape mismatch");
  }
  Tensor<Scalar> grad(pre_gate.shape());
  const auto b = pre_gate.values().array();
  const auto s = Scalar(1) / (Scalar(1) + (-b).exp());
  grad.values() = (upstream.values().array() * s * (Scalar(1) + b * (Scalar(1) - s))).matrix();
  return grad;
}

/// conv -> batchnorm -> (batchnorm output) * sigmoid(batchnorm output).
template <typename Scalar>
struct GatedBlockResult {
  Tensor<Scalar> out;
  /// Batchnorm output B, the quantity being gated.
  Tensor<Scalar> pre_gate;
  Tensor<Scalar> normalized;
  VectorX<Scalar> inv_std;
  VectorX<Scalar> running_mean;
  VectorX<Scalar> running_var;
  Mode mode = Mode::infer;
};

template <typename Scalar>
struct GatedBlockGrads {
  Tensor<Scalar> input;
  ConvParams<Scalar> conv;  // weights/bias hold gradients
  VectorX<Scalar> bn_scale;
  VectorX<Scalar> bn_shift;
};

template <typename Scalar>
GatedBlockResult<Scalar> gated_block_forward(const Tensor<Scalar>& input,
                                             const ConvParams<Scalar>& conv,
                                             const BatchNormParams<Scalar>& bn, Mode mode) {
  BatchNormResult<Scalar> normed = batchnorm_forward(conv2d_forward(input, conv), bn, mode);
  GatedBlockResult<Scalar> result;
  result.out = gate_forward(normed.output);
  result.pre_gate = std::move(normed.output);
  result.normalized = std::move(normed.normalized);
  result.inv_std = std::move(normed.inv_std);
  result.running_mean = std::move(normed.running_mean);
  result.running_var = std::move(normed.running_var);
  result.mode = mode;
  return result;
}

/// Consumes the cached forward state; `forward` is left in a moved-from state
/// for its large intermediates.
template <typename Scalar>
GatedBlockGrads<Scalar> gated_block_backward(const Tensor<Scalar>& input,
                                             const ConvParams<Scalar>& conv,
                                             const BatchNormParams<Scalar>& bn,
                                             GatedBlockResult<Scalar>& forward,
                                             const Tensor<Scalar>& upstream,
                                             bool need_input_grad = true) {
  Tensor<Scalar> d_pre_gate = gate_backward(forward.pre_gate, upstream);
  forward.pre_gate = Tensor<Scalar>();
  BatchNormResult<Scalar> normed;
  normed.normalized = std::move(forward.normalized);
  normed.inv_std = forward.inv_std;
  normed.mode = forward.mode;
  BatchNormGrads<Scalar> bn_grads = batchnorm_backward(normed, bn, d_pre_gate);
  d_pre_gate = Tensor<Scalar>();
  normed.normalized = Tensor<Scalar>();
  ConvGrads<Scalar> conv_grads = conv2d_backward(input, conv, bn_grads.input, need_input_grad);

  GatedBlockGrads<Scalar> grads;
  grads.input = std::move(conv_grads.input);
  grads.conv.kernel = conv.kernel;
  grads.conv.in_channels = conv.in_channels;
  grads.conv.out_channels = conv.out_channels;
  grads.conv.weights = std::move(conv_grads.weights);
  grads.conv.bias = std::move(conv_grads.bias);
  grads.bn_scale = std::move(bn_grads.scale);
  grads.bn_shift = std::move(bn_grads.shift);
  return grads;
}

// ---------------------------------------------------------------------------
// Max pooling (non-overlapping, no padding)

inline Index pooled_extent(Index in, Index kernel, Index stride) {
  return (in - kernel) / stride + 1;
}

template <typename Scalar>
struct PoolResult {
  Tensor<Scalar> output;
  /// Flat input index of the selected element for every output element.
  Eigen::Matrix<Index, Eigen::Dynamic, 1> argmax;
  Shape input_shape{0, 0, 0, 0};
};

/// Ties go to the first maximal element in row-major window order.
template <typename Scalar>
PoolResult<Scalar> maxpool_forward(const Tensor<Scalar>& input, Index kernel, Index stride) {
  if (kernel <= 0 || stride <= 0) throw ShapeError("maxpool: kernel and stride must be positive");
  if (kernel != stride) throw ShapeError("maxpool: only non-overlapping windows (kernel == stride)");
  if (kernel > input.height() || kernel > input.width()) {
    throw ShapeError("maxpool: kernel " + std::to_string(kernel) + " larger than input " +
                     std::to_string(input.height()) + "x" + std::to_string(input.width()));
  }
  const Index oh = pooled_extent(input.height(), kernel, stride);
  const Index ow = pooled_extent(input.width(), kernel, stride);
  PoolResult<Scalar> result;
  result.input_shape = input.shape();
  result.output = Tensor<Scalar>({input.batch(), input.channels(), oh, ow});
  result.argmax.resize(result.output.size());

  const Scalar* in = input.data();
  Scalar* out = result.output.data();
  Index o = 0;
  for (Index plane = 0; plane < input.batch() * input.channels(); ++plane) {
    const Index base = plane * input.plane_size();
    for (Index y = 0; y < oh; ++y) {
      for (Index x = 0; x < ow; ++x, ++o) {
        Index best = base + (y * stride) * input.width() + x * stride;
        Scalar best_value = in[best];
        for (Index ky = 0; ky < kernel; ++ky) {
          const Index row = base + (y * stride + ky) * input.width() + x * stride;
          for (Index kx = 0; kx < kernel; ++kx) {
            if (in[row + kx] > best_value) {
              best_value = in[row + kx];
              best = row + kx;
            }
          }
        }
        out[o] = best_value;
        result.argmax[o] = best;
      }
    }
  }
  return result;
}

template <typename Scalar>
Tensor<Scalar> maxpool_backward(const PoolResult<Scalar>& forward, const Tensor<Scalar>& upstream) {
  if (upstream.shape() != forward.output.shape()) {
    throw ShapeError("maxpool_backward: upstream gradient shape mismatch");
  }
  Tensor<Scalar> grad(forward.input_shape);
  for (Index i = 0; i < upstream.size(); ++i) grad.data()[forward.argmax[i]] += upstream.data()[i];
  return grad;
}

// ---------------------------------------------------------------------------
// Fused 1x1 gated block + max pool
//
// conv1x1 -> batchnorm -> self-gate -> maxpool(k, k) computed band by band
// without materializing the full-resolution activations. Train-mode batch
// statistics of the convolution output follow from the first and second
// moments of the input:
//   mean_c = w_c . mean_x + b_c,   var_c = w_c Cov_x w_c^T.
// Only parameter gradients are produced; the gated output reaches the loss
// through the pooled argmax positions alone, so the backward pass touches
// those positions plus the input moment matrices.

template <typename Scalar>
struct GatedPoolResult {
  Tensor<Scalar> pooled;
  /// Per pooled element: flat position within the sample plane, the
  /// batchnorm output B and standardized value at that position.
  Eigen::Matrix<Index, Eigen::Dynamic, 1> argmax;
  VectorX<Scalar> pre_gate;
  VectorX<Scalar> normalized;
  VectorX<double> mean;
  VectorX<double> inv_std;
  Eigen::MatrixXd input_second_moment;  // sum_p x x^T
  VectorX<double> input_sum;            // sum_p x
  Index positions = 0;                  // batch * height * width
  VectorX<Scalar> running_mean;
  VectorX<Scalar> running_var;
  Mode mode = Mode::infer;
};

template <typename Scalar>
GatedPoolResult<Scalar> gated_pool_forward(const Tensor<Scalar>& input,
                                           const ConvParams<Scalar>& conv,
                                           const BatchNormParams<Scalar>& bn, Mode mode,
                                           Index pool) {
  conv.validate();
  bn.validate();
  if (conv.kernel != 1) throw ShapeError("gated_pool_forward: only 1x1 convolutions are fused");
  if (input.channels() != conv.in_channels || bn.channels() != conv.out_channels) {
    throw ShapeError("gated_pool_forward: channel mismatch");
  }
  if (pool <= 0 || pool > input.height() || pool > input.width()) {
    throw ShapeError("gated_pool_forward: pooling window larger than input");
  }
  input.require_finite("gated_pool_forward");

  const Index n_batch = input.batch(), cin = conv.in_channels, cout = conv.out_channels;
  const Index width = input.width();
  const Index oh = pooled_extent(input.height(), pool, pool);
  const Index ow = pooled_extent(input.width(), pool, pool);

  GatedPoolResult<Scalar> r;
  r.mode = mode;
  r.positions = n_batch * input.plane_size();
  r.input_sum = VectorX<double>::Zero(cin);
  r.input_second_moment = Eigen::MatrixXd::Zero(cin, cin);
  for (Index n = 0; n < n_batch; ++n) {
    const Eigen::MatrixXd x = input.sample(n).template cast<double>();
    r.input_sum += x.rowwise().sum();
    r.input_second_moment.noalias() += x * x.transpose();
  }

  const Eigen::MatrixXd w = conv.weights.template cast<double>();
  const VectorX<double> b = conv.bias.template cast<double>();
  r.running_mean = bn.running_mean;
  r.running_var = bn.running_var;
  if (mode == Mode::train) {
    if (r.positions <= 1) {
      throw NumericError("batchnorm: a single element per channel gives degenerate statistics");
    }
    const double m = double(r.positions);
    const VectorX<double> mean_x = r.input_sum / m;
    const Eigen::MatrixXd cov = r.input_second_moment / m - mean_x * mean_x.transpose();
    r.mean = w * mean_x + b;
    const VectorX<double> var = (w * cov).cwiseProduct(w).rowwise().sum().cwiseMax(0.0);
    r.inv_std = (var.array() + double(bn.epsilon)).rsqrt().matrix();
    const double mom = double(bn.momentum);
    for (Index c = 0; c < cout; ++c) {
      r.running_mean[c] = Scalar((1.0 - mom) * double(bn.running_mean[c]) + mom * r.mean[c]);
      r.running_var[c] =
          Scalar((1.0 - mom) * double(bn.running_var[c]) + mom * var[c] * m / (m - 1.0));
    }
  } else {
    r.mean = bn.running_mean.template cast<double>();
    r.inv_std = (bn.running_var.template cast<double>().array() + double(bn.epsilon)).rsqrt().matrix();
  }

  // B = gain * (W x) + offset
  const VectorX<double> gain = bn.scale.template cast<double>().cwiseProduct(r.inv_std);
  const MatrixR<Scalar> a = (gain.asDiagonal() * w).template cast<Scalar>();
  const VectorX<Scalar> offset =
      (gain.cwiseProduct(b - r.mean) + bn.shift.template cast<double>()).template cast<Scalar>();
  const VectorX<Scalar> inv_std = r.inv_std.template cast<Scalar>();
  const VectorX<Scalar> centre = (b - r.mean).template cast<Scalar>();

  r.pooled = Tensor<Scalar>({n_batch, cout, oh, ow});
  const Index total = r.pooled.size();
  r.argmax.resize(total);
  r.pre_gate.resize(total);
  r.normalized.resize(total);

  MatrixR<Scalar> band_pre, band_out;
  for (Index n = 0; n < n_batch; ++n) {
    const auto x = input.sample(n);
    for (Index row = 0; row < oh; ++row) {
      const Index first = row * pool * width;
      band_pre.noalias() = a * x.middleCols(first, pool * width);
      band_pre.colwise() += offset;
      band_out = (band_pre.array() / (Scalar(1) + (-band_pre.array()).exp())).matrix();
      for (Index c = 0; c < cout; ++c) {
        const Scalar* g = band_out.row(c).data();
        for (Index col = 0; col < ow; ++col) {
          Index best = col * pool;
          Scalar best_value = g[best];
          for (Index dy = 0; dy < pool; ++dy) {
            const Index base = dy * width + col * pool;
            for (Index dx = 0; dx < pool; ++dx) {
              if (g[base + dx] > best_value) {
                best_value = g[base + dx];
                best = base + dx;
              }
            }
          }
          const Index o = ((n * cout + c) * oh + row) * ow + col;
          const Index pos = first + best;
          r.pooled.data()[o] = best_value;
          r.argmax[o] = pos;
          r.pre_gate[o] = band_pre(c, best);
          r.normalized[o] = inv_std[c] * (conv.weights.row(c).dot(x.col(pos)) + centre[c]);
        }
      }
    }
  }
  return r;
}

/// Parameter gradients of the fused block (no input gradient).
template <typename Scalar>
GatedBlockGrads<Scalar> gated_pool_backward(const Tensor<Scalar>& input,
                                            const ConvParams<Scalar>& conv,
                                            const BatchNormParams<Scalar>& bn,
                                            const GatedPoolResult<Scalar>& forward,
                                            const Tensor<Scalar>& upstream) {
  if (upstream.shape() != forward.pooled.shape()) {
    throw ShapeError("gated_pool_backward: upstream gradient shape mismatch");
  }
  const Index cin = conv.in_channels, cout = conv.out_channels;
  const Index per_channel = forward.pooled.plane_size();

  // dB at each argmax position, then per-channel sums.
  Eigen::MatrixXd weighted_x = Eigen::MatrixXd::Zero(cout, cin);  // sum dB * x^T
  VectorX<double> sum_db = VectorX<double>::Zero(cout);
  VectorX<double> sum_db_xhat = VectorX<double>::Zero(cout);
  for (Index n = 0; n < forward.pooled.batch(); ++n) {
    const auto x = input.sample(n);
    for (Index c = 0; c < cout; ++c) {
      const Index base = (n * cout + c) * per_channel;
      for (Index q = 0; q < per_channel; ++q) {
        const Index o = base + q;
        const double pre = double(forward.pre_gate[o]);
        const double s = 1.0 / (1.0 + std::exp(-pre));
        const double db = double(upstream.data()[o]) * s * (1.0 + pre * (1.0 - s));
        sum_db[c] += db;
        sum_db_xhat[c] += db * double(forward.normalized[o]);
        weighted_x.row(c) += db * x.col(forward.argmax[o]).template cast<double>().transpose();
      }
    }
  }

  GatedBlockGrads<Scalar> g;
  g.bn_shift = sum_db.template cast<Scalar>();
  g.bn_scale = sum_db_xhat.template cast<Scalar>();
  g.conv.kernel = conv.kernel;
  g.conv.in_channels = cin;
  g.conv.out_channels = cout;

  const VectorX<double> gain = bn.scale.template cast<double>().cwiseProduct(forward.inv_std);
  const Eigen::MatrixXd w = conv.weights.template cast<double>();
  Eigen::MatrixXd dw(cout, cin);
  VectorX<double> dbias(cout);
  if (forward.mode == Mode::train) {
    // dy = gain * (dB - mean(dB) - xhat * mean(dB * xhat)), summed against x.
    const double m = double(forward.positions);
    const Eigen::MatrixXd centred =
        forward.input_second_moment - forward.input_sum * forward.input_sum.transpose() / m;
    for (Index c = 0; c < cout; ++c) {
      const double m1 = sum_db[c] / m, m2 = sum_db_xhat[c] / m;
      const Eigen::RowVectorXd xhat_x = forward.inv_std[c] * (w.row(c) * centred);
      dw.row(c) = gain[c] * (weighted_x.row(c) - m1 * forward.input_sum.transpose() - m2 * xhat_x);
    }
    dbias.setZero();  // the batch mean absorbs the bias exactly
  } else {
    dw = gain.asDiagonal() * weighted_x;
    dbias = gain.cwiseProduct(sum_db);
  }
  g.conv.weights = dw.template cast<Scalar>();
  g.conv.bias = dbias.template cast<Scalar>();
  return g;
}

// ---------------------------------------------------------------------------
// Fully-connected layer

template <typename Scalar>
struct FcParams {
  MatrixR<Scalar> weights;  // outputs x inputs
  VectorX<Scalar> bias;

  FcParams() = default;
  FcParams(Index inputs, Index outputs)
      : weights(MatrixR<Scalar>::Zero(outputs, inputs)), bias(VectorX<Scalar>::Zero(outputs)) {}

  Index inputs() const { return weights.cols(); }
  Index outputs() const { return weights.rows(); }
};

template <typename Scalar>
struct FcGrads {
  MatrixR<Scalar> input;
  MatrixR<Scalar> weights;
  VectorX<Scalar> bias;
};

/// Rows of `input` are samples.
template <typename Scalar>
MatrixR<Scalar> fully_connected(const Eigen::Ref<const MatrixR<Scalar>>& input,
                                const FcParams<Scalar>& params) {
  if (input.cols() != params.inputs()) {
    throw ShapeError("fully_connected: input length " + std::to_string(input.cols()) +
                     " does not match weight input extent " + std::to_string(params.inputs()));
  }
  if (params.bias.size() != params.outputs()) throw ShapeError("fully_connected: bias extent");
  MatrixR<Scalar> out = input * params.weights.transpose();
  out.rowwise() += params.bias.transpose();
  return out;
}

template <typename Scalar>
FcGrads<Scalar> fully_connected_backward(const Eigen::Ref<const MatrixR<Scalar>>& input,
                                         const FcParams<Scalar>& params,
                                         const Eigen::Ref<const MatrixR<Scalar>>& upstream) {
  if (upstream.rows() != input.rows() || upstream.cols() != params.outputs() ||
      input.cols() != params.inputs()) {
    throw ShapeError("fully_connected_backward: shape mismatch");
  }
  FcGrads<Scalar> grads;
  grads.input = upstream * params.weights;
  grads.weights = upstream.transpose() * input;
  grads.bias = upstream.colwise().sum().transpose();
  return grads;
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy

template <typename Scalar>
VectorX<Scalar> softmax(const Eigen::Ref<const VectorX<Scalar>>& logits) {
  const Scalar peak = logits.maxCoeff();
  VectorX<Scalar> p = (logits.array() - peak).exp().matrix();
  p /= p.sum();
  return p;
}

template <typename Scalar>
struct SoftmaxCrossEntropy {
  Scalar loss = 0;
  VectorX<Scalar> probs;
  /// probs - onehot(label)
  VectorX<Scalar> logit_grad;
};

template <typename Scalar>
SoftmaxCrossEntropy<Scalar> softmax_cross_entropy(const Eigen::Ref<const VectorX<Scalar>>& logits,
                                                  Index label) {
  if (label < 0 || label >= logits.size()) {
    throw DataError("softmax_cross_entropy: label " + std::to_string(label) + " outside [0, " +
                    std::to_string(logits.size()) + ")");
  }
  SoftmaxCrossEntropy<Scalar> r;
  const Scalar peak = logits.maxCoeff();
  const VectorX<Scalar> shifted = (logits.array() - peak).matrix();
  const Scalar log_norm = std::log(shifted.array().exp().sum());
  r.probs = (shifted.array() - log_norm).exp().matrix();
  r.loss = log_norm - shifted[label];
  r.logit_grad = r.probs;
  r.logit_grad[label] -= Scalar(1);
  return r;
}

template <typename Scalar>
struct BatchCrossEntropy {
  /// Mean over the batch.
  Scalar loss = 0;
  MatrixR<Scalar> probs;
  /// Gradient of the mean loss: (probs - onehot) / batch.
  MatrixR<Scalar> logit_grad;
};

template <typename Scalar>
BatchCrossEntropy<Scalar> batch_cross_entropy(const Eigen::Ref<const MatrixR<Scalar>>& logits,
                                              std::span<const Index> labels) {
  if (Index(labels.size()) != logits.rows()) {
    throw ShapeError("batch_cross_entropy: label count does not match batch");
  }
  BatchCrossEntropy<Scalar> r;
  r.probs.resize(logits.rows(), logits.cols());
  r.logit_grad.resize(logits.rows(), logits.cols());
  double total = 0;
  const Scalar inv_batch = Scalar(1) / Scalar(logits.rows());
  for (Index i = 0; i < logits.rows(); ++i) {
    const VectorX<Scalar> row = logits.row(i).transpose();
    SoftmaxCrossEntropy<Scalar> s = softmax_cross_entropy<Scalar>(row, labels[i]);
    total += double(s.loss);
    r.probs.row(i) = s.probs.transpose();
    r.logit_grad.row(i) = s.logit_grad.transpose() * inv_batch;
  }
  r.loss = Scalar(total / double(logits.rows()));
  return r;
}

// ---------------------------------------------------------------------------
// Momentum SGD

template <typename Scalar>
using ParamView = Eigen::Map<VectorX<Scalar>>;

template <typename Scalar>
using ConstParamView = Eigen::Map<const VectorX<Scalar>>;

template <typename Scalar>
struct SgdState {
  Scalar learning_rate = Scalar(0.01);
  Scalar momentum_coef = Scalar(0.9);
  /// One entry per parameter block; empty until the first step.
  std::vector<VectorX<Scalar>> velocity;
  std::uint64_t seed = 0;
};

/// velocity <- momentum * velocity + grad;  param <- param - lr * velocity.
template <typename Scalar>
void sgd_step(std::span<ParamView<Scalar>> params, std::span<const ConstParamView<Scalar>> grads,
              SgdState<Scalar>& state) {
  if (!(state.learning_rate > 0)) throw ConfigError("sgd: learning rate must be positive");
  if (!(state.momentum_coef >= 0 && state.momentum_coef < 1)) {
    throw ConfigError("sgd: momentum must be in [0,1)");
  }
  if (params.size() != grads.size()) throw ShapeError("sgd: parameter/gradient count mismatch");
  if (state.velocity.empty()) {
    for (const auto& p : params) state.velocity.push_back(VectorX<Scalar>::Zero(p.size()));
  }
  if (state.velocity.size() != params.size()) throw ShapeError("sgd: velocity count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].size() || state.velocity[i].size() != params[i].size()) {
      throw ShapeError("sgd: block " + std::to_string(i) + " extent mismatch");
    }
    state.velocity[i] = state.momentum_coef * state.velocity[i] + grads[i];
    params[i] -= state.learning_rate * state.velocity[i];
  }
}

}  // namespace aesb
