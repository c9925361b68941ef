#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "aesb/tensor.hpp"

namespace aesb::testing {

template <typename Scalar>
Tensor<Scalar> random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0,
                             double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<Scalar> t(shape);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = Scalar(u(rng));
  return t;
}

template <typename Derived>
void fill_random(Eigen::DenseBase<Derived>& m, std::uint64_t seed, double lo = -1.0,
                 double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  for (Index i = 0; i < m.size(); ++i) m.derived().data()[i] = typename Derived::Scalar(u(rng));
}

/// Central differences of `loss` with respect to every entry of `values`.
template <typename Scalar>
VectorX<double> central_differences(Scalar* values, Index count, double h,
                                    const std::function<double()>& loss) {
  VectorX<double> g(count);
  for (Index i = 0; i < count; ++i) {
    const Scalar saved = values[i];
    values[i] = Scalar(double(saved) + h);
    const double up = loss();
    values[i] = Scalar(double(saved) - h);
    const double down = loss();
    values[i] = saved;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// Values in storage order (what central_differences walks).
template <typename Derived>
VectorX<typename Derived::Scalar> flat(const Eigen::PlainObjectBase<Derived>& m) {
  return Eigen::Map<const VectorX<typename Derived::Scalar>>(m.data(), m.size());
}

/// Norm-wise relative error ||a - b|| / max(||b||, floor).
template <typename A, typename B>
double relative_error(const A& analytic, const B& numeric, double floor = 1e-12) {
  const VectorX<double> a = analytic.template cast<double>();
  const VectorX<double> b = numeric.template cast<double>();
  return (a - b).norm() / std::max(b.norm(), floor);
}

template <typename Scalar, typename Derived>
double dot(const Tensor<Scalar>& t, const Eigen::MatrixBase<Derived>& w) {
  return t.values().template cast<double>().dot(w.template cast<double>());
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("aesb_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace aesb::testing
