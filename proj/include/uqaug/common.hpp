#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace uqaug {

// Row-major so that a map's storage order matches the on-disk array format.
template <typename Scalar>
using Map2 = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using FloatMap = Map2<float>;
using DoubleMap = Map2<double>;
using ByteMap = Map2<std::uint8_t>;

// Channel-major activation: one row per channel, one column per pixel (y * width + x).
template <typename Scalar>
using Tensor = Map2<Scalar>;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DegenerateInputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct BoundsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require_same_shape(Eigen::Index rows_a, Eigen::Index cols_a, Eigen::Index rows_b,
                               Eigen::Index cols_b, std::string_view what) {
  if (rows_a != rows_b || cols_a != cols_b) {
    throw BoundsError(std::string(what) + ": shape mismatch (" + std::to_string(rows_a) + "x" +
                      std::to_string(cols_a) + " vs " + std::to_string(rows_b) + "x" +
                      std::to_string(cols_b) + ")");
  }
}

template <typename A, typename B>
void require_same_shape(const Eigen::DenseBase<A>& a, const Eigen::DenseBase<B>& b,
                        std::string_view what) {
  require_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), what);
}

template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& m, std::string_view what) {
  if (!m.derived().array().isFinite().all()) {
    throw NumericError(std::string(what) + ": non-finite value");
  }
}

}  // namespace uqaug
