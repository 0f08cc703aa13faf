#pragma once

#include "uqaug/common.hpp"
#include "uqaug/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace uqaug {

enum class Likelihood { Gaussian, Laplace };

std::string to_string(Likelihood l);
Likelihood parse_likelihood(const std::string& s);

inline constexpr double kLogScaleMin = -10.0;
inline constexpr double kLogScaleMax = 10.0;

template <typename Scalar>
struct LossWithGrad {
  double value = 0.0;
  Map2<Scalar> d_pred;
  Map2<Scalar> d_scale;  // wrt log_scale, or wrt the raw variance for the raw form
};

// Mean over entries of
//   gaussian: 0.5 * exp(-s) * r^2 + 0.5 * s      (s = log sigma^2)
//   laplace:  exp(-s) * |r| + s                  (s = log b)
// with r = target - pred.
template <typename DP, typename DS, typename DT>
LossWithGrad<typename DP::Scalar> hetero_regression_loss(const Eigen::MatrixBase<DP>& pred,
                                                         const Eigen::MatrixBase<DS>& log_scale,
                                                         const Eigen::MatrixBase<DT>& target,
                                                         Likelihood likelihood) {
  using Scalar = typename DP::Scalar;
  require_same_shape(pred, log_scale, "hetero_regression_loss");
  require_same_shape(pred, target, "hetero_regression_loss");
  require_finite(pred, "hetero_regression_loss pred");
  require_finite(log_scale, "hetero_regression_loss log_scale");
  require_finite(target, "hetero_regression_loss target");
  const auto rows = pred.rows(), cols = pred.cols();
  const double inv_n = 1.0 / static_cast<double>(pred.size());
  LossWithGrad<Scalar> out{0.0, Map2<Scalar>(rows, cols), Map2<Scalar>(rows, cols)};
  double acc = 0.0;
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      const double r = static_cast<double>(target(i, j)) - static_cast<double>(pred(i, j));
      const double s = static_cast<double>(log_scale(i, j));
      const double e = std::exp(-s);
      if (likelihood == Likelihood::Gaussian) {
        acc += 0.5 * e * r * r + 0.5 * s;
        out.d_pred(i, j) = static_cast<Scalar>(-e * r * inv_n);
        out.d_scale(i, j) = static_cast<Scalar>((0.5 - 0.5 * e * r * r) * inv_n);
      } else {
        const double ar = std::abs(r);
        acc += e * ar + s;
        const double sign = r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0);
        out.d_pred(i, j) = static_cast<Scalar>(-e * sign * inv_n);
        out.d_scale(i, j) = static_cast<Scalar>((1.0 - e * ar) * inv_n);
      }
    }
  }
  out.value = acc * inv_n;
  return out;
}

// Same objective parameterised directly by a positive map: sigma^2 for gaussian,
// the Laplace scale b for laplace. Equals the log form at s = log(variance).
template <typename DP, typename DV, typename DT>
LossWithGrad<typename DP::Scalar> hetero_regression_loss_raw_variance(
    const Eigen::MatrixBase<DP>& pred, const Eigen::MatrixBase<DV>& variance,
    const Eigen::MatrixBase<DT>& target, Likelihood likelihood) {
  using Scalar = typename DP::Scalar;
  require_same_shape(pred, variance, "hetero_regression_loss_raw_variance");
  require_same_shape(pred, target, "hetero_regression_loss_raw_variance");
  require_finite(variance, "hetero_regression_loss_raw_variance variance");
  if (!(variance.array() > Scalar(0)).all()) {
    throw NumericError("hetero_regression_loss_raw_variance: variance must be strictly positive");
  }
  require_finite(pred, "hetero_regression_loss_raw_variance pred");
  require_finite(target, "hetero_regression_loss_raw_variance target");
  const auto rows = pred.rows(), cols = pred.cols();
  const double inv_n = 1.0 / static_cast<double>(pred.size());
  LossWithGrad<Scalar> out{0.0, Map2<Scalar>(rows, cols), Map2<Scalar>(rows, cols)};
  double acc = 0.0;
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      const double r = static_cast<double>(target(i, j)) - static_cast<double>(pred(i, j));
      const double v = static_cast<double>(variance(i, j));
      if (likelihood == Likelihood::Gaussian) {
        acc += 0.5 * r * r / v + 0.5 * std::log(v);
        out.d_pred(i, j) = static_cast<Scalar>(-r / v * inv_n);
        out.d_scale(i, j) = static_cast<Scalar>((0.5 / v - 0.5 * r * r / (v * v)) * inv_n);
      } else {
        const double ar = std::abs(r);
        acc += ar / v + std::log(v);
        const double sign = r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0);
        out.d_pred(i, j) = static_cast<Scalar>(-sign / v * inv_n);
        out.d_scale(i, j) = static_cast<Scalar>((1.0 / v - ar / (v * v)) * inv_n);
      }
    }
  }
  out.value = acc * inv_n;
  return out;
}

// Monte Carlo softmax over Gaussian-perturbed logits. Inputs are k x N (one column per
// pixel); logits are sampled as z = logits + exp(s / 2) * eps with eps ~ N(0, I).
template <typename Scalar>
class SampledSoftmax {
 public:
  SampledSoftmax(const Tensor<Scalar>& logits, const Tensor<Scalar>& log_scale, int n_mc,
                 std::uint64_t seed, bool keep_for_backward = true,
                 double log_scale_min = kLogScaleMin, double log_scale_max = kLogScaleMax)
      : logits_(logits), n_mc_(n_mc), keep_(keep_for_backward) {
    require_same_shape(logits, log_scale, "SampledSoftmax");
    if (n_mc < 1) throw ConfigError("SampledSoftmax: n_mc must be >= 1");
    if (logits.rows() < 2) throw BoundsError("SampledSoftmax: need k >= 2 classes");
    require_finite(logits, "SampledSoftmax logits");
    if (log_scale.array().isNaN().any()) throw NumericError("SampledSoftmax: NaN log_scale");
    const auto k = logits.rows(), n = logits.cols();
    sigma_.resize(k, n);
    gate_.resize(k, n);
    for (Eigen::Index i = 0; i < log_scale.size(); ++i) {
      const double s = static_cast<double>(log_scale.data()[i]);
      const double sc = std::clamp(s, log_scale_min, log_scale_max);
      sigma_.data()[i] = static_cast<Scalar>(std::exp(0.5 * sc));
      gate_.data()[i] = (s >= log_scale_min && s <= log_scale_max) ? Scalar(1) : Scalar(0);
    }
    mean_ = Tensor<Scalar>::Zero(k, n);
    var_ = Tensor<Scalar>::Zero(k, n);
    if (keep_) eps_.resize(static_cast<std::size_t>(k * n * n_mc));
    Rng rng(seed);
    std::vector<double> z(static_cast<std::size_t>(k)), p(static_cast<std::size_t>(k)),
        sum(static_cast<std::size_t>(k)), sum_sq(static_cast<std::size_t>(k));
    for (Eigen::Index col = 0; col < n; ++col) {
      std::fill(sum.begin(), sum.end(), 0.0);
      std::fill(sum_sq.begin(), sum_sq.end(), 0.0);
      for (int m = 0; m < n_mc; ++m) {
        for (Eigen::Index j = 0; j < k; ++j) {
          const double e = rng.normal();
          if (keep_) eps_[index(col, m, j)] = static_cast<Scalar>(e);
          z[static_cast<std::size_t>(j)] =
              static_cast<double>(logits(j, col)) + static_cast<double>(sigma_(j, col)) * e;
        }
        softmax(z, p);
        for (std::size_t j = 0; j < p.size(); ++j) {
          sum[j] += p[j];
          sum_sq[j] += p[j] * p[j];
        }
      }
      for (Eigen::Index j = 0; j < k; ++j) {
        const double mu = sum[static_cast<std::size_t>(j)] / n_mc;
        mean_(j, col) = static_cast<Scalar>(mu);
        var_(j, col) = static_cast<Scalar>(std::max(0.0, sum_sq[static_cast<std::size_t>(j)] / n_mc - mu * mu));
      }
    }
  }

  // Per-pixel class probabilities averaged over the logit samples (k x N).
  const Tensor<Scalar>& mean_probs() const { return mean_; }
  // Per-pixel population variance of the sampled probabilities (k x N).
  const Tensor<Scalar>& prob_variance() const { return var_; }

  // Chain rule from d(loss)/d(mean_probs) to the logits and log-scales.
  void backward(const Tensor<Scalar>& d_mean, Tensor<Scalar>& d_logits, Tensor<Scalar>& d_log_scale) const {
    if (!keep_) throw ConfigError("SampledSoftmax: constructed without backward support");
    require_same_shape(d_mean, mean_, "SampledSoftmax::backward");
    const auto k = logits_.rows(), n = logits_.cols();
    d_logits = Tensor<Scalar>::Zero(k, n);
    d_log_scale = Tensor<Scalar>::Zero(k, n);
    std::vector<double> z(static_cast<std::size_t>(k)), p(static_cast<std::size_t>(k));
    const double inv_m = 1.0 / n_mc_;
    for (Eigen::Index col = 0; col < n; ++col) {
      for (int m = 0; m < n_mc_; ++m) {
        for (Eigen::Index j = 0; j < k; ++j) {
          z[static_cast<std::size_t>(j)] = static_cast<double>(logits_(j, col)) +
                                           static_cast<double>(sigma_(j, col)) *
                                               static_cast<double>(eps_[index(col, m, j)]);
        }
        softmax(z, p);
        double gp = 0.0;
        for (Eigen::Index c = 0; c < k; ++c) gp += static_cast<double>(d_mean(c, col)) * p[static_cast<std::size_t>(c)];
        for (Eigen::Index j = 0; j < k; ++j) {
          const double dz = inv_m * p[static_cast<std::size_t>(j)] * (static_cast<double>(d_mean(j, col)) - gp);
          d_logits(j, col) += static_cast<Scalar>(dz);
          d_log_scale(j, col) += static_cast<Scalar>(dz * 0.5 * static_cast<double>(sigma_(j, col)) *
                                                     static_cast<double>(eps_[index(col, m, j)]));
        }
      }
    }
    d_log_scale.array() *= gate_.array();
  }

  static void softmax(const std::vector<double>& z, std::vector<double>& p) {
    const double mx = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) {
      p[j] = std::exp(z[j] - mx);
      total += p[j];
    }
    for (double& v : p) v /= total;
  }

 private:
  std::size_t index(Eigen::Index col, int m, Eigen::Index j) const {
    return static_cast<std::size_t>((col * n_mc_ + m) * logits_.rows() + j);
  }

  Tensor<Scalar> logits_;
  Tensor<Scalar> sigma_;
  Tensor<Scalar> gate_;
  Tensor<Scalar> mean_;
  Tensor<Scalar> var_;
  std::vector<Scalar> eps_;
  int n_mc_;
  bool keep_;
};

// Labels as a flat vector aligned with the pixel columns of a k x N tensor.
template <typename DerivedLabels>
std::vector<int> flatten_labels(const Eigen::DenseBase<DerivedLabels>& labels) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(labels.size()));
  for (Eigen::Index i = 0; i < labels.rows(); ++i) {
    for (Eigen::Index j = 0; j < labels.cols(); ++j) out.push_back(static_cast<int>(labels(i, j)));
  }
  return out;
}

// Mean over pixels of -log of the MC-averaged softmax probability of the target class.
template <typename Scalar>
double sampled_cross_entropy(const Tensor<Scalar>& mean_probs, const std::vector<int>& target,
                             Tensor<Scalar>* d_mean = nullptr) {
  const auto k = mean_probs.rows(), n = mean_probs.cols();
  if (static_cast<Eigen::Index>(target.size()) != n) throw BoundsError("sampled_cross_entropy: label count mismatch");
  if (d_mean) *d_mean = Tensor<Scalar>::Zero(k, n);
  double acc = 0.0;
  const double floor = 1e-12;
  for (Eigen::Index col = 0; col < n; ++col) {
    const int t = target[static_cast<std::size_t>(col)];
    if (t < 0 || t >= k) throw BoundsError("sampled_cross_entropy: label >= k");
    const double p = std::max(static_cast<double>(mean_probs(t, col)), floor);
    acc -= std::log(p);
    if (d_mean) (*d_mean)(t, col) = static_cast<Scalar>(-1.0 / (p * static_cast<double>(n)));
  }
  return acc / static_cast<double>(n);
}

template <typename Scalar>
double logit_sampling_classification_loss(const Tensor<Scalar>& logits, const Tensor<Scalar>& log_scale,
                                          const std::vector<int>& target, int n_mc, std::uint64_t seed) {
  for (int t : target) {
    if (t < 0 || t >= logits.rows()) throw BoundsError("logit_sampling_classification_loss: label >= k");
  }
  SampledSoftmax<Scalar> sampler(logits, log_scale, n_mc, seed, false);
  return sampled_cross_entropy(sampler.mean_probs(), target);
}

// 1 - (2 sum(p t) + smooth) / (sum p + sum t + smooth), with its gradient wrt p.
template <typename DP, typename DT>
LossWithGrad<typename DP::Scalar> dice_loss(const Eigen::MatrixBase<DP>& probs,
                                            const Eigen::MatrixBase<DT>& target, double smooth = 1.0) {
  using Scalar = typename DP::Scalar;
  require_same_shape(probs, target, "dice_loss");
  if (!(smooth > 0.0)) throw ConfigError("dice_loss: smooth must be > 0");
  if (!(probs.array() >= Scalar(0) && probs.array() <= Scalar(1)).all()) {
    throw NumericError("dice_loss: probabilities outside [0, 1]");
  }
  double inter = 0.0, sp = 0.0, st = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    for (Eigen::Index j = 0; j < probs.cols(); ++j) {
      const double p = static_cast<double>(probs(i, j));
      const double t = static_cast<double>(target(i, j));
      inter += p * t;
      sp += p;
      st += t;
    }
  }
  const double num = 2.0 * inter + smooth;
  const double den = sp + st + smooth;
  LossWithGrad<Scalar> out{1.0 - num / den, Map2<Scalar>(probs.rows(), probs.cols()), Map2<Scalar>()};
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    for (Eigen::Index j = 0; j < probs.cols(); ++j) {
      const double t = static_cast<double>(target(i, j));
      out.d_pred(i, j) = static_cast<Scalar>(-(2.0 * t * den - num) / (den * den));
    }
  }
  return out;
}

struct SegmentationObjectiveConfig {
  double ce_weight = 1.0;  // lambda in dice + lambda * sampled CE
  double dice_smooth = 1.0;
  int n_mc = 10;
  int foreground_class = 1;
};

template <typename Scalar>
struct SegmentationObjective {
  double value = 0.0;
  double dice = 0.0;
  double cross_entropy = 0.0;
  Tensor<Scalar> d_logits;
  Tensor<Scalar> d_log_scale;
};

// Dice on the MC-averaged foreground probability plus weighted sampled cross-entropy.
template <typename Scalar>
SegmentationObjective<Scalar> segmentation_objective(const Tensor<Scalar>& logits,
                                                     const Tensor<Scalar>& log_scale,
                                                     const std::vector<int>& target,
                                                     const SegmentationObjectiveConfig& cfg,
                                                     std::uint64_t seed) {
  const auto k = logits.rows(), n = logits.cols();
  if (cfg.foreground_class < 0 || cfg.foreground_class >= k) throw BoundsError("segmentation_objective: bad foreground class");
  SampledSoftmax<Scalar> sampler(logits, log_scale, cfg.n_mc, seed, true);
  Tensor<Scalar> d_mean;
  SegmentationObjective<Scalar> out;
  out.cross_entropy = sampled_cross_entropy(sampler.mean_probs(), target, &d_mean);
  d_mean *= static_cast<Scalar>(cfg.ce_weight);

  Map2<Scalar> fg(1, n), t(1, n);
  for (Eigen::Index col = 0; col < n; ++col) {
    fg(0, col) = std::clamp(sampler.mean_probs()(cfg.foreground_class, col), Scalar(0), Scalar(1));
    t(0, col) = target[static_cast<std::size_t>(col)] == cfg.foreground_class ? Scalar(1) : Scalar(0);
  }
  const auto dice = dice_loss(fg, t, cfg.dice_smooth);
  out.dice = dice.value;
  d_mean.row(cfg.foreground_class) += dice.d_pred.row(0);
  out.value = dice.value + cfg.ce_weight * out.cross_entropy;
  sampler.backward(d_mean, out.d_logits, out.d_log_scale);
  return out;
}

}  // namespace uqaug
