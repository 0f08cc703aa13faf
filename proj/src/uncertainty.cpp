#include "uqaug/uncertainty.hpp"

#include "uqaug/arr_io.hpp"
#include "uqaug/rng.hpp"

#include <cmath>

namespace uqaug {

void McSampleStack::validate() const {
  if (T() < 2) throw ConfigError("McSampleStack: need T >= 2 passes");
  if (scales.size() != preds.size()) throw BoundsError("McSampleStack: preds/scales count mismatch");
  if (task == Task::Segmentation && prob_var.size() != preds.size()) {
    throw BoundsError("McSampleStack: prob_var count mismatch");
  }
  const Eigen::Index n = static_cast<Eigen::Index>(height) * width;
  auto check = [&](const DoubleMap& m) {
    if (m.rows() != channels || m.cols() != n) throw BoundsError("McSampleStack: entry shape mismatch");
  };
  for (int t = 0; t < T(); ++t) {
    check(preds[static_cast<std::size_t>(t)]);
    check(scales[static_cast<std::size_t>(t)]);
    if ((scales[static_cast<std::size_t>(t)].array() < 0.0).any()) {
      throw NumericError("McSampleStack: negative scale");
    }
    if (task == Task::Segmentation) check(prob_var[static_cast<std::size_t>(t)]);
  }
}

McSampleStack mc_sample(const Model& model, const Image& image, int T, std::uint64_t seed,
                        const McOptions& options) {
  if (T < 2) throw ConfigError("mc_sample: T must be >= 2");
  const auto& cfg = model.config();
  McSampleStack stack;
  stack.task = cfg.task;
  stack.height = image.height();
  stack.width = image.width();
  stack.channels = cfg.out_channels_pred;
  for (int t = 0; t < T; ++t) {
    const auto tt = static_cast<std::uint64_t>(t);
    const auto out = model.forward(image.pixels, DropoutMode::Sample, derive_seed(seed, {tt, 0}));
    require_finite(out.pred, "mc_sample prediction");
    if (cfg.task == Task::Reconstruction) {
      stack.preds.push_back(out.pred.cast<double>());
      const DoubleMap s = out.log_scale.cast<double>();
      stack.scales.push_back(options.likelihood == Likelihood::Gaussian ? DoubleMap((0.5 * s.array()).exp())
                                                                        : DoubleMap(s.array().exp()));
    } else {
      const DoubleMap logits = out.pred.cast<double>();
      const DoubleMap log_scale = out.log_scale.cast<double>();
      SampledSoftmax<double> sampler(logits, log_scale, options.n_mc, derive_seed(seed, {tt, 1}), false);
      stack.preds.push_back(sampler.mean_probs());
      stack.scales.push_back((0.5 * log_scale.array()).exp());
      stack.prob_var.push_back(sampler.prob_variance());
    }
  }
  return stack;
}

UncertaintyMaps decompose_regression(const McSampleStack& stack) {
  stack.validate();
  const int T = stack.T();
  const auto rows = stack.channels;
  const auto cols = static_cast<Eigen::Index>(stack.height) * stack.width;
  UncertaintyMaps maps;
  maps.epistemic = population_variance(T, rows, cols, [&](int t) -> const DoubleMap& {
    return stack.preds[static_cast<std::size_t>(t)];
  });
  maps.aleatoric = DoubleMap::Zero(rows, cols);
  for (const auto& s : stack.scales) maps.aleatoric.array() += s.array().square();
  maps.aleatoric /= static_cast<double>(T);
  maps.predictive = maps.epistemic + maps.aleatoric;
  return maps;
}

DoubleMap epistemic_mean_of_squares(const McSampleStack& stack, int channel) {
  stack.validate();
  const auto cols = static_cast<Eigen::Index>(stack.height) * stack.width;
  DoubleMap sum = DoubleMap::Zero(1, cols), sum_sq = DoubleMap::Zero(1, cols);
  for (const auto& p : stack.preds) {
    sum += p.row(channel);
    sum_sq.array() += p.row(channel).array().square();
  }
  const double T = stack.T();
  return (sum_sq.array() / T - (sum.array() / T).square()).matrix();
}

UncertaintyMaps decompose_segmentation(const McSampleStack& stack, int class_of_interest) {
  if (stack.task != Task::Segmentation) throw ConfigError("decompose_segmentation: not a segmentation stack");
  stack.validate();
  if (class_of_interest < 0 || class_of_interest >= stack.channels) {
    throw BoundsError("decompose_segmentation: class_of_interest >= k");
  }
  const int T = stack.T();
  const auto cols = static_cast<Eigen::Index>(stack.height) * stack.width;
  UncertaintyMaps maps;
  maps.epistemic = population_variance(T, 1, cols, [&](int t) -> DoubleMap {
    return stack.preds[static_cast<std::size_t>(t)].row(class_of_interest);
  });
  maps.aleatoric = DoubleMap::Zero(1, cols);
  for (const auto& v : stack.prob_var) maps.aleatoric += v.row(class_of_interest);
  maps.aleatoric /= static_cast<double>(T);
  maps.predictive = maps.epistemic + maps.aleatoric;
  return maps;
}

DoubleMap mean_class_probs(const McSampleStack& stack) {
  stack.validate();
  DoubleMap mean = DoubleMap::Zero(stack.channels, static_cast<Eigen::Index>(stack.height) * stack.width);
  for (const auto& p : stack.preds) mean += p;
  return mean / static_cast<double>(stack.T());
}

DoubleMap entropy_map(const DoubleMap& mean_probs) {
  if (!(mean_probs.array() >= 0.0 && mean_probs.array() <= 1.0).all()) {
    throw NumericError("entropy_map: probabilities outside [0, 1]");
  }
  if (((mean_probs.colwise().sum().array() - 1.0).abs() > 1e-6).any()) {
    throw NumericError("entropy_map: probabilities do not sum to 1");
  }
  DoubleMap h = DoubleMap::Zero(1, mean_probs.cols());
  for (Eigen::Index col = 0; col < mean_probs.cols(); ++col) {
    double acc = 0.0;
    for (Eigen::Index c = 0; c < mean_probs.rows(); ++c) {
      const double p = mean_probs(c, col);
      if (p > 0.0) acc -= p * std::log(p);
    }
    h(0, col) = acc;
  }
  return h;
}

double aggregate_region(const DoubleMap& map, const ByteMap& region) {
  if (map.size() != region.size()) throw BoundsError("aggregate_region: shape mismatch");
  double sum = 0.0;
  Eigen::Index n = 0;
  for (Eigen::Index i = 0; i < map.size(); ++i) {
    if (region.data()[i]) {
      sum += map.data()[i];
      ++n;
    }
  }
  if (n == 0) throw DegenerateInputError("aggregate_region: empty region");
  return sum / static_cast<double>(n);
}

DoubleMap as_image(const DoubleMap& row, int height, int width) {
  if (row.size() != static_cast<Eigen::Index>(height) * width) throw BoundsError("as_image: size mismatch");
  return Eigen::Map<const DoubleMap>(row.data(), height, width);
}

void write_uncertainty_maps(const std::filesystem::path& dir, const std::string& prefix,
                            const UncertaintyMaps& maps, int height, int width) {
  write_arr(dir / (prefix + "_epi.arr"), FloatMap(as_image(maps.epistemic, height, width).cast<float>()));
  write_arr(dir / (prefix + "_ale.arr"), FloatMap(as_image(maps.aleatoric, height, width).cast<float>()));
  write_arr(dir / (prefix + "_pred.arr"), FloatMap(as_image(maps.predictive, height, width).cast<float>()));
}

UncertaintyMaps read_uncertainty_maps(const std::filesystem::path& dir, const std::string& prefix) {
  return {read_arr_float(dir / (prefix + "_epi.arr")).cast<double>(),
          read_arr_float(dir / (prefix + "_ale.arr")).cast<double>(),
          read_arr_float(dir / (prefix + "_pred.arr")).cast<double>()};
}

}  // namespace uqaug
