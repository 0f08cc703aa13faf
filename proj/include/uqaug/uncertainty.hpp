#pragma once

#include "uqaug/common.hpp"
#include "uqaug/datagen.hpp"
#include "uqaug/losses.hpp"
#include "uqaug/nets.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace uqaug {

// T stochastic passes. Each entry is channels x (height * width).
//   regression:   preds = reconstruction, scales = predicted sigma (gaussian: exp(s/2),
//                 laplace: b = exp(s)); one channel.
//   segmentation: preds = per-class probability averaged over the logit samples,
//                 scales = per-class logit sigma, prob_var = per-class variance of the
//                 sampled probabilities; k channels.
struct McSampleStack {
  Task task = Task::Reconstruction;
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<DoubleMap> preds;
  std::vector<DoubleMap> scales;
  std::vector<DoubleMap> prob_var;

  int T() const { return static_cast<int>(preds.size()); }
  void validate() const;
};

struct UncertaintyMaps {
  DoubleMap epistemic;
  DoubleMap aleatoric;
  DoubleMap predictive;
};

struct McOptions {
  Likelihood likelihood = Likelihood::Laplace;  // regression scale convention
  int n_mc = 50;                                // logit samples per pass (segmentation)
};

McSampleStack mc_sample(const Model& model, const Image& image, int T, std::uint64_t seed,
                        const McOptions& options = {});

// Population variance across passes, shifted two-pass form.
template <typename Getter>
DoubleMap population_variance(int T, Eigen::Index rows, Eigen::Index cols, Getter&& get) {
  DoubleMap mean = DoubleMap::Zero(rows, cols);
  for (int t = 0; t < T; ++t) mean += get(t);
  mean /= static_cast<double>(T);
  DoubleMap ss = DoubleMap::Zero(rows, cols);
  DoubleMap s1 = DoubleMap::Zero(rows, cols);
  for (int t = 0; t < T; ++t) {
    const DoubleMap d = get(t) - mean;
    ss.array() += d.array().square();
    s1 += d;
  }
  DoubleMap var = (ss.array() - s1.array().square() / T) / T;
  return var.cwiseMax(0.0);
}

// epistemic = (1/T) sum y_t^2 - ((1/T) sum y_t)^2, aleatoric = (1/T) sum sigma_t^2.
UncertaintyMaps decompose_regression(const McSampleStack& stack);

// The mean-of-squares form, kept for cross-checking the stable computation.
DoubleMap epistemic_mean_of_squares(const McSampleStack& stack, int channel = 0);

// epistemic = variance across passes of the mean class probability;
// aleatoric = mean across passes of the within-pass probability variance.
UncertaintyMaps decompose_segmentation(const McSampleStack& stack, int class_of_interest);

// Per-class probability averaged over passes (k x N).
DoubleMap mean_class_probs(const McSampleStack& stack);

// Shannon entropy (nats) per pixel of a k x N probability tensor; returns 1 x N.
DoubleMap entropy_map(const DoubleMap& mean_probs);

double aggregate_region(const DoubleMap& map, const ByteMap& region);

// Shapes a 1 x N row into height x width.
DoubleMap as_image(const DoubleMap& row, int height, int width);

void write_uncertainty_maps(const std::filesystem::path& dir, const std::string& prefix,
                            const UncertaintyMaps& maps, int height, int width);
UncertaintyMaps read_uncertainty_maps(const std::filesystem::path& dir, const std::string& prefix);

}  // namespace uqaug
