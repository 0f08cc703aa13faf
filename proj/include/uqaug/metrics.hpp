#pragma once

#include "uqaug/common.hpp"
#include "uqaug/datagen.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace uqaug {

struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::int64_t total() const { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

// Counts over region pixels only; class 1 is foreground, everything else background.
ConfusionCounts confusion(const MaskImage& pred, const MaskImage& gt, const RegionMask& region);

struct SegMetrics {
  double dice = 0, precision = 0, recall = 0, f1 = 0, jaccard = 0, specificity = 0;
};

// A ratio whose numerator and denominator are both zero is 1 (both sets empty).
SegMetrics seg_metrics(const ConfusionCounts& c);

// Equal-width bins on (0, 1], right-closed; a confidence of exactly 0 falls in the first bin.
double ece(std::span<const double> confidences, std::span<const std::uint8_t> correct, int n_bins = 15);
double brier(std::span<const double> prob_fg, std::span<const std::uint8_t> label_fg);

// Pixel-pooled calibration inputs for binary foreground probability maps.
struct CalibrationPool {
  std::vector<double> prob_fg;
  std::vector<std::uint8_t> label_fg;

  void add(const DoubleMap& prob_fg_map, const MaskImage& gt, const RegionMask& region);
  double ece(int n_bins = 15) const;
  double brier() const;
};

// Two-sided Wilcoxon signed-rank test on paired differences a - b. Zero differences are
// dropped and tied magnitudes get average ranks. The null distribution is enumerated
// exactly up to kWilcoxonExactMax nonzero pairs, normal approximation (tie-corrected) beyond.
inline constexpr int kWilcoxonExactMax = 400;
double paired_significance(std::span<const double> a, std::span<const double> b);

struct Summary {
  double mean = 0.0;
  double sem = 0.0;  // sample std / sqrt(n); 0 for n < 2
  int n = 0;
};

Summary summarize(std::span<const double> values);

}  // namespace uqaug
