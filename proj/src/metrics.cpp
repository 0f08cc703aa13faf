#include "uqaug/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace uqaug {

ConfusionCounts confusion(const MaskImage& pred, const MaskImage& gt, const RegionMask& region) {
  require_same_shape(pred.labels, gt.labels, "confusion");
  require_same_shape(pred.labels, region.member, "confusion region");
  ConfusionCounts c;
  for (Eigen::Index i = 0; i < pred.labels.size(); ++i) {
    if (region.member.data()[i] == 0) continue;
    const bool p = pred.labels.data()[i] == 1;
    const bool g = gt.labels.data()[i] == 1;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

namespace {

double ratio(std::int64_t num, std::int64_t den) {
  if (den == 0) return 1.0;  // num is 0 too
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

SegMetrics seg_metrics(const ConfusionCounts& c) {
  SegMetrics m;
  m.dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
  m.precision = ratio(c.tp, c.tp + c.fp);
  m.recall = ratio(c.tp, c.tp + c.fn);
  m.f1 = (m.precision + m.recall == 0.0) ? 0.0 : 2.0 * m.precision * m.recall / (m.precision + m.recall);
  m.jaccard = ratio(c.tp, c.tp + c.fp + c.fn);
  m.specificity = ratio(c.tn, c.tn + c.fp);
  return m;
}

double ece(std::span<const double> confidences, std::span<const std::uint8_t> correct, int n_bins) {
  if (confidences.size() != correct.size()) throw ConfigError("ece: length mismatch");
  if (confidences.empty()) throw DegenerateInputError("ece: empty input");
  if (n_bins < 1) throw ConfigError("ece: n_bins must be >= 1");
  std::vector<double> conf_sum(static_cast<std::size_t>(n_bins), 0.0);
  std::vector<double> acc_sum(static_cast<std::size_t>(n_bins), 0.0);
  std::vector<std::int64_t> count(static_cast<std::size_t>(n_bins), 0);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    if (!(c >= 0.0 && c <= 1.0)) throw NumericError("ece: confidence outside [0, 1]");
    const int b = std::clamp(static_cast<int>(std::ceil(c * n_bins)) - 1, 0, n_bins - 1);
    conf_sum[static_cast<std::size_t>(b)] += c;
    acc_sum[static_cast<std::size_t>(b)] += correct[i] ? 1.0 : 0.0;
    ++count[static_cast<std::size_t>(b)];
  }
  const auto n = static_cast<double>(confidences.size());
  double total = 0.0;
  for (std::size_t b = 0; b < count.size(); ++b) {
    if (count[b] == 0) continue;
    total += std::abs(acc_sum[b] - conf_sum[b]) / n;
  }
  return total;
}

double brier(std::span<const double> prob_fg, std::span<const std::uint8_t> label_fg) {
  if (prob_fg.size() != label_fg.size()) throw ConfigError("brier: length mismatch");
  if (prob_fg.empty()) throw DegenerateInputError("brier: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < prob_fg.size(); ++i) {
    const double p = prob_fg[i];
    if (!(p >= 0.0 && p <= 1.0)) throw NumericError("brier: probability outside [0, 1]");
    const double d = p - (label_fg[i] ? 1.0 : 0.0);
    total += d * d;
  }
  return total / static_cast<double>(prob_fg.size());
}

void CalibrationPool::add(const DoubleMap& prob_fg_map, const MaskImage& gt, const RegionMask& region) {
  require_same_shape(prob_fg_map, gt.labels, "calibration");
  require_same_shape(prob_fg_map, region.member, "calibration region");
  for (Eigen::Index i = 0; i < prob_fg_map.size(); ++i) {
    if (region.member.data()[i] == 0) continue;
    prob_fg.push_back(prob_fg_map.data()[i]);
    label_fg.push_back(gt.labels.data()[i] == 1 ? 1 : 0);
  }
}

double CalibrationPool::ece(int n_bins) const {
  std::vector<double> conf(prob_fg.size());
  std::vector<std::uint8_t> correct(prob_fg.size());
  for (std::size_t i = 0; i < prob_fg.size(); ++i) {
    const double p = prob_fg[i];
    conf[i] = std::max(p, 1.0 - p);
    correct[i] = static_cast<std::uint8_t>((p >= 0.5) == (label_fg[i] != 0));
  }
  return uqaug::ece(conf, correct, n_bins);
}

double CalibrationPool::brier() const { return uqaug::brier(prob_fg, label_fg); }

namespace {

// P(W+ <= w) for the exact null distribution with doubled integer ranks.
struct ExactWilcoxon {
  std::vector<double> pmf;  // index = doubled rank sum

  explicit ExactWilcoxon(const std::vector<int>& doubled_ranks) {
    const int total = std::accumulate(doubled_ranks.begin(), doubled_ranks.end(), 0);
    pmf.assign(static_cast<std::size_t>(total) + 1, 0.0);
    pmf[0] = 1.0;
    int reach = 0;
    for (const int r : doubled_ranks) {
      reach += r;
      for (int s = reach; s >= 0; --s) {
        const double without = pmf[static_cast<std::size_t>(s)];
        const double with = s >= r ? pmf[static_cast<std::size_t>(s - r)] : 0.0;
        pmf[static_cast<std::size_t>(s)] = 0.5 * (without + with);
      }
    }
  }

  double cdf(int w) const {
    double acc = 0.0;
    for (int s = 0; s <= w && s < static_cast<int>(pmf.size()); ++s) acc += pmf[static_cast<std::size_t>(s)];
    return acc;
  }
  double sf(int w) const {
    double acc = 0.0;
    for (int s = std::max(w, 0); s < static_cast<int>(pmf.size()); ++s) acc += pmf[static_cast<std::size_t>(s)];
    return acc;
  }
};

}  // namespace

double paired_significance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ConfigError("paired_significance: length mismatch");
  if (a.size() < 5) throw ConfigError("paired_significance: needs at least 5 pairs");
  std::vector<double> diffs;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (!std::isfinite(d)) throw NumericError("paired_significance: non-finite value");
    if (d != 0.0) diffs.push_back(d);
  }
  if (diffs.empty()) return 1.0;
  const int n = static_cast<int>(diffs.size());

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int i, int j) { return std::abs(diffs[i]) < std::abs(diffs[j]); });
  // Doubled average ranks are integers: a tie group spanning ranks [lo, hi] gets lo + hi.
  std::vector<int> doubled(static_cast<std::size_t>(n));
  double tie_term = 0.0;
  for (int start = 0; start < n;) {
    int end = start;
    while (end + 1 < n && std::abs(diffs[order[end + 1]]) == std::abs(diffs[order[start]])) ++end;
    const int r2 = (start + 1) + (end + 1);
    for (int k = start; k <= end; ++k) doubled[static_cast<std::size_t>(order[k])] = r2;
    const double t = end - start + 1;
    tie_term += t * t * t - t;
    start = end + 1;
  }
  int w_plus2 = 0;
  for (int i = 0; i < n; ++i) {
    if (diffs[static_cast<std::size_t>(i)] > 0) w_plus2 += doubled[static_cast<std::size_t>(i)];
  }

  double p;
  if (n <= kWilcoxonExactMax) {
    const ExactWilcoxon dist(doubled);
    p = 2.0 * std::min(dist.cdf(w_plus2), dist.sf(w_plus2));
  } else {
    const double nn = n;
    const double mean = nn * (nn + 1) / 4.0;
    const double var = nn * (nn + 1) * (2 * nn + 1) / 24.0 - tie_term / 48.0;
    if (var <= 0.0) return 1.0;
    const double w = w_plus2 / 2.0;
    const double z = (std::abs(w - mean) - 0.5) / std::sqrt(var);
    p = std::erfc(std::max(z, 0.0) / std::sqrt(2.0));
  }
  return std::min(1.0, p);
}

Summary summarize(std::span<const double> values) {
  Summary s;
  s.n = static_cast<int>(values.size());
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / s.n;
  if (s.n >= 2) {
    double ss = 0.0;
    for (const double v : values) ss += (v - s.mean) * (v - s.mean);
    s.sem = std::sqrt(ss / (s.n - 1)) / std::sqrt(static_cast<double>(s.n));
  }
  return s;
}

}  // namespace uqaug
