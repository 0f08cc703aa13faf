#include "support.hpp"

#include "uqaug/uncertainty.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

using namespace uqaug;

namespace {

McSampleStack regression_stack(Rng& rng, int T, int h, int w, double offset = 0.0) {
  McSampleStack s;
  s.task = Task::Reconstruction;
  s.height = h;
  s.width = w;
  for (int t = 0; t < T; ++t) {
    s.preds.push_back((testing::random_map(rng, 1, h * w, -2, 2).array() + offset).matrix());
    s.scales.push_back(testing::random_map(rng, 1, h * w, 0.0, 1.5));
  }
  return s;
}

// Two-pass population variance, pixel by pixel.
DoubleMap naive_variance(const McSampleStack& s) {
  DoubleMap out(1, s.preds[0].cols());
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    double mean = 0.0;
    for (const auto& p : s.preds) mean += p(0, j);
    mean /= s.T();
    double ss = 0.0;
    for (const auto& p : s.preds) ss += (p(0, j) - mean) * (p(0, j) - mean);
    out(0, j) = ss / s.T();
  }
  return out;
}

ByteMap ones(int n) { return ByteMap::Ones(1, n); }

}  // namespace

TEST_SUITE("uncertainty") {

TEST_CASE("regression decomposition by hand") {
  McSampleStack s;
  s.height = s.width = 1;
  s.preds = {DoubleMap::Constant(1, 1, 1.0), DoubleMap::Constant(1, 1, 3.0)};
  s.scales = {DoubleMap::Constant(1, 1, std::sqrt(0.5)), DoubleMap::Constant(1, 1, std::sqrt(1.5))};
  const auto m = decompose_regression(s);
  CHECK(m.epistemic(0, 0) == doctest::Approx(1.0));
  CHECK(m.aleatoric(0, 0) == doctest::Approx(1.0));
  CHECK(m.predictive(0, 0) == doctest::Approx(2.0));
}

TEST_CASE("identical passes carry no epistemic term") {
  Rng rng(3);
  McSampleStack s = regression_stack(rng, 1, 4, 4);
  for (int t = 0; t < 4; ++t) {
    s.preds.push_back(s.preds[0]);
    s.scales.push_back(DoubleMap::Constant(1, 16, std::sqrt(0.3)));
  }
  s.preds.erase(s.preds.begin());
  s.scales.erase(s.scales.begin());
  const auto m = decompose_regression(s);
  CHECK(m.epistemic.cwiseAbs().maxCoeff() == 0.0);
  CHECK((m.aleatoric.array() - 0.3).abs().maxCoeff() < 1e-12);
}

TEST_CASE("epistemic matches the two-pass oracle and predictive is the exact sum") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const int T = 2 + static_cast<int>(rng.below(49));
    // A large common offset is where the mean-of-squares form loses digits.
    const auto s = regression_stack(rng, T, 3, 5, trial % 2 ? 1e4 : 0.0);
    const auto m = decompose_regression(s);
    CHECK((m.epistemic - naive_variance(s)).cwiseAbs().maxCoeff() <= 1e-10 * (trial % 2 ? 1e4 : 1.0));
    CHECK((m.predictive.array() == (m.epistemic + m.aleatoric).array()).all());
    DoubleMap ale = DoubleMap::Zero(1, 15);
    for (const auto& sc : s.scales) ale.array() += sc.array().square();
    CHECK((m.aleatoric - ale / T).cwiseAbs().maxCoeff() <= 1e-12);
    if (trial % 2 == 0) CHECK((epistemic_mean_of_squares(s) - m.epistemic).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("epistemic is permutation invariant and scales quadratically") {
  Rng rng(5);
  auto s = regression_stack(rng, 9, 4, 4);
  const auto base = decompose_regression(s).epistemic;
  std::reverse(s.preds.begin(), s.preds.end());
  std::rotate(s.preds.begin(), s.preds.begin() + 3, s.preds.end());
  CHECK((decompose_regression(s).epistemic - base).cwiseAbs().maxCoeff() <= 1e-12);
  for (auto& p : s.preds) p *= 3.0;
  CHECK((decompose_regression(s).epistemic - 9.0 * base).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("segmentation decomposition") {
  McSampleStack s;
  s.task = Task::Segmentation;
  s.height = 1;
  s.width = 2;
  s.channels = 2;
  DoubleMap p1(2, 2), p2(2, 2), v1(2, 2), v2(2, 2);
  p1 << 0.8, 0.4, 0.2, 0.6;
  p2 << 0.6, 0.4, 0.4, 0.6;
  v1 << 0.01, 0.0, 0.01, 0.0;
  v2 << 0.03, 0.0, 0.03, 0.0;
  s.preds = {p1, p2};
  s.prob_var = {v1, v2};
  s.scales = {DoubleMap::Zero(2, 2), DoubleMap::Zero(2, 2)};
  const auto m = decompose_segmentation(s, 1);
  CHECK(m.epistemic(0, 0) == doctest::Approx(0.01));
  CHECK(m.epistemic(0, 1) == 0.0);
  CHECK(m.aleatoric(0, 0) == doctest::Approx(0.02));
  CHECK(m.aleatoric(0, 1) == 0.0);
  CHECK((m.predictive.array() == (m.epistemic + m.aleatoric).array()).all());
  CHECK_THROWS_AS(decompose_segmentation(s, 2), BoundsError);
  CHECK_THROWS_AS(decompose_regression(McSampleStack{}), ConfigError);
}

TEST_CASE("MC sampling of a model") {
  auto cfg = BackboneConfig::segmentation(2);
  cfg.depth = 2;
  cfg.base_channels = 4;
  const Model net(cfg, 2);
  Rng rng(4);
  const Image img(testing::random_map<float>(rng, 8, 8));

  SUBCASE("seeded and shaped") {
    const auto a = mc_sample(net, img, 5, 9, McOptions{Likelihood::Laplace, 20});
    const auto b = mc_sample(net, img, 5, 9, McOptions{Likelihood::Laplace, 20});
    CHECK(a.T() == 5);
    CHECK(a.channels == 2);
    CHECK(a.preds[0].cols() == 64);
    for (int t = 0; t < 5; ++t) CHECK(a.preds[static_cast<std::size_t>(t)] == b.preds[static_cast<std::size_t>(t)]);
    const DoubleMap probs = mean_class_probs(a);
    CHECK((probs.colwise().sum().array() - 1.0).abs().maxCoeff() < 1e-9);
  }
  SUBCASE("zero dropout gives identical regression passes") {
    auto c0 = BackboneConfig::reconstruction();
    c0.depth = 2;
    c0.base_channels = 4;
    c0.dropout_p = 0.0;
    const auto s = mc_sample(Model(c0, 2), img, 4, 1);
    for (int t = 1; t < 4; ++t) CHECK(s.preds[static_cast<std::size_t>(t)] == s.preds[0]);
  }
  SUBCASE("zero logit noise has no aleatoric term") {
    const double inf = std::numeric_limits<double>::infinity();
    const Tensor<double> logits = testing::random_map(rng, 2, 30, -3, 3);
    SampledSoftmax<double> sm(logits, Tensor<double>::Constant(2, 30, -inf), 25, 4, false, -inf, 10.0);
    CHECK(sm.prob_variance().maxCoeff() < 1e-12);
  }
  SUBCASE("regression scale follows the likelihood convention") {
    auto rc = BackboneConfig::reconstruction();
    rc.depth = 2;
    rc.base_channels = 4;
    const Model recon(rc, 3);
    const auto out = recon.forward(img.pixels, DropoutMode::Sample, derive_seed(7, {0, 0}));
    const auto g = mc_sample(recon, img, 2, 7, McOptions{Likelihood::Gaussian, 1});
    const auto l = mc_sample(recon, img, 2, 7, McOptions{Likelihood::Laplace, 1});
    const DoubleMap s = out.log_scale.cast<double>();
    CHECK((g.scales[0].array() - (0.5 * s.array()).exp()).abs().maxCoeff() < 1e-12);
    CHECK((l.scales[0].array() - s.array().exp()).abs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("entropy") {
  DoubleMap p(2, 3);
  p << 1.0, 0.5, 0.9, 0.0, 0.5, 0.1;
  const DoubleMap h = entropy_map(p);
  CHECK(h(0, 0) == 0.0);
  CHECK(h(0, 1) == doctest::Approx(std::log(2.0)));
  CHECK(h(0, 2) == doctest::Approx(0.3251).epsilon(1e-3));
  Rng rng(2);
  DoubleMap q = testing::random_map(rng, 4, 50, 0.0, 1.0);
  q = q.array().rowwise() / q.colwise().sum().array();
  const DoubleMap hq = entropy_map(q);
  CHECK(hq.minCoeff() >= 0.0);
  CHECK(hq.maxCoeff() <= std::log(4.0) + 1e-12);
  DoubleMap bad(2, 1);
  bad << 0.7, 0.7;
  CHECK_THROWS_AS(entropy_map(bad), NumericError);
}

TEST_CASE("region aggregation") {
  CHECK(aggregate_region(DoubleMap::Constant(1, 6, 2.5), ones(6)) == 2.5);
  DoubleMap m(1, 4);
  m << 1, 2, 3, 4;
  ByteMap r(1, 4);
  r << 0, 1, 0, 1;
  CHECK(aggregate_region(m, r) == 3.0);
  CHECK(aggregate_region(m, ones(4)) == m.mean());
  CHECK_THROWS_AS(aggregate_region(m, ByteMap::Zero(1, 4)), DegenerateInputError);
}

TEST_CASE("maps round-trip through array files") {
  testing::TempDir dir("maps");
  Rng rng(1);
  const auto m = decompose_regression(regression_stack(rng, 4, 3, 5));
  write_uncertainty_maps(dir.path(), "c", m, 3, 5);
  const auto back = read_uncertainty_maps(dir.path(), "c");
  CHECK(back.aleatoric.rows() == 3);
  CHECK((back.aleatoric - as_image(m.aleatoric, 3, 5)).cwiseAbs().maxCoeff() < 1e-6);
}

}
