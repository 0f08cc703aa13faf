// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include "support.hpp"

#include "uqaug/arr_io.hpp"
#include "uqaug/harness.hpp"
#include "uqaug/losses.hpp"
#include "uqaug/metrics.hpp"
#include "uqaug/uncertainty.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>

using namespace uqaug;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

double relative_error(double a, double b) { return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b)); }

// Reference (aleatoric, epistemic, predictive) triples for baseline, gaussian, ours and full,
// tumor then non-tumor region.
constexpr double kReference[8][3] = {
    {0.01760, 0.08636, 0.10397}, {0.00773, 0.09399, 0.10173}, {0.00154, 0.08607, 0.08761},
    {0.01361, 0.07601, 0.08962}, {0.00369, 0.00051, 0.00421}, {0.00167, 0.00066, 0.00233},
    {0.00050, 0.00043, 0.00093}, {0.07141, 0.00039, 0.07181},
};

Outcome additivity() {
  Outcome o;
  double worst = 0.0;
  for (const auto& r : kReference) {
    // Two passes at m +- sqrt(e) have population variance e; a constant sigma of sqrt(a)
    // gives mean sigma^2 = a.
    McSampleStack s;
    s.height = 1;
    s.width = 1;
    for (double sign : {1.0, -1.0}) {
      s.preds.push_back(DoubleMap::Constant(1, 1, 0.5 + sign * std::sqrt(r[1])));
      s.scales.push_back(DoubleMap::Constant(1, 1, std::sqrt(r[0])));
    }
    const auto m = decompose_regression(s);
    worst = std::max(worst, std::abs(m.predictive(0, 0) - r[2]));
  }
  o.pass = worst <= 1e-4;
  o.detail = fmt("max |ale + epi - predictive| = %.2e over 8 cells (tol 1e-4)", worst);
  return o;
}

template <typename F>
double golden_min(F&& f, double lo, double hi, double tol) {
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  while (b - a > tol) {
    const double c = b - g * (b - a), d = a + g * (b - a);
    if (f(c) < f(d)) {
      b = d;
    } else {
      a = c;
    }
  }
  return 0.5 * (a + b);
}

Outcome loss_gradients() {
  Rng rng(2024);
  const double eps = 1e-5;
  double worst = 0.0;
  auto fd_check = [&](auto&& value, const DoubleMap& x, const DoubleMap& grad) {
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      DoubleMap a = x, b = x;
      a.data()[i] += eps;
      b.data()[i] -= eps;
      worst = std::max(worst, relative_error((value(a) - value(b)) / (2 * eps), grad.data()[i]));
    }
  };
  for (int trial = 0; trial < 50; ++trial) {
    const DoubleMap pred = testing::random_map(rng, 8, 8), target = testing::random_map(rng, 8, 8);
    const DoubleMap s = testing::random_map(rng, 8, 8, -1.5, 1.5);
    const DoubleMap var = testing::random_map(rng, 8, 8, 0.2, 2.0);
    for (Likelihood lk : {Likelihood::Gaussian, Likelihood::Laplace}) {
      const auto g = hetero_regression_loss(pred, s, target, lk);
      fd_check([&](const DoubleMap& p) { return hetero_regression_loss(p, s, target, lk).value; }, pred, g.d_pred);
      fd_check([&](const DoubleMap& x) { return hetero_regression_loss(pred, x, target, lk).value; }, s, g.d_scale);
      const auto gr = hetero_regression_loss_raw_variance(pred, var, target, lk);
      fd_check([&](const DoubleMap& p) { return hetero_regression_loss_raw_variance(p, var, target, lk).value; }, pred,
               gr.d_pred);
      fd_check([&](const DoubleMap& v) { return hetero_regression_loss_raw_variance(pred, v, target, lk).value; }, var,
               gr.d_scale);
    }
    const DoubleMap probs = testing::random_map(rng, 8, 8, 0.05, 0.95);
    const DoubleMap t = testing::random_mask(rng, 8, 8).cast<double>();
    fd_check([&](const DoubleMap& p) { return dice_loss(p, t, 1.0).value; }, probs, dice_loss(probs, t, 1.0).d_pred);
  }
  double worst_s = 0.0;
  for (double r : {0.05, 0.3, 1.0, 1.7, -2.2, 4.0}) {
    auto f = [r](double s) {
      return hetero_regression_loss(DoubleMap::Zero(1, 1), DoubleMap::Constant(1, 1, s), DoubleMap::Constant(1, 1, r),
                                    Likelihood::Gaussian)
          .value;
    };
    worst_s = std::max(worst_s, std::abs(golden_min(f, -15.0, 15.0, 1e-8) - std::log(r * r)));
  }
  Outcome o;
  o.pass = worst < 1e-4 && worst_s <= 1e-4;
  o.detail = fmt("max FD rel error %.2e on 50 instances (tol 1e-4); |s* - log r^2| = %.2e (tol 1e-4)", worst, worst_s);
  return o;
}

Outcome decomposition() {
  Rng rng(99);
  double worst = 0.0;
  bool exact = true;
  for (int trial = 0; trial < 100; ++trial) {
    const int T = 2 + static_cast<int>(rng.below(49));
    McSampleStack s;
    s.height = 4;
    s.width = 4;
    for (int t = 0; t < T; ++t) {
      s.preds.push_back(testing::random_map(rng, 1, 16, -2, 2));
      s.scales.push_back(testing::random_map(rng, 1, 16, 0.0, 1.5));
    }
    const auto m = decompose_regression(s);
    for (Eigen::Index j = 0; j < 16; ++j) {
      double mean = 0.0, ale = 0.0;
      for (int t = 0; t < T; ++t) {
        mean += s.preds[static_cast<std::size_t>(t)](0, j);
        ale += s.scales[static_cast<std::size_t>(t)](0, j) * s.scales[static_cast<std::size_t>(t)](0, j);
      }
      mean /= T;
      double ss = 0.0;
      for (int t = 0; t < T; ++t) ss += std::pow(s.preds[static_cast<std::size_t>(t)](0, j) - mean, 2);
      worst = std::max({worst, std::abs(m.epistemic(0, j) - ss / T), std::abs(m.aleatoric(0, j) - ale / T)});
    }
    exact = exact && (m.predictive.array() == (m.epistemic + m.aleatoric).array()).all();
  }
  Outcome o;
  o.pass = worst <= 1e-10 && exact;
  o.detail = fmt("max oracle deviation %.2e on 100 stacks (tol 1e-10); predictive exact sum: ", worst) +
             (exact ? "yes" : "no");
  return o;
}

Outcome classification_loss() {
  Rng rng(404);
  std::mt19937_64 gen(8080);
  std::normal_distribution<double> z;
  const int k = 3;
  double worst = 0.0;
  for (int px = 0; px < 10; ++px) {
    const Tensor<double> logits = testing::random_map(rng, k, 1, -2, 2);
    const Tensor<double> s = testing::random_map(rng, k, 1, -2, 1);
    const int target = static_cast<int>(rng.below(k));
    const double loss = logit_sampling_classification_loss<double>(logits, s, {target}, 10000, 11 + px);
    double acc = 0.0;
    const int n = 1000000;
    std::vector<double> zs(k);
    for (int i = 0; i < n; ++i) {
      double mx = -1e300;
      for (int c = 0; c < k; ++c) {
        zs[static_cast<std::size_t>(c)] = logits(c, 0) + std::exp(0.5 * s(c, 0)) * z(gen);
        mx = std::max(mx, zs[static_cast<std::size_t>(c)]);
      }
      double den = 0.0;
      for (double v : zs) den += std::exp(v - mx);
      acc += std::exp(zs[static_cast<std::size_t>(target)] - mx) / den;
    }
    const double oracle = -std::log(acc / n);
    worst = std::max(worst, std::abs(loss - oracle) / oracle);
  }
  // Vanishing noise against plain cross-entropy.
  const Tensor<double> logits = testing::random_map(rng, k, 50, -3, 3);
  std::vector<int> target(50);
  for (auto& t : target) t = static_cast<int>(rng.below(k));
  const double loss = logit_sampling_classification_loss<double>(
      logits, Tensor<double>::Constant(k, 50, -std::numeric_limits<double>::infinity()), target, 100, 3);
  double ce = 0.0;
  for (int c = 0; c < 50; ++c) {
    const double mx = logits.col(c).maxCoeff();
    ce += mx + std::log((logits.col(c).array() - mx).exp().sum()) - logits(target[static_cast<std::size_t>(c)], c);
  }
  const double gap = std::abs(loss - ce / 50);
  Outcome o;
  o.pass = worst <= 0.01 && gap <= 1e-3;
  o.detail = fmt("max rel deviation from 1e6-sample oracle %.2e (tol 1e-2); |loss - CE| at sigma->0 = %.2e (tol 1e-3)",
                 worst, gap);
  return o;
}

Outcome metric_oracles() {
  Rng rng(31337);
  double worst = 0.0;
  bool counts_ok = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const ByteMap p = testing::random_mask(rng, 16, 16, rng.uniform(0.0, 0.6));
    const ByteMap g = testing::random_mask(rng, 16, 16, rng.uniform(0.0, 0.6));
    const ByteMap r = ByteMap::Ones(16, 16);
    long long tp = 0, fp = 0, tn = 0, fn = 0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const bool a = p.data()[i], b = g.data()[i];
      tp += a && b;
      fp += a && !b;
      tn += !a && !b;
      fn += !a && b;
    }
    const auto c = confusion(MaskImage{p, 2}, MaskImage{g, 2}, RegionMask{r});
    counts_ok = counts_ok && c == ConfusionCounts{tp, fp, tn, fn};
    auto ratio = [](long long a, long long b) { return b == 0 ? 1.0 : static_cast<double>(a) / static_cast<double>(b); };
    const auto m = seg_metrics(c);
    const double pr = ratio(tp, tp + fp), rc = ratio(tp, tp + fn);
    const double f1 = pr + rc > 0 ? 2 * pr * rc / (pr + rc) : 0.0;
    worst = std::max({worst, std::abs(m.dice - ratio(2 * tp, 2 * tp + fp + fn)), std::abs(m.jaccard - ratio(tp, tp + fp + fn)),
                      std::abs(m.precision - pr), std::abs(m.recall - rc), std::abs(m.specificity - ratio(tn, tn + fp)),
                      std::abs(m.f1 - f1), std::abs(m.dice - 2 * m.jaccard / (1 + m.jaccard))});
  }
  std::vector<double> conf(100000);
  std::vector<std::uint8_t> ok(conf.size());
  for (std::size_t i = 0; i < conf.size(); ++i) {
    conf[i] = rng.uniform(0.5, 1.0);
    ok[i] = rng.bernoulli(conf[i]);
  }
  const double e = ece(conf, ok, 15);
  std::vector<std::uint8_t> labels(1000);
  for (auto& l : labels) l = rng.bernoulli(0.5);
  const double b = brier(std::vector<double>(labels.size(), 0.5), labels);
  Outcome o;
  o.pass = counts_ok && worst <= 1e-12 && e < 0.01 && b == 0.25;
  o.detail = fmt("max metric deviation %.2e on 1000 pairs (tol 1e-12); ECE of calibrated draws %.4f (< 0.01); "
                 "Brier at p = 0.5: %.17g",
                 worst, e, b) +
             (counts_ok ? "" : "; confusion counts disagree");
  return o;
}

std::string checksum(const ByteMap& m) {
  return hex64(fnv1a(std::string_view(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()))));
}

Outcome noise_sampler(const std::filesystem::path& bench) {
  const auto split = read_dataset(bench / "data");
  const auto entries = read_noise_model(bench / "noise");
  NoiseModelIndex index;
  for (const auto& e : entries) index[e.case_id] = e;

  // Standardized residuals, pooled over images until 1e5 draws.
  const std::size_t want = 100000;
  double sum = 0.0, sum_sq = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < entries.size() && n < want; ++i) {
    const auto& e = entries[i];
    const auto drawn = sample_augmented(e, MaskImage{ByteMap::Zero(e.mean.rows(), e.mean.cols()), 2}, 1000 + i).first;
    const double unit = e.family == Likelihood::Laplace ? std::sqrt(2.0) : 1.0;
    for (Eigen::Index j = 0; j < e.mean.size() && n < want; ++j) {
      const double sc = e.scale.data()[j];
      if (!(sc > 0.0)) continue;
      const double zv = (static_cast<double>(drawn.pixels.data()[j]) - e.mean.data()[j]) / (unit * sc);
      sum += zv;
      sum_sq += zv * zv;
      ++n;
    }
  }
  const double mean = sum / static_cast<double>(n);
  const double sd = std::sqrt(sum_sq / static_cast<double>(n) - mean * mean);

  // Every training case keeps its mask through the noise-model arm.
  AugmentationArm arm;
  arm.kind = ArmKind::Ours;
  const auto aug = build_augmented_trainset(split.train, arm, &index, 77);
  std::size_t matched = 0;
  for (std::size_t i = 0; i < split.train.size(); ++i) {
    const auto& src = split.train[i];
    for (std::size_t j = split.train.size(); j < aug.size(); ++j) {
      if (aug[j].id.rfind(src.id + "_aug", 0) == 0 && checksum(aug[j].mask.labels) == checksum(src.mask.labels)) {
        ++matched;
        break;
      }
    }
  }
  Outcome o;
  o.pass = n == want && std::abs(mean) <= 0.05 && sd >= 0.95 && sd <= 1.05 && matched == split.train.size();
  o.detail = fmt("residual mean %.4f, std %.4f over %.0f draws; ", mean, sd, static_cast<double>(n)) +
             std::to_string(matched) + "/" + std::to_string(split.train.size()) + " training masks unchanged";
  return o;
}

Outcome headline(const ExperimentReport& report) {
  const auto& row = report_row(report, "aleatoric_tumor");
  const int ours = arm_index(report, ArmKind::Ours), base = arm_index(report, ArmKind::Baseline),
            gauss = arm_index(report, ArmKind::Gaussian);
  Outcome o;
  if (ours < 0 || base < 0 || gauss < 0) return {false, "benchmark is missing the ours, baseline or gaussian arm"};
  std::vector<double> a, b;
  const auto& vo = row.values[static_cast<std::size_t>(ours)];
  const auto& vb = row.values[static_cast<std::size_t>(base)];
  for (std::size_t i = 0; i < vo.size(); ++i) {
    if (std::isfinite(vo[i]) && std::isfinite(vb[i])) {
      a.push_back(vo[i]);
      b.push_back(vb[i]);
    }
  }
  const double m_ours = row.per_arm[static_cast<std::size_t>(ours)].mean;
  const double m_base = row.per_arm[static_cast<std::size_t>(base)].mean;
  const double m_gauss = row.per_arm[static_cast<std::size_t>(gauss)].mean;
  const double p = a.size() >= 5 ? paired_significance(a, b) : 1.0;
  o.pass = a.size() >= 20 && m_ours < m_base && p < 0.05 && m_ours <= m_gauss;
  o.detail = fmt("tumor aleatoric ours %.4g, baseline %.4g, gaussian %.4g; p = %.3g", m_ours, m_base, m_gauss, p) +
             " over " + std::to_string(a.size()) + " cases";
  return o;
}

ExperimentConfig small_config(const std::filesystem::path& out) {
  ExperimentConfig c;
  apply_config_text(c,
                    "seed = 3\n"
                    "data.n_cases = 20\n"
                    "data.size = 32\n"
                    "data.brain_radius = 13\n"
                    "data.tumor_min_axis = 2\n"
                    "data.tumor_max_axis = 5\n"
                    "recon.base_channels = 4\n"
                    "recon.depth = 2\n"
                    "recon.max_epochs = 3\n"
                    "recon.dropout_warmup = 1\n"
                    "seg.base_channels = 4\n"
                    "seg.depth = 2\n"
                    "seg.max_epochs = 3\n"
                    "seg.dropout_warmup = 1\n"
                    "noise.T = 3\n"
                    "eval.T = 4\n"
                    "eval.n_mc = 5\n"
                    "eval.figure_cases = 1\n"
                    "aug.arms = baseline,ours\n",
                    "determinism");
  c.out = out;
  return c;
}

Outcome determinism(const std::filesystem::path& work) {
  std::string tables[2];
  for (int run = 0; run < 2; ++run) {
    const auto dir = work / ("determinism_" + std::to_string(run));
    std::filesystem::remove_all(dir);
    Experiment exp(small_config(dir));
    exp.run_all();
    tables[run] = read_text_file(dir / "table.tsv");
  }
  const bool same = tables[0] == tables[1];

  // Interrupted and resumed training against an uninterrupted run.
  PhantomConfig pc;
  pc.size = 32;
  pc.brain_radius = 13;
  pc.tumor_min_axis = 2;
  pc.tumor_max_axis = 5;
  std::vector<TrainingItem> items;
  for (const auto& c : generate_phantom_dataset(8, pc, 5)) {
    const auto p = preprocess_case(c, PreprocessConfig{});
    items.push_back({p.id, p.image.pixels, p.image.pixels, p.mask.labels});
  }
  const std::vector<TrainingItem> train_items(items.begin(), items.begin() + 6), val(items.begin() + 6, items.end());
  auto net = BackboneConfig::reconstruction();
  net.depth = 2;
  net.base_channels = 4;
  TrainConfig tc;
  tc.max_epochs = 6;
  tc.batch_size = 2;
  tc.dropout_warmup_epochs = 1;
  tc.patience = 1;
  tc.seed = 17;
  const auto loss = regression_loss_fn(Likelihood::Laplace);
  Model straight_model = build_backbone(net, 4);
  const auto straight = train(straight_model, loss, train_items, val, tc);
  Model part = build_backbone(net, 4);
  TrainHooks hooks;
  hooks.checkpoint_path = work / "resume.ckpt";
  hooks.stop_after_epoch = 2;
  train(part, loss, train_items, val, tc, hooks);
  Model resumed;
  TrainHooks again;
  again.checkpoint_path = hooks.checkpoint_path;
  const auto rest = resume(hooks.checkpoint_path, resumed, loss, train_items, val, again);
  double worst = rest.history.size() == straight.history.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; std::isfinite(worst) && i < rest.history.size(); ++i) {
    worst = std::max({worst, std::abs(rest.history[i].train_loss - straight.history[i].train_loss),
                      std::abs(rest.history[i].val_loss - straight.history[i].val_loss)});
  }
  Outcome o;
  o.pass = same && worst <= 1e-6;
  o.detail = std::string("table.tsv ") + (same ? "byte-identical" : "differs") + " across two runs; " +
             fmt("resumed history max deviation %.2e (tol 1e-6)", worst);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::filesystem::path work = ACCEPTANCE_WORKDIR;
  std::string bench_cfg = BENCHMARK_CFG;
  std::vector<int> only;
  app.add_option("--workdir", work, "Scratch directory; the benchmark run is cached here");
  app.add_option("--benchmark-config", bench_cfg, "Benchmark config for criteria 6 and 7");
  app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 8));
  CLI11_PARSE(app, argc, argv);
  std::filesystem::create_directories(work);

  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](int i) { return selected.empty() || selected.count(i) > 0; };

  std::optional<ExperimentReport> bench;
  const auto bench_dir = work / "benchmark";
  auto benchmark = [&]() -> const ExperimentReport& {
    if (!bench) {
      auto config = load_config(bench_cfg);
      config.out = bench_dir;
      Experiment exp(config, &std::cerr);
      bench = exp.run_all();
    }
    return *bench;
  };

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"decomposition additivity on the reference table", additivity},
      {"loss gradients and the gaussian log-variance optimum", loss_gradients},
      {"decomposition against a brute-force oracle", decomposition},
      {"logit-sampling loss against an independent Monte Carlo oracle", classification_loss},
      {"segmentation and calibration metric oracles", metric_oracles},
      {"noise-model sampler residuals and mask invariance",
       [&] {
         benchmark();
         return noise_sampler(bench_dir);
       }},
      {"ours lowers tumor aleatoric uncertainty on the phantom benchmark", [&] { return headline(benchmark()); }},
      {"determinism of run-all and checkpoint resume", [&] { return determinism(work); }},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!wanted(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !o.pass;
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << " -- "
              << o.detail << fmt(" [%.1fs]", secs) << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
