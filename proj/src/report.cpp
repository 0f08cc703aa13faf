#include "uqaug/report.hpp"

#include "uqaug/arr_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace uqaug {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string num17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string num6(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

const char* kCaseHeader =
    "case_id\ttp\tfp\ttn\tfn\tdice\tprecision\trecall\tf1\tjaccard\tspecificity\t"
    "aleatoric_tumor\tepistemic_tumor\tpredictive_tumor\tentropy_tumor\t"
    "aleatoric_nontumor\tepistemic_nontumor\tpredictive_nontumor\tentropy_nontumor";

std::string arm_title(ArmKind a) {
  switch (a) {
    case ArmKind::Baseline: return "Baseline";
    case ArmKind::Gaussian: return "Gaussian";
    case ArmKind::Ours: return "Ours";
    case ArmKind::Full: return "Full augmentation";
  }
  return "?";
}

}  // namespace

std::string case_table_tsv(const std::vector<CaseRecord>& cases) {
  std::string out = std::string(kCaseHeader) + "\n";
  for (const auto& c : cases) {
    out += c.case_id;
    for (const auto v : {c.counts.tp, c.counts.fp, c.counts.tn, c.counts.fn}) out += "\t" + std::to_string(v);
    for (const double v : {c.seg.dice, c.seg.precision, c.seg.recall, c.seg.f1, c.seg.jaccard, c.seg.specificity,
                           c.tumor.aleatoric, c.tumor.epistemic, c.tumor.predictive, c.tumor.entropy,
                           c.nontumor.aleatoric, c.nontumor.epistemic, c.nontumor.predictive, c.nontumor.entropy}) {
      out += "\t" + num17(v);
    }
    out += "\n";
  }
  return out;
}

std::vector<CaseRecord> parse_case_table(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCaseHeader) throw IoError("case table: unexpected header");
  std::vector<CaseRecord> cases;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::vector<std::string> f;
    for (std::string cell; std::getline(row, cell, '\t');) f.push_back(cell);
    if (f.size() != 19) throw IoError("case table: expected 19 columns, got " + std::to_string(f.size()));
    CaseRecord c;
    c.case_id = f[0];
    c.counts = {std::stoll(f[1]), std::stoll(f[2]), std::stoll(f[3]), std::stoll(f[4])};
    auto d = [&](int i) { return std::strtod(f[static_cast<std::size_t>(i)].c_str(), nullptr); };
    c.seg = {d(5), d(6), d(7), d(8), d(9), d(10)};
    c.tumor = {d(11), d(12), d(13), d(14)};
    c.nontumor = {d(15), d(16), d(17), d(18)};
    cases.push_back(std::move(c));
  }
  return cases;
}

int arm_index(const ExperimentReport& report, ArmKind arm) {
  const auto it = std::find(report.arms.begin(), report.arms.end(), arm);
  return it == report.arms.end() ? -1 : static_cast<int>(it - report.arms.begin());
}

const ReportRow& report_row(const ExperimentReport& report, const std::string& metric) {
  for (const auto& r : report.rows) {
    if (r.metric == metric) return r;
  }
  throw ConfigError("report: no metric '" + metric + "'");
}

namespace {

bool better(double a, double b, Direction d) { return d == Direction::Higher ? a > b : a < b; }

// Wilcoxon p over case pairs where both values are finite; NaN when fewer than 5 remain.
double paired_p(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> x, y;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
    if (std::isfinite(a[i]) && std::isfinite(b[i])) {
      x.push_back(a[i]);
      y.push_back(b[i]);
    }
  }
  if (x.size() < 5) return kNaN;
  return paired_significance(x, y);
}

Summary summarize_finite(const std::vector<double>& v) {
  std::vector<double> finite;
  for (const double x : v) {
    if (std::isfinite(x)) finite.push_back(x);
  }
  return summarize(finite);
}

}  // namespace

ExperimentReport build_report(const std::vector<ArmEvaluation>& evaluations) {
  if (evaluations.empty()) throw ConfigError("report: no evaluated arms");
  ExperimentReport report;
  for (const auto& e : evaluations) report.arms.push_back(e.arm);
  const std::size_t n_arms = evaluations.size();
  for (const auto& e : evaluations) {
    if (e.cases.size() != evaluations.front().cases.size()) throw ConfigError("report: arms have different test sets");
    for (std::size_t i = 0; i < e.cases.size(); ++i) {
      if (e.cases[i].case_id != evaluations.front().cases[i].case_id) {
        throw ConfigError("report: arms have different test case order");
      }
    }
  }

  using Getter = double (*)(const CaseRecord&);
  struct PerCase {
    const char* metric;
    const char* label;
    Direction dir;
    Getter get;
  };
  const PerCase per_case[] = {
      {"dice", "Dice", Direction::Higher, [](const CaseRecord& c) { return c.seg.dice; }},
      {"precision", "Precision", Direction::Higher, [](const CaseRecord& c) { return c.seg.precision; }},
      {"recall", "Recall (sensitivity)", Direction::Higher, [](const CaseRecord& c) { return c.seg.recall; }},
      {"f1", "F1", Direction::Higher, [](const CaseRecord& c) { return c.seg.f1; }},
      {"jaccard", "Jaccard", Direction::Higher, [](const CaseRecord& c) { return c.seg.jaccard; }},
      {"specificity", "Specificity", Direction::Higher, [](const CaseRecord& c) { return c.seg.specificity; }},
      {"aleatoric_tumor", "Aleatoric (tumor)", Direction::Lower, [](const CaseRecord& c) { return c.tumor.aleatoric; }},
      {"epistemic_tumor", "Epistemic (tumor)", Direction::Lower, [](const CaseRecord& c) { return c.tumor.epistemic; }},
      {"predictive_tumor", "Predictive (tumor)", Direction::Lower,
       [](const CaseRecord& c) { return c.tumor.predictive; }},
      {"aleatoric_nontumor", "Aleatoric (non-tumor)", Direction::Lower,
       [](const CaseRecord& c) { return c.nontumor.aleatoric; }},
      {"epistemic_nontumor", "Epistemic (non-tumor)", Direction::Lower,
       [](const CaseRecord& c) { return c.nontumor.epistemic; }},
      {"predictive_nontumor", "Predictive (non-tumor)", Direction::Lower,
       [](const CaseRecord& c) { return c.nontumor.predictive; }},
      {"entropy_tumor", "Entropy (tumor)", Direction::Lower, [](const CaseRecord& c) { return c.tumor.entropy; }},
      {"entropy_nontumor", "Entropy (non-tumor)", Direction::Lower,
       [](const CaseRecord& c) { return c.nontumor.entropy; }},
  };

  for (const auto& spec : per_case) {
    ReportRow row;
    row.metric = spec.metric;
    row.label = spec.label;
    row.direction = spec.dir;
    for (const auto& e : evaluations) {
      std::vector<double> v;
      for (const auto& c : e.cases) v.push_back(spec.get(c));
      row.per_arm.push_back(summarize_finite(v));
      row.values.push_back(std::move(v));
    }
    report.rows.push_back(std::move(row));
  }

  auto pooled_row = [&](const char* metric, const char* label, Direction dir, auto value) {
    ReportRow row;
    row.metric = metric;
    row.label = label;
    row.direction = dir;
    row.pooled = true;
    for (const auto& e : evaluations) row.per_arm.push_back({value(e), 0.0, static_cast<int>(e.cases.size())});
    report.rows.push_back(std::move(row));
  };
  auto pooled_counts = [](const ArmEvaluation& e) {
    ConfusionCounts total;
    for (const auto& c : e.cases) total += c.counts;
    return seg_metrics(total);
  };
  pooled_row("dice_pooled", "Dice (pooled pixels)", Direction::Higher,
             [&](const ArmEvaluation& e) { return pooled_counts(e).dice; });
  pooled_row("f1_pooled", "F1 (pooled pixels)", Direction::Higher,
             [&](const ArmEvaluation& e) { return pooled_counts(e).f1; });
  pooled_row("ece", "ECE", Direction::Lower, [](const ArmEvaluation& e) { return e.ece; });
  pooled_row("brier", "Brier score", Direction::Lower, [](const ArmEvaluation& e) { return e.brier; });

  for (auto& row : report.rows) {
    row.p_vs_best.assign(n_arms, kNaN);
    for (std::size_t a = 0; a < n_arms; ++a) {
      if (!std::isfinite(row.per_arm[a].mean)) continue;
      if (row.best < 0 || better(row.per_arm[a].mean, row.per_arm[static_cast<std::size_t>(row.best)].mean,
                                 row.direction)) {
        row.best = static_cast<int>(a);
      }
    }
    if (row.pooled || n_arms < 2 || row.best < 0) continue;
    // The best arm is compared with the runner-up, every other arm with the best.
    int runner_up = -1;
    for (std::size_t a = 0; a < n_arms; ++a) {
      if (static_cast<int>(a) == row.best || !std::isfinite(row.per_arm[a].mean)) continue;
      if (runner_up < 0 ||
          better(row.per_arm[a].mean, row.per_arm[static_cast<std::size_t>(runner_up)].mean, row.direction)) {
        runner_up = static_cast<int>(a);
      }
    }
    for (std::size_t a = 0; a < n_arms; ++a) {
      const int other = static_cast<int>(a) == row.best ? runner_up : row.best;
      if (other < 0) continue;
      row.p_vs_best[a] = paired_p(row.values[a], row.values[static_cast<std::size_t>(other)]);
    }
  }
  return report;
}

std::string table_tsv(const ExperimentReport& report) {
  std::string out = "metric";
  for (const auto a : report.arms) out += "\t" + to_string(a);
  out += "\n";
  for (const auto& row : report.rows) {
    out += row.metric;
    for (const auto& s : row.per_arm) out += "\t" + (row.pooled ? num6(s.mean) : num6(s.mean) + "±" + num6(s.sem));
    out += "\n";
  }
  return out;
}

std::string metrics_tsv(const ExperimentReport& report) {
  std::string out = "arm\tmetric\tmean\tsem\tn_cases\tp_vs_best\n";
  for (std::size_t a = 0; a < report.arms.size(); ++a) {
    for (const auto& row : report.rows) {
      const auto& s = row.per_arm[a];
      const double p = row.p_vs_best.empty() ? kNaN : row.p_vs_best[a];
      out += to_string(report.arms[a]) + "\t" + row.metric + "\t" + num17(s.mean) + "\t" +
             (row.pooled ? std::string("NA") : num17(s.sem)) + "\t" + std::to_string(s.n) + "\t" +
             (std::isfinite(p) ? num17(p) : std::string("NA")) + "\n";
    }
  }
  return out;
}

std::string table_markdown(const ExperimentReport& report) {
  const int ours = arm_index(report, ArmKind::Ours);
  std::string out = "| Metric |";
  std::string rule = "|---|";
  for (const auto a : report.arms) {
    out += " " + arm_title(a) + " |";
    rule += "---|";
  }
  out += "\n" + rule + "\n";
  for (const auto& row : report.rows) {
    out += "| " + row.label + (row.direction == Direction::Higher ? " ↑" : " ↓") + " |";
    for (std::size_t a = 0; a < report.arms.size(); ++a) {
      const auto& s = row.per_arm[a];
      std::string cell = row.pooled ? num6(s.mean) : num6(s.mean) + " ± " + num6(s.sem);
      if (static_cast<int>(a) == row.best) cell = "**" + cell + "**";
      if (static_cast<int>(a) == ours && !row.pooled) {
        const double p = row.p_vs_best[a];
        if (std::isfinite(p) && p < 0.001) cell += " \\*\\*";
        else if (std::isfinite(p) && p > 0.05) cell += " ~";
      }
      out += " " + cell + " |";
    }
    out += "\n";
  }
  out +=
      "\n↑ higher is better, ↓ lower is better. Bold marks the best arm per row. On the Ours column, "
      "\\*\\* means p < 0.001 and ~ means p > 0.05 (two-sided Wilcoxon signed-rank over test cases) against "
      "the best other arm. Pooled rows are single values over all test pixels.\n";
  return out;
}

std::string summary_text(const ExperimentReport& report) {
  std::ostringstream out;
  out << "arms:";
  for (const auto a : report.arms) out << ' ' << to_string(a);
  out << "\ntest cases: " << (report.rows.empty() ? 0 : report.rows.front().per_arm.front().n) << "\n\n";
  for (const auto& row : report.rows) {
    out << row.metric << ": best = " << (row.best >= 0 ? to_string(report.arms[static_cast<std::size_t>(row.best)]) : "-")
        << "\n";
  }
  const int ours = arm_index(report, ArmKind::Ours);
  const int base = arm_index(report, ArmKind::Baseline);
  const int gauss = arm_index(report, ArmKind::Gaussian);
  if (ours >= 0) {
    const auto& row = report_row(report, "aleatoric_tumor");
    const auto mean = [&](int a) { return row.per_arm[static_cast<std::size_t>(a)].mean; };
    out << "\ntumor aleatoric, ours: " << num6(mean(ours)) << "\n";
    if (base >= 0) {
      const double p = paired_p(row.values[static_cast<std::size_t>(ours)], row.values[static_cast<std::size_t>(base)]);
      out << "  vs baseline: " << num6(mean(base)) << " (ratio " << num6(mean(base) / mean(ours)) << ", p = " << num6(p)
          << ")\n";
    }
    if (gauss >= 0) {
      const double p =
          paired_p(row.values[static_cast<std::size_t>(ours)], row.values[static_cast<std::size_t>(gauss)]);
      out << "  vs gaussian: " << num6(mean(gauss)) << " (p = " << num6(p) << ")\n";
    }
  }
  return out.str();
}

void emit_report(const ExperimentReport& report, const std::filesystem::path& out_dir) {
  write_text_file(out_dir / "table.tsv", table_tsv(report));
  write_text_file(out_dir / "table.md", table_markdown(report));
  write_text_file(out_dir / "metrics.tsv", metrics_tsv(report));
  write_text_file(out_dir / "summary.txt", summary_text(report));
}

void write_png_gray(const std::filesystem::path& path, const ByteMap& pixels) {
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (fp == nullptr) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(pixels.cols()), static_cast<png_uint_32>(pixels.rows()), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (Eigen::Index r = 0; r < pixels.rows(); ++r) {
    png_write_row(png, const_cast<png_bytep>(pixels.data() + r * pixels.cols()));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fclose(fp) != 0) throw IoError("cannot write " + path.string());
}

ByteMap to_gray(const DoubleMap& values, double min_value, double max_value) {
  ByteMap out = ByteMap::Zero(values.rows(), values.cols());
  const double span = max_value - min_value;
  if (!(span > 0.0)) return out;
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    const double t = std::clamp((values.data()[i] - min_value) / span, 0.0, 1.0);
    out.data()[i] = static_cast<std::uint8_t>(std::lround(255.0 * t));
  }
  return out;
}

ByteMap compose_figure(const FigurePanelSet& panels, int gap) {
  const auto h = panels.input.rows(), w = panels.input.cols();
  const auto n_arms = static_cast<Eigen::Index>(panels.arms.size());
  if (static_cast<Eigen::Index>(panels.predicted.size()) != n_arms ||
      static_cast<Eigen::Index>(panels.aleatoric.size()) != n_arms) {
    throw ConfigError("figure: one predicted mask and one aleatoric map per arm required");
  }
  const Eigen::Index cols = std::max<Eigen::Index>(2, n_arms);
  ByteMap canvas = ByteMap::Constant(3 * h + 2 * gap, cols * w + (cols - 1) * gap, 64);
  auto place = [&](const ByteMap& panel, Eigen::Index row, Eigen::Index col) {
    require_same_shape(panel, panels.ground_truth, "figure panel");
    canvas.block(row * (h + gap), col * (w + gap), h, w) = panel;
  };
  const DoubleMap input = panels.input.cast<double>();
  place(to_gray(input, input.minCoeff(), input.maxCoeff()), 0, 0);
  const double label_max = std::max(1, panels.classes - 1);
  place(to_gray(panels.ground_truth.cast<double>(), 0.0, label_max), 0, 1);
  double shared_max = 0.0;
  for (const auto& a : panels.aleatoric) shared_max = std::max(shared_max, a.maxCoeff());
  for (Eigen::Index a = 0; a < n_arms; ++a) {
    place(to_gray(panels.predicted[static_cast<std::size_t>(a)].cast<double>(), 0.0, label_max), 1, a);
    place(to_gray(panels.aleatoric[static_cast<std::size_t>(a)], 0.0, shared_max), 2, a);
  }
  return canvas;
}

}  // namespace uqaug
