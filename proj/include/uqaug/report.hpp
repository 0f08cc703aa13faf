#pragma once

#include "uqaug/common.hpp"
#include "uqaug/metrics.hpp"
#include "uqaug/noisemodel.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace uqaug {

struct RegionUncertainty {
  double aleatoric = 0.0;
  double epistemic = 0.0;
  double predictive = 0.0;
  double entropy = 0.0;
};

// One evaluated test case. Region aggregates are NaN when the region is empty.
struct CaseRecord {
  std::string case_id;
  ConfusionCounts counts;
  SegMetrics seg;
  RegionUncertainty tumor;
  RegionUncertainty nontumor;
};

std::string case_table_tsv(const std::vector<CaseRecord>& cases);
std::vector<CaseRecord> parse_case_table(const std::string& text);

struct ArmEvaluation {
  ArmKind arm = ArmKind::Baseline;
  std::vector<CaseRecord> cases;
  double ece = 0.0;    // pixels pooled over the test set
  double brier = 0.0;
};

enum class Direction { Higher, Lower };

struct ReportRow {
  std::string metric;
  std::string label;
  Direction direction = Direction::Higher;
  bool pooled = false;                     // single value per arm, no spread or test
  std::vector<Summary> per_arm;            // indexed like ExperimentReport::arms
  std::vector<std::vector<double>> values;  // per-case values (empty for pooled rows)
  std::vector<double> p_vs_best;            // NaN when not applicable
  int best = -1;
};

struct ExperimentReport {
  std::vector<ArmKind> arms;
  std::vector<ReportRow> rows;
};

ExperimentReport build_report(const std::vector<ArmEvaluation>& evaluations);

int arm_index(const ExperimentReport& report, ArmKind arm);
const ReportRow& report_row(const ExperimentReport& report, const std::string& metric);

// Wide table: metric rows x arm columns, cells "mean±sem".
std::string table_tsv(const ExperimentReport& report);
// Long table: arm, metric, mean, sem, n_cases, p_vs_best.
std::string metrics_tsv(const ExperimentReport& report);
// Best per row in bold; on the "ours" column "**" marks p < 0.001 and "~" marks p > 0.05
// against the best other arm.
std::string table_markdown(const ExperimentReport& report);
std::string summary_text(const ExperimentReport& report);

void emit_report(const ExperimentReport& report, const std::filesystem::path& out_dir);

void write_png_gray(const std::filesystem::path& path, const ByteMap& pixels);

// Maps a float image to 8 bits: 0 -> black, max_value -> white. A non-positive max gives black.
ByteMap to_gray(const DoubleMap& values, double min_value, double max_value);

struct FigurePanelSet {
  std::string case_id;
  FloatMap input;
  ByteMap ground_truth;
  int classes = 2;
  std::vector<ArmKind> arms;
  std::vector<ByteMap> predicted;
  std::vector<DoubleMap> aleatoric;
};

// Rows: input and ground truth, predicted masks per arm, aleatoric maps per arm on one
// intensity scale shared by all arms.
ByteMap compose_figure(const FigurePanelSet& panels, int gap = 2);

}  // namespace uqaug
