#include "support.hpp"

#include "uqaug/arr_io.hpp"
#include "uqaug/harness.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

using namespace uqaug;

namespace {

ExperimentConfig tiny(const std::filesystem::path& out, const std::string& arms) {
  ExperimentConfig c;
  apply_config_text(c,
                    "data.n_cases = 20\n"
                    "data.size = 32\n"
                    "data.brain_radius = 13\n"
                    "data.tumor_min_axis = 2\n"
                    "data.tumor_max_axis = 5\n"
                    "recon.base_channels = 4\n"
                    "recon.depth = 2\n"
                    "recon.max_epochs = 2\n"
                    "recon.dropout_warmup = 1\n"
                    "seg.base_channels = 4\n"
                    "seg.depth = 2\n"
                    "seg.max_epochs = 2\n"
                    "seg.dropout_warmup = 1\n"
                    "seg.n_mc = 3\n"
                    "noise.T = 3\n"
                    "eval.T = 3\n"
                    "eval.n_mc = 5\n"
                    "eval.figure_cases = 2\n",
                    "tiny");
  set_config_value(c, "aug.arms", arms);
  c.seed = 5;
  c.out = out;
  return c;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::string> cells_of(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  for (std::string c; std::getline(in, c, '\t');) out.push_back(c);
  return out;
}

std::string fmt6(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

TEST_SUITE("harness") {

TEST_CASE("single-arm run, cache hits and byte-identical rerun") {
  testing::TempDir dir("single");
  const auto config = tiny(dir.path(), "baseline");
  Experiment first(config);
  const auto report = first.run_all();
  CHECK(report.arms == std::vector<ArmKind>{ArmKind::Baseline});
  CHECK(report.rows.size() == 18);
  CHECK(first.executed() == std::vector<std::string>{"gen-data", "train-seg:baseline", "evaluate:baseline"});
  CHECK(cells_of(lines_of(read_text_file(dir.path() / "table.tsv"))[0]).size() == 2);
  CHECK(std::filesystem::exists(dir.path() / "baseline" / "cases" / "cases.tsv"));
  CHECK(std::filesystem::exists(dir.path() / "provenance.txt"));
  const std::string table = read_text_file(dir.path() / "table.tsv");

  Experiment again(config);
  again.run_all();
  CHECK(again.executed().empty());
  CHECK(read_text_file(dir.path() / "table.tsv") == table);

  SUBCASE("changing a segmentation knob reruns only downstream stages") {
    auto changed = config;
    set_config_value(changed, "seg.lr", "0.002");
    Experiment third(changed);
    third.run_all();
    CHECK(third.executed() == std::vector<std::string>{"train-seg:baseline", "evaluate:baseline"});
  }
  SUBCASE("worker count does not change results") {
    auto workers = config;
    workers.eval_workers = 3;
    const std::string cases = read_text_file(dir.path() / "baseline" / "cases" / "cases.tsv");
    std::filesystem::remove_all(dir.path() / "baseline" / "cases");
    Experiment fourth(workers);
    fourth.evaluate(ArmKind::Baseline);
    CHECK(fourth.executed() == std::vector<std::string>{"evaluate:baseline"});
    CHECK(read_text_file(dir.path() / "baseline" / "cases" / "cases.tsv") == cases);
  }
}

TEST_CASE("four-arm run: shared inputs, arm configs, audit and figures") {
  testing::TempDir dir("four");
  const auto config = tiny(dir.path(), "baseline,gaussian,ours,full");
  Experiment exp(config);
  const auto report = exp.run_all();
  REQUIRE(report.arms.size() == 4);
  const auto& exec = exp.executed();
  CHECK(std::count(exec.begin(), exec.end(), "train-recon") == 1);
  CHECK(std::count(exec.begin(), exec.end(), "gen-data") == 1);

  SUBCASE("arm configs differ only in the augmentation section") {
    const auto base = lines_of(read_text_file(dir.path() / "baseline" / "config.txt"));
    for (const char* arm : {"gaussian", "ours", "full"}) {
      const auto other = lines_of(read_text_file(dir.path() / arm / "config.txt"));
      REQUIRE(other.size() == base.size());
      for (std::size_t i = 0; i < base.size(); ++i) {
        if (base[i] != other[i]) CHECK(base[i].rfind("aug.", 0) == 0);
      }
    }
  }

  SUBCASE("every table number is recomputed from persisted per-case files") {
    const auto rows = lines_of(read_text_file(dir.path() / "table.tsv"));
    const auto header = cells_of(rows[0]);
    const auto split = read_dataset(dir.path() / "data");
    for (std::size_t a = 1; a < header.size(); ++a) {
      const auto arm_root = dir.path() / header[a];
      const auto cases = parse_case_table(read_text_file(arm_root / "cases" / "cases.tsv"));
      REQUIRE(cases.size() == split.test.size());
      CalibrationPool pool;
      ConfusionCounts total;
      for (std::size_t i = 0; i < cases.size(); ++i) {
        const auto& c = split.test[i];
        pool.add(read_arr_float(arm_root / "maps" / (c.id + "_prob.arr")).cast<double>(), c.mask, c.region);
        total += cases[i].counts;
      }
      for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto cells = cells_of(rows[r]);
        const std::string& metric = cells[0];
        std::string expect;
        if (metric == "ece") {
          expect = fmt6(pool.ece(config.eval_bins));
        } else if (metric == "brier") {
          expect = fmt6(pool.brier());
        } else if (metric == "dice_pooled") {
          expect = fmt6(seg_metrics(total).dice);
        } else if (metric == "f1_pooled") {
          expect = fmt6(seg_metrics(total).f1);
        } else {
          std::vector<double> v;
          for (const auto& c : cases) {
            const double x = metric == "dice"                  ? c.seg.dice
                             : metric == "precision"           ? c.seg.precision
                             : metric == "recall"              ? c.seg.recall
                             : metric == "f1"                  ? c.seg.f1
                             : metric == "jaccard"             ? c.seg.jaccard
                             : metric == "specificity"         ? c.seg.specificity
                             : metric == "aleatoric_tumor"     ? c.tumor.aleatoric
                             : metric == "epistemic_tumor"     ? c.tumor.epistemic
                             : metric == "predictive_tumor"    ? c.tumor.predictive
                             : metric == "entropy_tumor"       ? c.tumor.entropy
                             : metric == "aleatoric_nontumor"  ? c.nontumor.aleatoric
                             : metric == "epistemic_nontumor"  ? c.nontumor.epistemic
                             : metric == "predictive_nontumor" ? c.nontumor.predictive
                                                               : c.nontumor.entropy;
            if (std::isfinite(x)) v.push_back(x);
          }
          const auto s = summarize(v);
          expect = fmt6(s.mean) + "±" + fmt6(s.sem);
        }
        CAPTURE(metric);
        CHECK(cells[a] == expect);
      }
    }
  }

  SUBCASE("figures are written and missing maps are listed") {
    const auto split = read_dataset(dir.path() / "data");
    for (std::size_t i = 0; i < 2; ++i) {
      CHECK(std::filesystem::exists(dir.path() / "figures" / (split.test[i].id + ".png")));
    }
    const auto gone = dir.path() / "ours" / "maps" / (split.test[1].id + "_ale.arr");
    std::filesystem::remove(gone);
    Experiment again(config);
    CHECK_THROWS_WITH_AS(again.figures(), doctest::Contains(gone.string().c_str()), StageError);
  }
}

TEST_CASE("stage failures carry the stage name") {
  testing::TempDir dir("fail");
  testing::TempDir data("faildata");
  write_text_file(data.path() / "manifest.tsv", "case_id\nghost\n");
  auto config = tiny(dir.path(), "baseline");
  config.data_source = "ingest";
  config.data_path = data.path();
  Experiment exp(config);
  try {
    exp.run_all();
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == "gen-data");
    CHECK(std::string(e.what()).find("ghost") != std::string::npos);
  }
  CHECK(exp.completed().empty());
}

TEST_CASE("stamps") {
  testing::TempDir dir("stamp");
  CHECK_FALSE(read_stamp(dir.path()).has_value());
  write_stamp(dir.path(), {"k1", "d1"});
  const auto s = read_stamp(dir.path());
  REQUIRE(s.has_value());
  CHECK(s->key == "k1");
  CHECK(s->digest == "d1");
  write_text_file(dir.path() / "a", "x");
  const auto d1 = digest_files(dir.path(), {"a"});
  write_text_file(dir.path() / "a", "y");
  CHECK(digest_files(dir.path(), {"a"}) != d1);
  CHECK(hex64(255) == "00000000000000ff");
}

}
