#pragma once

#include "uqaug/config.hpp"
#include "uqaug/report.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace uqaug {

// Wraps a failure with the name of the stage that raised it.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// Stage output directory marker: the key the outputs were produced for and a digest of them.
struct Stamp {
  std::string key;
  std::string digest;
};

std::optional<Stamp> read_stamp(const std::filesystem::path& dir);
void write_stamp(const std::filesystem::path& dir, const Stamp& stamp);

std::string hex64(std::uint64_t v);
// FNV-1a over the named files in order (path names and contents).
std::string digest_files(const std::filesystem::path& dir, const std::vector<std::string>& names);

class Experiment {
 public:
  explicit Experiment(ExperimentConfig config, std::ostream* log = nullptr);

  const ExperimentConfig& config() const { return config_; }
  const std::filesystem::path& out() const { return config_.out; }
  std::filesystem::path arm_dir(ArmKind arm) const;

  // Each stage runs its prerequisites first and is skipped when its stamp matches.
  const DatasetSplit& data();
  const Model& recon_model();
  const NoiseModelIndex& noise_model();
  const Model& seg_model(ArmKind arm);
  ArmEvaluation evaluate(ArmKind arm);
  ExperimentReport report();
  std::vector<std::filesystem::path> figures();
  ExperimentReport run_all();

  // Stages executed (not cache hits) so far, in order.
  const std::vector<std::string>& executed() const { return executed_; }
  const std::vector<std::string>& completed() const { return completed_; }

 private:
  template <typename Fn>
  decltype(auto) stage(const std::string& name, Fn&& fn);
  void log(const std::string& line) const;
  const Stamp& stamp_of(const std::string& stage) const;
  std::string data_key() const;
  std::vector<TrainingItem> seg_items(const std::vector<Case>& cases) const;
  ArmEvaluation load_evaluation(ArmKind arm) const;
  void write_provenance() const;

  ExperimentConfig config_;
  std::ostream* log_;
  std::optional<DatasetSplit> data_;
  std::optional<Model> recon_;
  std::optional<NoiseModelIndex> noise_;
  std::map<ArmKind, Model> seg_;
  std::map<std::string, Stamp> stamps_;
  std::vector<std::string> executed_;
  std::vector<std::string> completed_;
};

// Per-case evaluation of a segmentation model on one test case.
struct CaseEvaluation {
  CaseRecord record;
  UncertaintyMaps maps;   // 1 x N rows
  FloatMap prob_fg;       // height x width
  ByteMap predicted;      // height x width
};

CaseEvaluation evaluate_case(const Model& model, const Case& c, int T, int n_mc, std::uint64_t seed);

}  // namespace uqaug
