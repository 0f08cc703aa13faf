#pragma once

#include "uqaug/datagen.hpp"
#include "uqaug/losses.hpp"
#include "uqaug/nets.hpp"
#include "uqaug/noisemodel.hpp"
#include "uqaug/trainer.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace uqaug {

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out = "runs/default";

  // data.*
  std::string data_source = "synthetic";  // synthetic | ingest
  std::filesystem::path data_path;
  int n_cases = 100;
  PhantomConfig phantom;
  std::array<double, 3> split{0.6, 0.2, 0.2};
  int classes = 2;

  PreprocessConfig prep;  // prep.*

  // recon.*
  BackboneConfig recon_net = BackboneConfig::reconstruction();
  TrainConfig recon_train;
  Likelihood recon_likelihood = Likelihood::Laplace;

  // noise.*
  int noise_T = 20;
  std::string noise_family = "trained";  // trained | gaussian | laplace

  // seg.*
  BackboneConfig seg_net = BackboneConfig::segmentation(2);
  TrainConfig seg_train;
  SegmentationObjectiveConfig seg_loss;

  // aug.*
  std::vector<ArmKind> arms{ArmKind::Baseline, ArmKind::Gaussian, ArmKind::Ours, ArmKind::Full};
  AugmentationArm aug;

  // eval.*
  int eval_T = 20;
  int eval_n_mc = 50;
  int eval_bins = 15;
  int eval_workers = 0;  // 0 = hardware concurrency
  int figure_cases = 3;

  void validate() const;
  Likelihood noise_likelihood() const;
  // The same config with the augmentation section describing a single arm.
  AugmentationArm arm(ArmKind kind) const;
};

struct ConfigField {
  std::string key;
  bool hashed = true;  // false for knobs that cannot change results (worker count, paths)
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

// Every recognised key, bound to fields of `config`.
std::vector<ConfigField> config_fields(ExperimentConfig& config);

void set_config_value(ExperimentConfig& config, const std::string& key, const std::string& value);

// Flat `key = value` lines; '#' starts a comment. Unknown keys are errors.
void apply_config_text(ExperimentConfig& config, const std::string& text, const std::string& origin = "config");
ExperimentConfig load_config(const std::filesystem::path& path);

// Canonical `key = value` dump of keys starting with prefix (all keys when empty).
std::string canonical_config(const ExperimentConfig& config, const std::string& prefix = "",
                             bool hashed_only = false);

}  // namespace uqaug
