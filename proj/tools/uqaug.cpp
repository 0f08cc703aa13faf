// Command-line driver for the four-arm augmentation experiment.
#include "uqaug/arr_io.hpp"
#include "uqaug/config.hpp"
#include "uqaug/harness.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& opts) {
  cmd->add_option("--config", opts.config_path, "Config file of 'key = value' lines")->check(CLI::ExistingFile);
  cmd->add_option("--seed", opts.seed, "Global seed");
  cmd->add_option("--out", opts.out, "Output directory");
  cmd->add_option("--set", opts.overrides, "Override a config key (key=value), repeatable");
}

uqaug::ExperimentConfig resolve(const CommonOptions& opts) {
  uqaug::ExperimentConfig config = opts.config_path.empty() ? uqaug::ExperimentConfig{}
                                                            : uqaug::load_config(opts.config_path);
  for (const auto& kv : opts.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw uqaug::ConfigError("--set expects key=value, got '" + kv + "'");
    uqaug::set_config_value(config, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (opts.seed) config.seed = *opts.seed;
  if (!opts.out.empty()) config.out = opts.out;
  config.validate();
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Noise-model data augmentation experiment"};
  app.require_subcommand(1);
  CommonOptions opts;
  std::string arm_name;

  auto* gen = app.add_subcommand("gen-data", "Generate or ingest the dataset and its split");
  auto* recon = app.add_subcommand("train-recon", "Train the heteroscedastic reconstruction network");
  auto* fit = app.add_subcommand("fit-noise", "Fit the per-pixel noise model on the training images");
  auto* seg = app.add_subcommand("train-seg", "Train the segmentation network for one augmentation arm");
  seg->add_option("--arm", arm_name, "baseline, gaussian, ours or full")->required();
  auto* eval = app.add_subcommand("evaluate", "MC-dropout evaluation on the test split");
  eval->add_option("--arm", arm_name, "Evaluate one arm (default: all configured arms)");
  auto* report = app.add_subcommand("report", "Write table.tsv, table.md, metrics.tsv and summary.txt");
  auto* figures = app.add_subcommand("figures", "Render per-case prediction and aleatoric panels as PNG");
  auto* all = app.add_subcommand("run-all", "Run every stage; cached stages are skipped");
  auto* show = app.add_subcommand("show-config", "Print the resolved configuration");
  for (auto* cmd : {gen, recon, fit, seg, eval, report, figures, all, show}) add_common(cmd, opts);

  CLI11_PARSE(app, argc, argv);

  uqaug::ExperimentConfig config;
  try {
    config = resolve(opts);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  if (show->parsed()) {
    std::cout << uqaug::canonical_config(config);
    return 0;
  }

  uqaug::Experiment exp(config, &std::cerr);
  try {
    if (gen->parsed()) {
      exp.data();
    } else if (recon->parsed()) {
      exp.recon_model();
    } else if (fit->parsed()) {
      exp.noise_model();
    } else if (seg->parsed()) {
      exp.seg_model(uqaug::parse_arm(arm_name));
    } else if (eval->parsed()) {
      if (!arm_name.empty()) {
        exp.evaluate(uqaug::parse_arm(arm_name));
      } else {
        for (const auto arm : config.arms) exp.evaluate(arm);
      }
    } else if (report->parsed()) {
      exp.report();
    } else if (figures->parsed()) {
      for (const auto& p : exp.figures()) std::cout << p.string() << "\n";
    } else if (all->parsed()) {
      exp.run_all();
      std::cout << uqaug::read_text_file(config.out / "summary.txt");
    }
  } catch (const uqaug::StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    std::cerr << "completed stages:";
    for (const auto& s : exp.completed()) std::cerr << ' ' << s;
    std::cerr << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
