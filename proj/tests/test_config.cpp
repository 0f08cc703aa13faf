#include "support.hpp"

#include "uqaug/arr_io.hpp"
#include "uqaug/config.hpp"

#include <doctest.h>

#include <set>

using namespace uqaug;

TEST_SUITE("config") {

TEST_CASE("values are parsed into the right fields") {
  ExperimentConfig c;
  apply_config_text(c,
                    "# comment line\n"
                    "seed = 11\n"
                    "data.n_cases = 40   # trailing comment\n"
                    "data.split = 0.5, 0.25, 0.25\n"
                    "data.classes = 3\n"
                    "recon.likelihood = gaussian\n"
                    "seg.dropout = 0.25\n"
                    "aug.arms = baseline,ours\n"
                    "aug.rotation_deg = -5, 5\n"
                    "eval.T = 7\n");
  CHECK(c.seed == 11);
  CHECK(c.n_cases == 40);
  CHECK(c.split[1] == 0.25);
  CHECK(c.classes == 3);
  CHECK(c.seg_net.out_channels_pred == 3);
  CHECK(c.recon_likelihood == Likelihood::Gaussian);
  CHECK(c.noise_likelihood() == Likelihood::Gaussian);
  CHECK(c.seg_net.dropout_p == 0.25);
  CHECK(c.arms == std::vector<ArmKind>{ArmKind::Baseline, ArmKind::Ours});
  CHECK(c.aug.affine.rotation_deg.lo == -5.0);
  CHECK(c.eval_T == 7);
  c.validate();
}

TEST_CASE("errors name the key and the line") {
  ExperimentConfig c;
  CHECK_THROWS_WITH_AS(apply_config_text(c, "seed = 1\nrecon.bogus = 3\n", "x.cfg"), doctest::Contains("x.cfg:2"),
                       ConfigError);
  CHECK_THROWS_AS(set_config_value(c, "seg.lr", "fast"), ConfigError);
  CHECK_THROWS_AS(set_config_value(c, "aug.arms", "baseline,mixup"), ConfigError);
  CHECK_THROWS_AS(apply_config_text(c, "seed 4\n"), ConfigError);
  c = ExperimentConfig{};
  c.data_source = "ingest";
  c.data_path = "/nonexistent/dir";
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("canonical dump round-trips") {
  ExperimentConfig c;
  set_config_value(c, "recon.lr", "0.00025");
  set_config_value(c, "aug.copies", "2");
  set_config_value(c, "noise.family", "gaussian");
  const std::string text = canonical_config(c);
  ExperimentConfig back;
  apply_config_text(back, text);
  CHECK(canonical_config(back) == text);
  CHECK(back.recon_train.lr == 0.00025);

  const std::string seg = canonical_config(c, "seg.");
  CHECK(seg.find("seg.lr = ") != std::string::npos);
  CHECK(seg.find("recon.") == std::string::npos);
  const std::string hashed = canonical_config(c, "", true);
  CHECK(hashed.find("eval.workers") == std::string::npos);
  CHECK(("\n" + hashed).find("\nout = ") == std::string::npos);
}

TEST_CASE("every key is unique and settable from its own dump") {
  ExperimentConfig c;
  std::set<std::string> keys;
  for (const auto& f : config_fields(c)) {
    CHECK(keys.insert(f.key).second);
    CHECK_NOTHROW(f.set(f.get()));
  }
  CHECK(keys.count("data.size"));
  CHECK(keys.count("eval.n_bins"));
  CHECK(keys.count("recon.dropout_warmup"));
}

TEST_CASE("load from a file") {
  testing::TempDir dir("cfg");
  write_text_file(dir.path() / "a.cfg", "seed = 3\nout = somewhere\n");
  const auto c = load_config(dir.path() / "a.cfg");
  CHECK(c.seed == 3);
  CHECK(c.out == "somewhere");
  CHECK_THROWS(load_config(dir.path() / "missing.cfg"));
}

}
