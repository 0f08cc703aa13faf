#include "uqaug/config.hpp"

#include "uqaug/arr_io.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

namespace uqaug {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end) throw ConfigError("config: bad value '" + text + "' for " + key);
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "on" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "off" || text == "no") return false;
  throw ConfigError("config: bad boolean '" + text + "' for " + key);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) parts.push_back(item);
  }
  return parts;
}

struct FieldList {
  std::vector<ConfigField> fields;

  void add(std::string key, std::function<std::string()> get, std::function<void(const std::string&)> set,
           bool hashed = true) {
    fields.push_back({std::move(key), hashed, std::move(get), std::move(set)});
  }
  void num(const std::string& key, double& v, bool hashed = true) {
    add(key, [&v] { return fmt(v); }, [&v, key](const std::string& s) { v = parse_number<double>(key, s); }, hashed);
  }
  void num(const std::string& key, int& v, bool hashed = true) {
    add(key, [&v] { return std::to_string(v); },
        [&v, key](const std::string& s) { v = parse_number<int>(key, s); }, hashed);
  }
  void num(const std::string& key, std::uint64_t& v) {
    add(key, [&v] { return std::to_string(v); },
        [&v, key](const std::string& s) { v = parse_number<std::uint64_t>(key, s); });
  }
  void flag(const std::string& key, bool& v) {
    add(key, [&v] { return v ? std::string("true") : std::string("false"); },
        [&v, key](const std::string& s) { v = parse_bool(key, s); });
  }
  void range(const std::string& key, Range& r) {
    add(key, [&r] { return fmt(r.lo) + "," + fmt(r.hi); },
        [&r, key](const std::string& s) {
          const auto parts = split_list(s);
          if (parts.size() != 2) throw ConfigError("config: " + key + " expects 'lo,hi'");
          r = {parse_number<double>(key, parts[0]), parse_number<double>(key, parts[1])};
        });
  }
  void train(const std::string& prefix, TrainConfig& t) {
    num(prefix + "lr", t.lr);
    num(prefix + "weight_decay", t.weight_decay);
    num(prefix + "plateau_factor", t.plateau_factor);
    num(prefix + "patience", t.patience);
    num(prefix + "max_epochs", t.max_epochs);
    num(prefix + "batch_size", t.batch_size);
    num(prefix + "dropout_warmup", t.dropout_warmup_epochs);
  }
  void net(const std::string& prefix, BackboneConfig& n) {
    num(prefix + "depth", n.depth);
    num(prefix + "base_channels", n.base_channels);
    num(prefix + "dropout", n.dropout_p);
  }
};

}  // namespace

void ExperimentConfig::validate() const {
  if (data_source != "synthetic" && data_source != "ingest") {
    throw ConfigError("config: data.source must be 'synthetic' or 'ingest'");
  }
  if (data_source == "ingest" && !std::filesystem::is_directory(data_path)) {
    throw ConfigError("config: data.path '" + data_path.string() + "' is not a directory");
  }
  if (data_source == "synthetic") {
    phantom.validate();
    if (n_cases < 1) throw ConfigError("config: data.n_cases must be >= 1");
  }
  if (classes < 2) throw ConfigError("config: data.classes must be >= 2");
  recon_net.validate();
  seg_net.validate();
  recon_train.validate();
  seg_train.validate();
  if (noise_T < 2 || eval_T < 2) throw ConfigError("config: noise.T and eval.T must be >= 2");
  if (eval_n_mc < 1 || seg_loss.n_mc < 1) throw ConfigError("config: n_mc must be >= 1");
  if (eval_bins < 1) throw ConfigError("config: eval.n_bins must be >= 1");
  if (eval_workers < 0 || figure_cases < 0) throw ConfigError("config: eval.workers/figure_cases must be >= 0");
  if (arms.empty()) throw ConfigError("config: aug.arms is empty");
  if (aug.copies < 0) throw ConfigError("config: aug.copies must be >= 0");
  if (aug.gaussian_std < 0.0) throw ConfigError("config: aug.gaussian_std must be >= 0");
  noise_likelihood();
}

Likelihood ExperimentConfig::noise_likelihood() const {
  if (noise_family == "trained") return recon_likelihood;
  return parse_likelihood(noise_family);
}

AugmentationArm ExperimentConfig::arm(ArmKind kind) const {
  AugmentationArm a = aug;
  a.kind = kind;
  return a;
}

std::vector<ConfigField> config_fields(ExperimentConfig& c) {
  FieldList f;
  f.num("seed", c.seed);
  f.add("out", [&c] { return c.out.string(); }, [&c](const std::string& s) { c.out = s; }, false);

  f.add("data.source", [&c] { return c.data_source; }, [&c](const std::string& s) { c.data_source = s; });
  f.add("data.path", [&c] { return c.data_path.string(); }, [&c](const std::string& s) { c.data_path = s; });
  f.num("data.n_cases", c.n_cases);
  f.num("data.size", c.phantom.size);
  f.num("data.brain_radius", c.phantom.brain_radius);
  f.num("data.brain_intensity", c.phantom.brain_intensity);
  f.num("data.tumor_contrast", c.phantom.tumor_contrast);
  f.num("data.min_tumors", c.phantom.min_tumors);
  f.num("data.max_tumors", c.phantom.max_tumors);
  f.num("data.tumor_min_axis", c.phantom.tumor_min_axis);
  f.num("data.tumor_max_axis", c.phantom.tumor_max_axis);
  f.num("data.sigma_interior", c.phantom.noise.sigma_interior);
  f.num("data.sigma_boundary", c.phantom.noise.sigma_boundary);
  f.num("data.sigma_background", c.phantom.noise.sigma_background);
  f.num("data.boundary_width", c.phantom.noise.boundary_width);
  f.add("data.split", [&c] { return fmt(c.split[0]) + "," + fmt(c.split[1]) + "," + fmt(c.split[2]); },
        [&c](const std::string& s) {
          const auto parts = split_list(s);
          if (parts.size() != 3) throw ConfigError("config: data.split expects 'train,val,test'");
          for (std::size_t i = 0; i < 3; ++i) c.split[i] = parse_number<double>("data.split", parts[i]);
        });
  f.add("data.classes", [&c] { return std::to_string(c.classes); },
        [&c](const std::string& s) {
          c.classes = parse_number<int>("data.classes", s);
          c.seg_net.out_channels_pred = c.classes;
          c.seg_net.out_channels_scale = c.classes;
        });

  f.flag("prep.normalize", c.prep.normalize);
  f.num("prep.crop_h", c.prep.crop_h);
  f.num("prep.crop_w", c.prep.crop_w);

  f.net("recon.", c.recon_net);
  f.train("recon.", c.recon_train);
  f.add("recon.likelihood", [&c] { return to_string(c.recon_likelihood); },
        [&c](const std::string& s) { c.recon_likelihood = parse_likelihood(s); });

  f.num("noise.T", c.noise_T);
  f.add("noise.family", [&c] { return c.noise_family; },
        [&c](const std::string& s) {
          if (s != "trained") parse_likelihood(s);
          c.noise_family = s;
        });

  f.net("seg.", c.seg_net);
  f.train("seg.", c.seg_train);
  f.num("seg.ce_weight", c.seg_loss.ce_weight);
  f.num("seg.dice_smooth", c.seg_loss.dice_smooth);
  f.num("seg.n_mc", c.seg_loss.n_mc);

  f.add("aug.arms",
        [&c] {
          std::string s;
          for (const auto a : c.arms) s += (s.empty() ? "" : ",") + to_string(a);
          return s;
        },
        [&c](const std::string& s) {
          c.arms.clear();
          for (const auto& name : split_list(s)) {
            const auto kind = parse_arm(name);
            if (std::find(c.arms.begin(), c.arms.end(), kind) == c.arms.end()) c.arms.push_back(kind);
          }
        });
  f.num("aug.copies", c.aug.copies);
  f.flag("aug.online", c.aug.online);
  f.num("aug.gaussian_std", c.aug.gaussian_std);
  f.range("aug.rotation_deg", c.aug.affine.rotation_deg);
  f.range("aug.scale", c.aug.affine.scale);
  f.range("aug.shear_deg", c.aug.affine.shear_deg);
  f.num("aug.flip_h_prob", c.aug.affine.flip_h_prob);
  f.num("aug.flip_v_prob", c.aug.affine.flip_v_prob);
  f.num("aug.elastic_alpha", c.aug.affine.elastic_alpha);
  f.num("aug.elastic_sigma", c.aug.affine.elastic_sigma);

  f.num("eval.T", c.eval_T);
  f.num("eval.n_mc", c.eval_n_mc);
  f.num("eval.n_bins", c.eval_bins);
  f.num("eval.workers", c.eval_workers, false);
  f.num("eval.figure_cases", c.figure_cases, false);
  return std::move(f.fields);
}

void set_config_value(ExperimentConfig& config, const std::string& key, const std::string& value) {
  for (auto& field : config_fields(config)) {
    if (field.key == key) {
      field.set(value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

void apply_config_text(ExperimentConfig& config, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    try {
      set_config_value(config, trim(std::string_view(line).substr(0, eq)), trim(std::string_view(line).substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  ExperimentConfig config;
  apply_config_text(config, read_text_file(path), path.string());
  return config;
}

std::string canonical_config(const ExperimentConfig& config, const std::string& prefix, bool hashed_only) {
  ExperimentConfig copy = config;
  std::string out;
  for (const auto& field : config_fields(copy)) {
    if (hashed_only && !field.hashed) continue;
    if (field.key.rfind(prefix, 0) != 0) continue;
    out += field.key + " = " + field.get() + "\n";
  }
  return out;
}

}  // namespace uqaug
