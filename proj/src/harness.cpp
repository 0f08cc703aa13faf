#include "uqaug/harness.hpp"

#include "uqaug/arr_io.hpp"
#include "uqaug/rng.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

namespace uqaug {

namespace {

// Seed tags, one stream per purpose.
constexpr std::uint64_t kDataTag = 0x4441;
constexpr std::uint64_t kSplitTag = 0x5350;
constexpr std::uint64_t kReconInitTag = 0x5249;
constexpr std::uint64_t kReconTrainTag = 0x5254;
constexpr std::uint64_t kNoiseTag = 0x4e4d;
constexpr std::uint64_t kAugTag = 0x4147;
constexpr std::uint64_t kSegInitTag = 0x5349;
constexpr std::uint64_t kSegTrainTag = 0x5354;
constexpr std::uint64_t kEvalTag = 0x4556;

std::uint64_t seed_for(const ExperimentConfig& c, std::uint64_t tag) { return derive_seed(c.seed, {tag}); }

std::string key_of(std::initializer_list<std::string_view> parts) {
  Fnv1a h;
  for (const auto p : parts) {
    h.update(p);
    h.update("\x1f", 1);
  }
  return hex64(h.digest());
}

TrainingItem recon_item(const Case& c) { return {c.id, c.image.pixels, c.image.pixels, {}}; }

std::vector<std::string> list_files(const std::filesystem::path& dir) {
  std::vector<std::string> names;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.is_regular_file() && name != "stamp") names.push_back(name);
  }
  std::sort(names.begin(), names.end());
  return names;
}

// Augmentation settings that affect the given arm; other arms' knobs stay out of its key.
std::string arm_key_text(const ExperimentConfig& c, ArmKind arm) {
  std::string text = "arm = " + to_string(arm) + "\n";
  if (arm == ArmKind::Baseline) return text;
  text += canonical_config(c, "aug.copies") + canonical_config(c, "aug.online");
  if (arm == ArmKind::Gaussian) text += canonical_config(c, "aug.gaussian_std");
  if (arm == ArmKind::Full) {
    for (const char* k : {"aug.rotation_deg", "aug.scale", "aug.shear_deg", "aug.flip_h_prob", "aug.flip_v_prob",
                          "aug.elastic_alpha", "aug.elastic_sigma"}) {
      text += canonical_config(c, k);
    }
  }
  return text;
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::optional<Stamp> read_stamp(const std::filesystem::path& dir) {
  std::ifstream in(dir / "stamp");
  if (!in) return std::nullopt;
  Stamp s;
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("key ", 0) == 0) s.key = line.substr(4);
    if (line.rfind("digest ", 0) == 0) s.digest = line.substr(7);
  }
  if (s.key.empty() || s.digest.empty()) return std::nullopt;
  return s;
}

void write_stamp(const std::filesystem::path& dir, const Stamp& stamp) {
  write_text_file(dir / "stamp", "key " + stamp.key + "\ndigest " + stamp.digest + "\n");
}

std::string digest_files(const std::filesystem::path& dir, const std::vector<std::string>& names) {
  Fnv1a h;
  for (const auto& name : names) {
    h.update(name);
    const auto bytes = read_file_bytes(dir / name);
    const std::uint64_t n = bytes.size();
    h.update(&n, sizeof n);
    h.update(bytes.data(), bytes.size());
  }
  return hex64(h.digest());
}

CaseEvaluation evaluate_case(const Model& model, const Case& c, int T, int n_mc, std::uint64_t seed) {
  const int h = c.image.height(), w = c.image.width();
  McOptions options;
  options.n_mc = n_mc;
  const auto stack = mc_sample(model, c.image, T, seed, options);

  CaseEvaluation out;
  out.maps = decompose_segmentation(stack, 1);
  const DoubleMap probs = mean_class_probs(stack);
  const DoubleMap entropy = entropy_map(probs);

  out.predicted = ByteMap(h, w);
  for (Eigen::Index i = 0; i < probs.cols(); ++i) {
    Eigen::Index best = 0;
    probs.col(i).maxCoeff(&best);
    out.predicted.data()[i] = static_cast<std::uint8_t>(best);
  }
  out.prob_fg = as_image(probs.row(1), h, w).cast<float>();

  CaseRecord& r = out.record;
  r.case_id = c.id;
  r.counts = confusion(MaskImage{out.predicted, c.mask.k}, c.mask, c.region);
  r.seg = seg_metrics(r.counts);

  ByteMap tumor(h, w), nontumor(h, w);
  for (Eigen::Index i = 0; i < tumor.size(); ++i) {
    const bool in_region = c.region.member.data()[i] != 0;
    const bool fg = c.mask.labels.data()[i] == 1;
    tumor.data()[i] = in_region && fg;
    nontumor.data()[i] = in_region && !fg;
  }
  auto aggregate = [&](const ByteMap& region) {
    RegionUncertainty u;
    if ((region.array() != 0).count() == 0) {
      const double nan = std::numeric_limits<double>::quiet_NaN();
      return RegionUncertainty{nan, nan, nan, nan};
    }
    u.aleatoric = aggregate_region(out.maps.aleatoric, region);
    u.epistemic = aggregate_region(out.maps.epistemic, region);
    u.predictive = aggregate_region(out.maps.predictive, region);
    u.entropy = aggregate_region(entropy, region);
    return u;
  };
  r.tumor = aggregate(tumor);
  r.nontumor = aggregate(nontumor);
  return out;
}

Experiment::Experiment(ExperimentConfig config, std::ostream* log) : config_(std::move(config)), log_(log) {
  config_.validate();
}

std::filesystem::path Experiment::arm_dir(ArmKind arm) const { return config_.out / to_string(arm); }

void Experiment::log(const std::string& line) const {
  if (log_ != nullptr) *log_ << line << std::endl;
}

template <typename Fn>
decltype(auto) Experiment::stage(const std::string& name, Fn&& fn) {
  try {
    if constexpr (std::is_void_v<decltype(fn())>) {
      fn();
      completed_.push_back(name);
    } else {
      decltype(auto) result = fn();
      completed_.push_back(name);
      return result;
    }
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

const Stamp& Experiment::stamp_of(const std::string& stage) const {
  const auto it = stamps_.find(stage);
  if (it == stamps_.end()) throw ConfigError("internal: stage " + stage + " has not run");
  return it->second;
}

std::string Experiment::data_key() const {
  return key_of({canonical_config(config_, "data.", true), canonical_config(config_, "prep.", true),
                 std::to_string(config_.seed)});
}

const DatasetSplit& Experiment::data() {
  if (data_) return *data_;
  return stage("gen-data", [&]() -> const DatasetSplit& {
    const auto dir = config_.out / "data";
    const auto key = data_key();
    const auto stamp = read_stamp(dir);
    if (stamp && stamp->key == key) {
      log("[gen-data] cached");
    } else {
      log("[gen-data] building dataset");
      DatasetSplit split;
      if (config_.data_source == "synthetic") {
        auto cases = generate_phantom_dataset(config_.n_cases, config_.phantom, seed_for(config_, kDataTag));
        for (auto& c : cases) c = preprocess_case(c, config_.prep);
        split = split_dataset(std::move(cases), config_.split, seed_for(config_, kSplitTag));
      } else {
        split = ingest_dataset(config_.data_path, config_.prep, config_.split, seed_for(config_, kSplitTag),
                               config_.classes);
      }
      std::filesystem::remove_all(dir);
      write_dataset(dir, split);
      write_stamp(dir, {key, digest_files(dir, list_files(dir))});
      executed_.push_back("gen-data");
    }
    stamps_["gen-data"] = *read_stamp(dir);
    data_ = read_dataset(dir);
    for (auto* part : {&data_->train, &data_->val, &data_->test}) {
      for (auto& c : *part) c.mask.k = config_.classes;
    }
    log("[gen-data] " + std::to_string(data_->train.size()) + " train / " + std::to_string(data_->val.size()) +
        " val / " + std::to_string(data_->test.size()) + " test");
    if (data_->train.empty() || data_->val.empty() || data_->test.empty()) {
      throw ConfigError("every split needs at least one case");
    }
    return *data_;
  });
}

namespace {

// Trains with checkpointing; a run interrupted under the same key resumes from its checkpoint.
TrainResult train_resumable(Model& model, const LossFn& loss, const std::vector<TrainingItem>& train_items,
                            const std::vector<TrainingItem>& val_items, const TrainConfig& tc,
                            const std::filesystem::path& dir, const std::string& key, TrainHooks hooks) {
  std::filesystem::create_directories(dir);
  hooks.checkpoint_path = dir / "train.ckpt";
  const auto pending = dir / "pending";
  const bool can_resume = std::filesystem::exists(hooks.checkpoint_path) && std::filesystem::exists(pending) &&
                          read_text_file(pending) == key;
  if (can_resume) return resume(hooks.checkpoint_path, model, loss, train_items, val_items, hooks);
  std::filesystem::remove(hooks.checkpoint_path);
  write_text_file(pending, key);
  return train(model, loss, train_items, val_items, tc, hooks);
}

void save_model(const std::filesystem::path& path, const Model& model) {
  std::ostringstream out(std::ios::binary);
  write_model(out, model);
  const auto s = out.str();
  write_file_bytes(path, std::vector<std::uint8_t>(s.begin(), s.end()));
}

Model load_model(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()), std::ios::binary);
  return read_model(in);
}

std::function<void(const EpochRecord&)> epoch_logger(std::ostream* log, std::string tag, int max_epochs) {
  if (log == nullptr) return {};
  return [log, tag = std::move(tag), max_epochs](const EpochRecord& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "[%s] epoch %d/%d train %.6g val %.6g lr %.3g", tag.c_str(), r.epoch + 1,
                  max_epochs, r.train_loss, r.val_loss, r.lr);
    *log << buf << std::endl;
  };
}

}  // namespace

const Model& Experiment::recon_model() {
  if (recon_) return *recon_;
  const auto& split = data();
  return stage("train-recon", [&]() -> const Model& {
    const auto dir = config_.out / "recon";
    const auto key = key_of({stamp_of("gen-data").digest, canonical_config(config_, "recon.", true),
                             std::to_string(config_.seed)});
    const auto stamp = read_stamp(dir);
    if (stamp && stamp->key == key) {
      log("[train-recon] cached");
      recon_ = load_model(dir / "model.bin");
    } else {
      log("[train-recon] training");
      Model model = build_backbone(config_.recon_net, seed_for(config_, kReconInitTag));
      std::vector<TrainingItem> train_items, val_items;
      for (const auto& c : split.train) train_items.push_back(recon_item(c));
      for (const auto& c : split.val) val_items.push_back(recon_item(c));
      TrainConfig tc = config_.recon_train;
      tc.seed = seed_for(config_, kReconTrainTag);
      TrainHooks hooks;
      hooks.on_epoch = epoch_logger(log_, "train-recon", tc.max_epochs);
      const auto result = train_resumable(model, regression_loss_fn(config_.recon_likelihood), train_items,
                                          val_items, tc, dir, key, hooks);
      save_model(dir / "model.bin", model);
      write_text_file(dir / "history.tsv", history_tsv(result.history));
      write_stamp(dir, {key, digest_files(dir, {"model.bin"})});
      executed_.push_back("train-recon");
      recon_ = std::move(model);
    }
    stamps_["train-recon"] = *read_stamp(dir);
    return *recon_;
  });
}

const NoiseModelIndex& Experiment::noise_model() {
  if (noise_) return *noise_;
  const auto& split = data();
  const auto& recon = recon_model();
  return stage("fit-noise", [&]() -> const NoiseModelIndex& {
    const auto dir = config_.out / "noise";
    const auto family = config_.noise_likelihood();
    const auto key = key_of({stamp_of("train-recon").digest, stamp_of("gen-data").digest,
                             canonical_config(config_, "noise.", true), to_string(family),
                             std::to_string(config_.seed)});
    const auto stamp = read_stamp(dir);
    std::vector<NoiseModelEntry> entries;
    if (stamp && stamp->key == key) {
      log("[fit-noise] cached");
      entries = read_noise_model(dir);
    } else {
      log("[fit-noise] sampling " + std::to_string(split.train.size()) + " training images");
      const auto seed = seed_for(config_, kNoiseTag);
      entries = fit_noise_model(recon, split.train, config_.noise_T, seed, family);
      std::filesystem::remove_all(dir);
      write_noise_model(dir, entries, config_.noise_T, seed);
      write_stamp(dir, {key, digest_files(dir, list_files(dir))});
      executed_.push_back("fit-noise");
    }
    stamps_["fit-noise"] = *read_stamp(dir);
    NoiseModelIndex index;
    for (auto& e : entries) {
      const auto id = e.case_id;
      index.emplace(id, std::move(e));
    }
    noise_ = std::move(index);
    return *noise_;
  });
}

std::vector<TrainingItem> Experiment::seg_items(const std::vector<Case>& cases) const {
  std::vector<TrainingItem> items;
  items.reserve(cases.size());
  for (const auto& c : cases) items.push_back({c.id, c.image.pixels, {}, c.mask.labels});
  return items;
}

const Model& Experiment::seg_model(ArmKind arm) {
  if (const auto it = seg_.find(arm); it != seg_.end()) return it->second;
  const auto& split = data();
  const NoiseModelIndex* nm = arm == ArmKind::Ours ? &noise_model() : nullptr;
  const std::string name = "train-seg:" + to_string(arm);
  return stage(name, [&]() -> const Model& {
    const auto root = arm_dir(arm);
    const auto dir = root / "train";
    const auto key = key_of({stamp_of("gen-data").digest, nm ? stamp_of("fit-noise").digest : std::string("-"),
                             canonical_config(config_, "seg.", true), arm_key_text(config_, arm),
                             std::to_string(config_.seed)});
    ExperimentConfig arm_config = config_;
    arm_config.arms = {arm};
    write_text_file(root / "config.txt", canonical_config(arm_config));

    const auto stamp = read_stamp(dir);
    if (stamp && stamp->key == key) {
      log("[" + name + "] cached");
      seg_.emplace(arm, load_model(dir / "model.bin"));
    } else {
      const auto spec = config_.arm(arm);
      const auto aug_seed = seed_for(config_, kAugTag);
      TrainHooks hooks;
      std::vector<TrainingItem> train_items;
      if (spec.online && arm != ArmKind::Baseline) {
        hooks.epoch_data = [this, &split, spec, nm, aug_seed](int epoch) {
          return seg_items(build_augmented_trainset(split.train, spec, nm,
                                                    derive_seed(aug_seed, {static_cast<std::uint64_t>(epoch)})));
        };
      } else {
        train_items = seg_items(build_augmented_trainset(split.train, spec, nm, aug_seed));
      }
      log("[" + name + "] training on " +
          (hooks.epoch_data ? std::string("per-epoch resampled data")
                            : std::to_string(train_items.size()) + " images"));
      Model model = build_backbone(config_.seg_net, seed_for(config_, kSegInitTag));
      TrainConfig tc = config_.seg_train;
      tc.seed = seed_for(config_, kSegTrainTag);
      hooks.on_epoch = epoch_logger(log_, name, tc.max_epochs);
      const auto result = train_resumable(model, segmentation_loss_fn(config_.seg_loss), train_items,
                                          seg_items(split.val), tc, dir, key, hooks);
      save_model(dir / "model.bin", model);
      write_text_file(dir / "history.tsv", history_tsv(result.history));
      write_stamp(dir, {key, digest_files(dir, {"model.bin"})});
      executed_.push_back(name);
      seg_.emplace(arm, std::move(model));
    }
    stamps_[name] = *read_stamp(dir);
    return seg_.at(arm);
  });
}

ArmEvaluation Experiment::load_evaluation(ArmKind arm) const {
  const auto root = arm_dir(arm);
  ArmEvaluation eval;
  eval.arm = arm;
  eval.cases = parse_case_table(read_text_file(root / "cases" / "cases.tsv"));
  const auto& test = data_->test;
  if (eval.cases.size() != test.size()) throw IoError("cases.tsv does not match the test split");
  CalibrationPool pool;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (eval.cases[i].case_id != test[i].id) throw IoError("cases.tsv order does not match the test split");
    const DoubleMap prob = read_arr_float(root / "maps" / (test[i].id + "_prob.arr")).cast<double>();
    pool.add(prob, test[i].mask, test[i].region);
  }
  eval.ece = pool.ece(config_.eval_bins);
  eval.brier = pool.brier();
  return eval;
}

ArmEvaluation Experiment::evaluate(ArmKind arm) {
  const auto& split = data();
  const auto& model = seg_model(arm);
  const std::string name = "evaluate:" + to_string(arm);
  return stage(name, [&]() {
    const auto root = arm_dir(arm);
    const auto dir = root / "cases";
    const auto key = key_of({stamps_.at("train-seg:" + to_string(arm)).digest, stamp_of("gen-data").digest,
                             canonical_config(config_, "eval.", true), std::to_string(config_.seed)});
    const auto stamp = read_stamp(dir);
    if (stamp && stamp->key == key) {
      log("[" + name + "] cached");
    } else {
      const auto& test = split.test;
      const auto eval_seed = seed_for(config_, kEvalTag);
      int workers = config_.eval_workers > 0 ? config_.eval_workers
                                             : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
      workers = std::min<int>(workers, static_cast<int>(test.size()));
      log("[" + name + "] " + std::to_string(test.size()) + " cases, T = " + std::to_string(config_.eval_T) +
          ", " + std::to_string(workers) + " worker(s)");

      std::filesystem::remove_all(dir);
      std::filesystem::remove_all(root / "maps");
      std::filesystem::create_directories(root / "maps");
      std::vector<CaseRecord> records(test.size());
      std::atomic<std::size_t> next{0};
      std::exception_ptr failure;
      std::mutex failure_mutex;
      auto work = [&] {
        for (std::size_t i = next++; i < test.size(); i = next++) {
          try {
            const auto& c = test[i];
            // Seeds depend on the case id only, so every arm sees the same random streams.
            auto ev = evaluate_case(model, c, config_.eval_T, config_.eval_n_mc, derive_seed(eval_seed, {fnv1a(c.id)}));
            const auto maps_dir = root / "maps";
            write_uncertainty_maps(maps_dir, c.id, ev.maps, c.image.height(), c.image.width());
            write_arr(maps_dir / (c.id + "_prob.arr"), ev.prob_fg);
            write_arr(maps_dir / (c.id + "_predmask.arr"), ev.predicted);
            records[i] = std::move(ev.record);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
            next = test.size();
          }
        }
      };
      std::vector<std::thread> pool;
      for (int t = 1; t < workers; ++t) pool.emplace_back(work);
      work();
      for (auto& t : pool) t.join();
      if (failure) std::rethrow_exception(failure);

      write_text_file(dir / "cases.tsv", case_table_tsv(records));
      write_stamp(dir, {key, key_of({digest_files(dir, {"cases.tsv"}), digest_files(root / "maps", list_files(root / "maps"))})});
      executed_.push_back(name);
    }
    stamps_[name] = *read_stamp(dir);
    return load_evaluation(arm);
  });
}

ExperimentReport Experiment::report() {
  std::vector<ArmEvaluation> evals;
  for (const auto arm : config_.arms) evals.push_back(evaluate(arm));
  return stage("report", [&] {
    auto rep = build_report(evals);
    emit_report(rep, config_.out);
    write_provenance();
    log("[report] wrote " + (config_.out / "table.tsv").string());
    return rep;
  });
}

std::vector<std::filesystem::path> Experiment::figures() {
  const auto& split = data();
  return stage("figures", [&] {
    std::vector<std::filesystem::path> written;
    const auto n = std::min<std::size_t>(static_cast<std::size_t>(config_.figure_cases), split.test.size());
    std::vector<std::string> missing;
    for (std::size_t i = 0; i < n; ++i) {
      for (const auto arm : config_.arms) {
        for (const char* suffix : {"_predmask.arr", "_ale.arr"}) {
          const auto p = arm_dir(arm) / "maps" / (split.test[i].id + suffix);
          if (!std::filesystem::exists(p)) missing.push_back(p.string());
        }
      }
    }
    if (!missing.empty()) {
      std::string msg = "missing uncertainty maps (run evaluate first):";
      for (const auto& m : missing) msg += "\n  " + m;
      throw IoError(msg);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto& c = split.test[i];
      FigurePanelSet panels;
      panels.case_id = c.id;
      panels.input = c.image.pixels;
      panels.ground_truth = c.mask.labels;
      panels.classes = config_.classes;
      panels.arms = config_.arms;
      for (const auto arm : config_.arms) {
        const auto maps = arm_dir(arm) / "maps";
        panels.predicted.push_back(read_arr_bytes(maps / (c.id + "_predmask.arr")));
        panels.aleatoric.push_back(read_arr_float(maps / (c.id + "_ale.arr")).cast<double>());
      }
      const auto path = config_.out / "figures" / (c.id + ".png");
      write_png_gray(path, compose_figure(panels));
      written.push_back(path);
    }
    log("[figures] wrote " + std::to_string(written.size()) + " figure(s)");
    return written;
  });
}

ExperimentReport Experiment::run_all() {
  data();
  if (std::find(config_.arms.begin(), config_.arms.end(), ArmKind::Ours) != config_.arms.end()) noise_model();
  for (const auto arm : config_.arms) {
    seg_model(arm);
    evaluate(arm);
  }
  auto rep = report();
  figures();
  return rep;
}

void Experiment::write_provenance() const {
  std::ostringstream out;
  out << "generated " << utc_now() << "\n";
  out << "config_hash " << key_of({canonical_config(config_, "", true)}) << "\n";
  out << "seed " << config_.seed << "\n";
  for (const auto& [stage, stamp] : stamps_) out << "stage " << stage << " key " << stamp.key << " digest " << stamp.digest << "\n";
  if (stamps_.count("train-recon")) out << "checkpoint " << (config_.out / "recon" / "train.ckpt").string() << "\n";
  for (const auto arm : config_.arms) {
    out << "checkpoint " << (arm_dir(arm) / "train" / "train.ckpt").string() << "\n";
  }
  out << "\n" << canonical_config(config_);
  write_text_file(config_.out / "provenance.txt", out.str());
}

}  // namespace uqaug
