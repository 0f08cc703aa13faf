#include "uqaug/trainer.hpp"

#include "uqaug/binio.hpp"
#include "uqaug/rng.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace uqaug {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("train: lr must be > 0");
  if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw ConfigError("train: plateau_factor must be in (0, 1)");
  if (patience < 1) throw ConfigError("train: patience must be >= 1");
  if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (dropout_warmup_epochs < 0) throw ConfigError("train: dropout_warmup_epochs must be >= 0");
}

bool PlateauScheduler::observe(double loss) {
  const bool improved = loss < best_ - threshold_ * std::abs(best_) || !std::isfinite(best_);
  if (improved) {
    best_ = loss;
    bad_ = 0;
    return true;
  }
  if (++bad_ >= patience_) {
    lr_ *= factor_;
    bad_ = 0;
    ++reductions_;
  }
  return false;
}

void PlateauScheduler::write(std::ostream& out) const {
  binio::put(out, lr_);
  binio::put(out, factor_);
  binio::put<std::int32_t>(out, patience_);
  binio::put(out, threshold_);
  binio::put(out, best_);
  binio::put<std::int32_t>(out, bad_);
  binio::put<std::int32_t>(out, reductions_);
}

void PlateauScheduler::read(std::istream& in) {
  lr_ = binio::get<double>(in);
  factor_ = binio::get<double>(in);
  patience_ = binio::get<std::int32_t>(in);
  threshold_ = binio::get<double>(in);
  best_ = binio::get<double>(in);
  bad_ = binio::get<std::int32_t>(in);
  reductions_ = binio::get<std::int32_t>(in);
}

LossFn regression_loss_fn(Likelihood likelihood) {
  return [likelihood](const StochasticForwardOutput<float>& out, const TrainingItem& item, std::uint64_t,
                      Tensor<float>* d_pred, Tensor<float>* d_log_scale) {
    const Eigen::Map<const Tensor<float>> target(item.target.data(), 1, item.target.size());
    auto l = hetero_regression_loss(out.pred, out.log_scale, target, likelihood);
    if (d_pred) *d_pred = std::move(l.d_pred);
    if (d_log_scale) *d_log_scale = std::move(l.d_scale);
    return l.value;
  };
}

LossFn segmentation_loss_fn(const SegmentationObjectiveConfig& config) {
  return [config](const StochasticForwardOutput<float>& out, const TrainingItem& item, std::uint64_t seed,
                  Tensor<float>* d_pred, Tensor<float>* d_log_scale) {
    const auto labels = flatten_labels(item.mask);
    auto obj = segmentation_objective(out.pred, out.log_scale, labels, config, seed);
    if (d_pred) *d_pred = std::move(obj.d_logits);
    if (d_log_scale) *d_log_scale = std::move(obj.d_log_scale);
    return obj.value;
  };
}

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out.write("UQCK", 4);
  binio::put<std::uint32_t>(out, 1);
  write_model(out, ckpt.model);
  const auto& c = ckpt.config;
  binio::put(out, c.lr);
  binio::put(out, c.weight_decay);
  binio::put(out, c.plateau_factor);
  binio::put<std::int32_t>(out, c.patience);
  binio::put<std::int32_t>(out, c.max_epochs);
  binio::put<std::int32_t>(out, c.batch_size);
  binio::put<std::uint64_t>(out, c.seed);
  binio::put(out, c.beta1);
  binio::put(out, c.beta2);
  binio::put(out, c.eps);
  binio::put(out, c.plateau_threshold);
  binio::put<std::int32_t>(out, c.dropout_warmup_epochs);
  const auto& s = ckpt.state;
  binio::put<std::int32_t>(out, s.next_epoch);
  binio::put<std::int64_t>(out, s.optimizer.step_count());
  binio::put_vec(out, s.optimizer.first_moment());
  binio::put_vec(out, s.optimizer.second_moment());
  s.scheduler.write(out);
  binio::put_vec(out, s.best_params);
  binio::put<std::int32_t>(out, s.best_epoch);
  binio::put<std::uint64_t>(out, s.history.size());
  for (const auto& r : s.history) {
    binio::put<std::int32_t>(out, r.epoch);
    binio::put(out, r.train_loss);
    binio::put(out, r.val_loss);
    binio::put(out, r.lr);
  }
}

Checkpoint read_checkpoint(std::istream& in) {
  binio::expect_magic(in, "UQCK");
  if (binio::get<std::uint32_t>(in) != 1) throw IoError("checkpoint: unsupported version");
  Checkpoint ckpt;
  ckpt.model = read_model(in);
  auto& c = ckpt.config;
  c.lr = binio::get<double>(in);
  c.weight_decay = binio::get<double>(in);
  c.plateau_factor = binio::get<double>(in);
  c.patience = binio::get<std::int32_t>(in);
  c.max_epochs = binio::get<std::int32_t>(in);
  c.batch_size = binio::get<std::int32_t>(in);
  c.seed = binio::get<std::uint64_t>(in);
  c.beta1 = binio::get<double>(in);
  c.beta2 = binio::get<double>(in);
  c.eps = binio::get<double>(in);
  c.plateau_threshold = binio::get<double>(in);
  c.dropout_warmup_epochs = binio::get<std::int32_t>(in);
  auto& s = ckpt.state;
  s.next_epoch = binio::get<std::int32_t>(in);
  const auto steps = binio::get<std::int64_t>(in);
  s.optimizer = AdamW<float>(ckpt.model.parameter_count(), c.beta1, c.beta2, c.eps);
  s.optimizer.first_moment() = binio::get_vec<float>(in);
  s.optimizer.second_moment() = binio::get_vec<float>(in);
  s.optimizer.set_step_count(steps);
  s.scheduler.read(in);
  s.best_params = binio::get_vec<float>(in);
  s.best_epoch = binio::get<std::int32_t>(in);
  const auto n = binio::get<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < n; ++i) {
    EpochRecord r;
    r.epoch = binio::get<std::int32_t>(in);
    r.train_loss = binio::get<double>(in);
    r.val_loss = binio::get<double>(in);
    r.lr = binio::get<double>(in);
    s.history.push_back(r);
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp);
    write_checkpoint(out, ckpt);
    if (!out) throw IoError("checkpoint write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

namespace {

constexpr std::uint64_t kShuffleTag = 0x5348;
constexpr std::uint64_t kDropoutTag = 0x4452;
constexpr std::uint64_t kLossTag = 0x4c53;
constexpr std::uint64_t kValTag = 0x5641;

Tensor<float> as_input(const FloatMap& image) {
  return Eigen::Map<const Tensor<float>>(image.data(), 1, image.size());
}

double validation_loss(const Model& model, const LossFn& loss, const std::vector<TrainingItem>& val,
                       std::uint64_t seed) {
  double total = 0.0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    const auto& item = val[i];
    const auto out = model.forward(as_input(item.input), static_cast<int>(item.input.rows()),
                                   static_cast<int>(item.input.cols()), DropoutMode::Off, 0);
    total += loss(out, item, derive_seed(seed, {kValTag, i}), nullptr, nullptr);
  }
  return total / static_cast<double>(val.size());
}

void dump_state(const TrainHooks& hooks, const Model& model, const TrainConfig& config,
                const TrainerState& state) {
  if (hooks.checkpoint_path.empty()) return;
  try {
    save_checkpoint(hooks.checkpoint_path.string() + ".nan_dump", Checkpoint{model, config, state});
  } catch (const std::exception&) {
    // the NumericError below carries the diagnosis
  }
}

TrainResult run(Model& model, const LossFn& loss, const std::vector<TrainingItem>& train_data,
                const std::vector<TrainingItem>& val_data, const TrainConfig& config, TrainerState& state,
                const TrainHooks& hooks) {
  config.validate();
  if (train_data.empty() && !hooks.epoch_data) throw ConfigError("train: empty training set");
  if (val_data.empty()) throw ConfigError("train: empty validation set");

  Model::Tape tape;
  Vec<float> grad = Vec<float>::Zero(model.parameter_count());
  Tensor<float> d_pred, d_log_scale;

  const double full_p = model.config().dropout_p;
  struct RestoreDropout {
    Model& m;
    double p;
    ~RestoreDropout() { m.set_dropout_p(p); }
  } restore{model, full_p};
  const int warmup = config.dropout_warmup_epochs;

  for (int epoch = state.next_epoch; epoch < config.max_epochs; ++epoch) {
    const bool warming = epoch < warmup;
    model.set_dropout_p(warming ? full_p * (epoch + 1) / (warmup + 1) : full_p);
    std::vector<TrainingItem> refreshed;
    if (hooks.epoch_data) refreshed = hooks.epoch_data(epoch);
    const auto& data = hooks.epoch_data ? refreshed : train_data;
    if (data.empty()) throw ConfigError("train: empty training set");

    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(config.seed, {kShuffleTag, static_cast<std::uint64_t>(epoch)}));
    shuffle_rng.shuffle(order.begin(), order.end());

    const double lr = state.scheduler.lr();
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      grad.setZero();
      for (std::size_t pos = start; pos < stop; ++pos) {
        const auto& item = data[order[pos]];
        const auto e = static_cast<std::uint64_t>(epoch), p = static_cast<std::uint64_t>(pos);
        const auto out = model.forward(as_input(item.input), static_cast<int>(item.input.rows()),
                                       static_cast<int>(item.input.cols()), DropoutMode::Sample,
                                       derive_seed(config.seed, {kDropoutTag, e, p}), &tape);
        const double value = loss(out, item, derive_seed(config.seed, {kLossTag, e, p}), &d_pred, &d_log_scale);
        if (!std::isfinite(value)) {
          dump_state(hooks, model, config, state);
          throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", item " +
                             item.id + " (lr " + std::to_string(lr) + ")");
        }
        epoch_loss += value;
        model.backward(tape, d_pred, d_log_scale, grad);
      }
      grad /= static_cast<float>(stop - start);
      if (!grad.allFinite()) {
        dump_state(hooks, model, config, state);
        throw NumericError("train: non-finite gradient at epoch " + std::to_string(epoch));
      }
      state.optimizer.step(model.parameters(), grad, lr, config.weight_decay);
    }

    model.set_dropout_p(full_p);
    EpochRecord rec{epoch, epoch_loss / static_cast<double>(data.size()),
                    validation_loss(model, loss, val_data, config.seed), lr};
    if (!std::isfinite(rec.val_loss)) {
      dump_state(hooks, model, config, state);
      throw NumericError("train: non-finite validation loss at epoch " + std::to_string(epoch));
    }
    if (!warming && state.scheduler.observe(rec.val_loss)) {
      state.best_params = model.parameters();
      state.best_epoch = epoch;
    }
    state.history.push_back(rec);
    state.next_epoch = epoch + 1;
    if (!hooks.checkpoint_path.empty()) save_checkpoint(hooks.checkpoint_path, Checkpoint{model, config, state});
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (hooks.stop_after_epoch >= 0 && epoch >= hooks.stop_after_epoch) break;
  }

  TrainResult result{state.history, state.best_epoch, state.scheduler.best()};
  if (state.best_params.size() == model.parameter_count()) model.parameters() = state.best_params;
  return result;
}

}  // namespace

TrainResult train(Model& model, const LossFn& loss, const std::vector<TrainingItem>& train_data,
                  const std::vector<TrainingItem>& val_data, const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  TrainerState state;
  state.optimizer = AdamW<float>(model.parameter_count(), config.beta1, config.beta2, config.eps);
  state.scheduler = PlateauScheduler(config.lr, config.plateau_factor, config.patience, config.plateau_threshold);
  return run(model, loss, train_data, val_data, config, state, hooks);
}

TrainResult resume(const std::filesystem::path& checkpoint, Model& model, const LossFn& loss,
                   const std::vector<TrainingItem>& train_data, const std::vector<TrainingItem>& val_data,
                   const TrainHooks& hooks) {
  Checkpoint ckpt = load_checkpoint(checkpoint);
  model = std::move(ckpt.model);
  return run(model, loss, train_data, val_data, ckpt.config, ckpt.state, hooks);
}

std::string history_tsv(const std::vector<EpochRecord>& history) {
  std::ostringstream out;
  out << "epoch\ttrain_loss\tval_loss\tlr\n" << std::setprecision(10);
  for (const auto& r : history) out << r.epoch << '\t' << r.train_loss << '\t' << r.val_loss << '\t' << r.lr << '\n';
  return out.str();
}

}  // namespace uqaug
