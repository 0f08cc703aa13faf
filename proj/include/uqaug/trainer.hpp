#pragma once

#include "uqaug/common.hpp"
#include "uqaug/losses.hpp"
#include "uqaug/nets.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

namespace uqaug {

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-2;
  double plateau_factor = 0.1;
  int patience = 20;
  int max_epochs = 100;
  int batch_size = 8;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double plateau_threshold = 1e-4;  // relative improvement needed to reset patience
  // Dropout ramps linearly up to the model's rate over these first epochs; the plateau
  // schedule and best-weight tracking start once the full rate is reached.
  int dropout_warmup_epochs = 10;

  void validate() const;
};

// Decoupled weight decay: p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps).
template <typename Scalar>
class AdamW {
 public:
  AdamW() = default;
  AdamW(Eigen::Index n, double beta1, double beta2, double eps)
      : m_(Vec<Scalar>::Zero(n)), v_(Vec<Scalar>::Zero(n)), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(Vec<Scalar>& params, const Vec<Scalar>& grad, double lr, double weight_decay) {
    if (grad.size() != params.size() || m_.size() != params.size()) {
      throw BoundsError("AdamW: parameter/gradient size mismatch");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const auto b1 = static_cast<Scalar>(beta1_), b2 = static_cast<Scalar>(beta2_);
    params *= static_cast<Scalar>(1.0 - lr * weight_decay);
    m_ = b1 * m_ + (Scalar(1) - b1) * grad;
    v_ = b2 * v_ + (Scalar(1) - b2) * grad.cwiseProduct(grad);
    const auto step_size = static_cast<Scalar>(lr / bc1);
    const auto inv_bc2 = static_cast<Scalar>(1.0 / bc2);
    params.array() -= step_size * m_.array() / ((v_.array() * inv_bc2).sqrt() + static_cast<Scalar>(eps_));
  }

  Vec<Scalar>& first_moment() { return m_; }
  Vec<Scalar>& second_moment() { return v_; }
  const Vec<Scalar>& first_moment() const { return m_; }
  const Vec<Scalar>& second_moment() const { return v_; }
  std::int64_t step_count() const { return t_; }
  void set_step_count(std::int64_t t) { t_ = t; }

 private:
  Vec<Scalar> m_, v_;
  std::int64_t t_ = 0;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
};

// Multiplies the learning rate by factor once `patience` consecutive epochs pass
// without relative improvement of the monitored loss.
class PlateauScheduler {
 public:
  PlateauScheduler() = default;
  PlateauScheduler(double lr, double factor, int patience, double threshold)
      : lr_(lr), factor_(factor), patience_(patience), threshold_(threshold) {}

  // Returns true when the loss improved on the best so far.
  bool observe(double loss);

  double lr() const { return lr_; }
  double best() const { return best_; }
  int bad_epochs() const { return bad_; }
  int reductions() const { return reductions_; }

  void write(std::ostream& out) const;
  void read(std::istream& in);

 private:
  double lr_ = 1e-3;
  double factor_ = 0.1;
  int patience_ = 20;
  double threshold_ = 1e-4;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_ = 0;
  int reductions_ = 0;
};

struct TrainingItem {
  std::string id;
  FloatMap input;
  FloatMap target;  // reconstruction target
  ByteMap mask;     // segmentation target
};

// Returns the loss of one item; fills gradients wrt pred/log_scale when non-null.
using LossFn = std::function<double(const StochasticForwardOutput<float>& out, const TrainingItem& item,
                                    std::uint64_t seed, Tensor<float>* d_pred, Tensor<float>* d_log_scale)>;

LossFn regression_loss_fn(Likelihood likelihood);
LossFn segmentation_loss_fn(const SegmentationObjectiveConfig& config);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

struct TrainerState {
  int next_epoch = 0;
  AdamW<float> optimizer;
  PlateauScheduler scheduler;
  Vec<float> best_params;
  int best_epoch = -1;
  std::vector<EpochRecord> history;
};

struct Checkpoint {
  Model model;
  TrainConfig config;
  TrainerState state;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& in);

struct TrainHooks {
  // Training set for a given epoch (online augmentation); defaults to the fixed set.
  std::function<std::vector<TrainingItem>(int epoch)> epoch_data;
  std::filesystem::path checkpoint_path;  // written after every epoch when set
  std::function<void(const EpochRecord&)> on_epoch;
  int stop_after_epoch = -1;  // return early once this epoch completes (>= 0)
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = -1;
  double best_val = 0.0;
};

// Trains in place; on return the model holds the best-validation weights.
TrainResult train(Model& model, const LossFn& loss, const std::vector<TrainingItem>& train_data,
                  const std::vector<TrainingItem>& val_data, const TrainConfig& config,
                  const TrainHooks& hooks = {});

// Continues a run from a checkpoint written by train().
TrainResult resume(const std::filesystem::path& checkpoint, Model& model, const LossFn& loss,
                   const std::vector<TrainingItem>& train_data, const std::vector<TrainingItem>& val_data,
                   const TrainHooks& hooks = {});

std::string history_tsv(const std::vector<EpochRecord>& history);

}  // namespace uqaug
