#pragma once

#include "uqaug/common.hpp"
#include "uqaug/datagen.hpp"

#include <cstdint>
#include <cmath>
#include <iosfwd>
#include <string>
#include <vector>

namespace uqaug {

enum class Task { Reconstruction, Segmentation };

std::string to_string(Task task);
Task parse_task(const std::string& s);

struct BackboneConfig {
  int depth = 3;
  int base_channels = 16;
  double dropout_p = 0.5;
  int in_channels = 1;
  int out_channels_pred = 1;
  int out_channels_scale = 1;
  Task task = Task::Reconstruction;
  double log_scale_min = -10.0;
  double log_scale_max = 10.0;

  static BackboneConfig reconstruction();
  static BackboneConfig segmentation(int k);

  void validate() const;
  // Spatial dims must be multiples of 2^depth.
  void validate_input(int height, int width) const;
  int channels(int level) const { return base_channels << level; }

  bool operator==(const BackboneConfig&) const = default;
};

enum class DropoutMode { Off, Sample };

// pred holds one row per output channel, log_scale one row per scale channel;
// columns are pixels in row-major order.
template <typename Scalar>
struct StochasticForwardOutput {
  Tensor<Scalar> pred;
  Tensor<Scalar> log_scale;
  int height = 0;
  int width = 0;

  // Channel c reshaped to height x width.
  Map2<Scalar> pred_map(int c = 0) const;
  Map2<Scalar> log_scale_map(int c = 0) const;
};

template <typename Scalar>
class UNet {
 public:
  using Output = StochasticForwardOutput<Scalar>;

  struct ConvLayer {
    int in = 0, out = 0, kernel = 3;
    Eigen::Index weight_offset = 0, bias_offset = 0;
  };
  // Transposed 2x2 stride-2 convolution; weights are (4 * out) x in.
  struct UpLayer {
    int in = 0, out = 0;
    Eigen::Index weight_offset = 0, bias_offset = 0;
  };

  // Activations saved by a training forward pass.
  struct Tape {
    int height = 0, width = 0;
    std::vector<Tensor<Scalar>> conv_input;       // per 3x3 conv
    std::vector<Tensor<Scalar>> conv_multiplier;  // relu gate times dropout scale
    std::vector<std::vector<std::int32_t>> pool_argmax;
    std::vector<Tensor<Scalar>> up_input;
    Tensor<Scalar> head_input;
    Tensor<Scalar> log_scale_side;  // -1 below the clamp range, +1 above, 0 inside
  };

  UNet() = default;
  UNet(const BackboneConfig& config, std::uint64_t init_seed);

  const BackboneConfig& config() const { return config_; }
  void set_dropout_p(double p) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout_p must be in [0, 1)");
    config_.dropout_p = p;
  }
  Vec<Scalar>& parameters() { return params_; }
  const Vec<Scalar>& parameters() const { return params_; }
  Eigen::Index parameter_count() const { return params_.size(); }
  static Eigen::Index parameter_count(const BackboneConfig& config);

  // Single-channel input image.
  Output forward(const FloatMap& image, DropoutMode mode, std::uint64_t seed) const;
  Output forward(const Tensor<Scalar>& input, int height, int width, DropoutMode mode,
                 std::uint64_t seed, Tape* tape = nullptr) const;

  // Accumulates d(loss)/d(params) into grad (same layout as parameters()).
  void backward(const Tape& tape, const Tensor<Scalar>& d_pred, const Tensor<Scalar>& d_log_scale,
                Vec<Scalar>& grad) const;

  template <typename To>
  UNet<To> cast() const {
    UNet<To> out;
    out.config_ = config_;
    out.params_ = params_.template cast<To>();
    out.layout();
    return out;
  }

 private:
  template <typename>
  friend class UNet;

  Eigen::Index layout();

  BackboneConfig config_;
  Vec<Scalar> params_;
  std::vector<ConvLayer> encoder_;     // 2 per level
  std::vector<ConvLayer> bottleneck_;  // 2
  std::vector<UpLayer> up_;            // one per level, index = level
  std::vector<ConvLayer> decoder_;     // 2 per level, index = 2 * level + j
  ConvLayer pred_head_;
  ConvLayer scale_head_;
};

extern template class UNet<float>;
extern template class UNet<double>;

using Model = UNet<float>;

Model build_backbone(const BackboneConfig& config, std::uint64_t init_seed);

StochasticForwardOutput<float> forward_stochastic(const Model& model, const Image& image,
                                                  std::uint64_t rng_seed);

// Model container: config followed by the weight vector.
void write_model(std::ostream& out, const Model& model);
Model read_model(std::istream& in);

// Elementwise inverted dropout: keeps with probability 1 - p and rescales by 1 / (1 - p).
// Each 64-bit draw supplies four 16-bit uniforms, so p is resolved to 2^-16.
template <typename Scalar, typename RngT>
void dropout_multiplier(Tensor<Scalar>& mult, double p, RngT& rng) {
  if (p <= 0.0) return;
  const Scalar keep_scale = p >= 1.0 ? Scalar(0) : Scalar(1.0 / (1.0 - p));
  const auto threshold = static_cast<std::uint32_t>(std::lround(p * 65536.0));
  std::uint64_t word = 0;
  for (Eigen::Index i = 0; i < mult.size(); ++i) {
    if ((i & 3) == 0) word = rng.bits();
    const auto lane = static_cast<std::uint32_t>(word & 0xffffu);
    word >>= 16;
    mult.data()[i] *= lane < threshold ? Scalar(0) : keep_scale;
  }
}

}  // namespace uqaug
