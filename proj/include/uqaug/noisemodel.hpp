#pragma once

#include "uqaug/common.hpp"
#include "uqaug/datagen.hpp"
#include "uqaug/losses.hpp"
#include "uqaug/nets.hpp"
#include "uqaug/uncertainty.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace uqaug {

// Per-pixel intensity distribution of one image: family(mean, scale).
struct NoiseModelEntry {
  std::string case_id;
  FloatMap mean;
  FloatMap scale;
  Likelihood family = Likelihood::Laplace;
};

// mean = MC-mean reconstruction, scale = sqrt(MC-mean of the predicted sigma^2).
NoiseModelEntry noise_entry_from_stack(const McSampleStack& stack, std::string case_id, Likelihood family);

std::vector<NoiseModelEntry> fit_noise_model(const Model& recon_model, const std::vector<Case>& train, int T,
                                             std::uint64_t seed, Likelihood family);

// Draws every pixel independently from family(mean, scale); the mask is returned unchanged.
std::pair<Image, MaskImage> sample_augmented(const NoiseModelEntry& entry, const MaskImage& paired_mask,
                                             std::uint64_t seed);

Image gaussian_noise_augment(const Image& image, double std_dev, std::uint64_t seed);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct AffineElasticParams {
  Range rotation_deg{-15.0, 15.0};
  Range scale{0.9, 1.1};
  Range shear_deg{-10.0, 10.0};
  double flip_h_prob = 0.5;
  double flip_v_prob = 0.5;
  double elastic_alpha = 8.0;  // px
  double elastic_sigma = 6.0;  // px

  static AffineElasticParams identity();
  void validate(int height, int width) const;
};

// Backward map from output pixel p to source location M (p - c) + c + d(p).
struct GeometricTransform {
  Eigen::Matrix2d matrix = Eigen::Matrix2d::Identity();  // acts on (x, y)
  DoubleMap dx;                                          // elastic displacement, may be empty
  DoubleMap dy;
};

GeometricTransform sample_transform(const AffineElasticParams& params, int height, int width, std::uint64_t seed);

// Bilinear sampling with edge replication.
FloatMap warp_bilinear(const FloatMap& image, const GeometricTransform& t);
// Nearest-neighbour sampling with edge replication.
ByteMap warp_nearest(const ByteMap& labels, const GeometricTransform& t);

std::pair<Image, MaskImage> full_augment(const Image& image, const MaskImage& mask, const AffineElasticParams& params,
                                         std::uint64_t seed);

// Normalised 1D Gaussian smoothing along rows then columns, clamped borders.
DoubleMap gaussian_smooth(const DoubleMap& field, double sigma);

enum class ArmKind { Baseline, Gaussian, Ours, Full };

std::string to_string(ArmKind kind);
ArmKind parse_arm(const std::string& s);

struct AugmentationArm {
  ArmKind kind = ArmKind::Baseline;
  double gaussian_std = 0.1;
  AffineElasticParams affine;
  int copies = 1;
  bool online = false;
};

using NoiseModelIndex = std::map<std::string, NoiseModelEntry>;

// Baseline returns train unchanged; other arms append `copies` augmented variants per image.
std::vector<Case> build_augmented_trainset(const std::vector<Case>& train, const AugmentationArm& arm,
                                           const NoiseModelIndex* noise_model, std::uint64_t seed);

void write_noise_model(const std::filesystem::path& dir, const std::vector<NoiseModelEntry>& entries, int T,
                       std::uint64_t seed);
std::vector<NoiseModelEntry> read_noise_model(const std::filesystem::path& dir);

}  // namespace uqaug
