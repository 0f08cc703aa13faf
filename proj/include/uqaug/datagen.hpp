#pragma once

#include "uqaug/common.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace uqaug {

struct Image {
  FloatMap pixels;

  Image() = default;
  explicit Image(FloatMap p) : pixels(std::move(p)) {}
  int height() const { return static_cast<int>(pixels.rows()); }
  int width() const { return static_cast<int>(pixels.cols()); }
};

struct MaskImage {
  ByteMap labels;
  int k = 2;

  int height() const { return static_cast<int>(labels.rows()); }
  int width() const { return static_cast<int>(labels.cols()); }
};

// Nonzero entries are inside the region.
struct RegionMask {
  ByteMap member;

  Eigen::Index count() const { return (member.array() != 0).count(); }
};

struct Case {
  std::string id;
  Image image;
  MaskImage mask;
  RegionMask region;
};

struct DatasetSplit {
  std::vector<Case> train;
  std::vector<Case> val;
  std::vector<Case> test;
};

// Per-pixel noise standard deviation of the phantom, by location class.
struct NoiseProfileConfig {
  double sigma_interior = 0.1;
  double sigma_boundary = 0.3;
  double sigma_background = 0.0;
  double boundary_width = 3.0;  // px, distance to the nearest tumor edge
};

struct PhantomConfig {
  int size = 96;
  double brain_radius = 40.0;
  double brain_intensity = 1.0;
  double tumor_contrast = 1.5;
  int min_tumors = 1;
  int max_tumors = 3;
  double tumor_min_axis = 4.0;
  double tumor_max_axis = 12.0;
  NoiseProfileConfig noise;

  void validate() const;
};

struct Ellipse {
  double cy, cx, a, b, theta;
};

struct PhantomGeometry {
  int size = 0;
  double brain_radius = 0.0;
  std::vector<Ellipse> tumors;
};

PhantomGeometry sample_phantom_geometry(const PhantomConfig& config, std::uint64_t seed);
FloatMap clean_phantom(const PhantomGeometry& geometry, const PhantomConfig& config);
ByteMap tumor_labels(const PhantomGeometry& geometry);
ByteMap brain_disk(const PhantomGeometry& geometry);
FloatMap noise_std_map(const PhantomGeometry& geometry, const PhantomConfig& config);

// Renders one case: clean phantom plus zero-mean Gaussian noise drawn from noise_seed.
Case render_phantom_case(const PhantomGeometry& geometry, const PhantomConfig& config,
                         std::uint64_t noise_seed, std::string id);

std::vector<Case> generate_phantom_dataset(int n_cases, const PhantomConfig& config,
                                           std::uint64_t seed);

// Affine map x -> (x - mean) / std with statistics taken over the region.
Image normalize_image(const Image& image, const RegionMask& region);

// Floor margin on top/left; an odd remainder goes to bottom/right.
template <typename Derived>
Map2<typename Derived::Scalar> center_crop(const Eigen::MatrixBase<Derived>& m, int target_h,
                                           int target_w) {
  if (target_h <= 0 || target_w <= 0 || target_h > m.rows() || target_w > m.cols()) {
    throw BoundsError("center_crop: target " + std::to_string(target_h) + "x" +
                      std::to_string(target_w) + " exceeds input " + std::to_string(m.rows()) +
                      "x" + std::to_string(m.cols()));
  }
  const auto top = (m.rows() - target_h) / 2;
  const auto left = (m.cols() - target_w) / 2;
  return m.block(top, left, target_h, target_w);
}

Image center_crop(const Image& image, int target_h, int target_w);
Case center_crop(const Case& c, int target_h, int target_w);

// Case-level partition; sizes are round(n * ratio) for train and val, remainder to test.
DatasetSplit split_dataset(std::vector<Case> cases, std::array<double, 3> ratios,
                           std::uint64_t seed);

struct PreprocessConfig {
  bool normalize = true;
  int crop_h = 0;  // 0 keeps the input size
  int crop_w = 0;
};

// Normalize (on the pre-crop region) then crop.
Case preprocess_case(const Case& c, const PreprocessConfig& config);

// Dataset directory: <id>_img.arr, <id>_mask.arr, <id>_region.arr and manifest.tsv (case_id, split).
void write_dataset(const std::filesystem::path& dir, const DatasetSplit& split);
DatasetSplit read_dataset(const std::filesystem::path& dir);

// Reads an external dataset directory. Missing region files are derived from the nonzero
// pixels of the raw image; cases without a split column are partitioned with ratios/seed.
DatasetSplit ingest_dataset(const std::filesystem::path& dir, const PreprocessConfig& prep,
                            std::array<double, 3> ratios, std::uint64_t seed, int k = 2);

}  // namespace uqaug
