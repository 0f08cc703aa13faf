#include "uqaug/noisemodel.hpp"

#include "uqaug/arr_io.hpp"
#include "uqaug/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace uqaug {

NoiseModelEntry noise_entry_from_stack(const McSampleStack& stack, std::string case_id, Likelihood family) {
  if (stack.task != Task::Reconstruction) throw ConfigError("noise model: needs a reconstruction stack");
  stack.validate();
  for (int t = 0; t < stack.T(); ++t) {
    require_finite(stack.preds[static_cast<std::size_t>(t)], "noise model prediction");
    require_finite(stack.scales[static_cast<std::size_t>(t)], "noise model scale");
  }
  DoubleMap mean = DoubleMap::Zero(1, stack.preds.front().cols());
  DoubleMap second = DoubleMap::Zero(1, mean.cols());
  for (int t = 0; t < stack.T(); ++t) {
    mean += stack.preds[static_cast<std::size_t>(t)];
    second.array() += stack.scales[static_cast<std::size_t>(t)].array().square();
  }
  mean /= stack.T();
  second /= stack.T();
  NoiseModelEntry e;
  e.case_id = std::move(case_id);
  e.mean = as_image(mean, stack.height, stack.width).cast<float>();
  e.scale = as_image(DoubleMap(second.array().sqrt()), stack.height, stack.width).cast<float>();
  e.family = family;
  return e;
}

std::vector<NoiseModelEntry> fit_noise_model(const Model& recon_model, const std::vector<Case>& train, int T,
                                             std::uint64_t seed, Likelihood family) {
  if (recon_model.config().task != Task::Reconstruction) {
    throw ConfigError("fit_noise_model: model is not a reconstruction model");
  }
  std::vector<NoiseModelEntry> entries;
  entries.reserve(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto stack = mc_sample(recon_model, train[i].image, T, derive_seed(seed, {i}), McOptions{family, 1});
    entries.push_back(noise_entry_from_stack(stack, train[i].id, family));
  }
  return entries;
}

std::pair<Image, MaskImage> sample_augmented(const NoiseModelEntry& entry, const MaskImage& paired_mask,
                                             std::uint64_t seed) {
  require_same_shape(entry.mean, entry.scale, "sample_augmented");
  require_same_shape(entry.mean, paired_mask.labels, "sample_augmented mask");
  if ((entry.scale.array() < 0.0f).any() || !entry.scale.allFinite()) {
    throw NumericError("sample_augmented: noise scale must be finite and non-negative");
  }
  Rng rng(seed);
  FloatMap out(entry.mean.rows(), entry.mean.cols());
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    const double z = entry.family == Likelihood::Gaussian ? rng.normal() : rng.laplace();
    const float s = entry.scale.data()[i];
    out.data()[i] = s > 0.0f ? static_cast<float>(entry.mean.data()[i] + s * z) : entry.mean.data()[i];
  }
  return {Image(std::move(out)), paired_mask};
}

Image gaussian_noise_augment(const Image& image, double std_dev, std::uint64_t seed) {
  if (std_dev < 0.0) throw ConfigError("gaussian_noise_augment: std must be >= 0");
  if (std_dev == 0.0) return image;
  Rng rng(seed);
  FloatMap out = image.pixels;
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] += static_cast<float>(std_dev * rng.normal());
  return Image(std::move(out));
}

AffineElasticParams AffineElasticParams::identity() {
  AffineElasticParams p;
  p.rotation_deg = {0.0, 0.0};
  p.scale = {1.0, 1.0};
  p.shear_deg = {0.0, 0.0};
  p.flip_h_prob = 0.0;
  p.flip_v_prob = 0.0;
  p.elastic_alpha = 0.0;
  return p;
}

void AffineElasticParams::validate(int height, int width) const {
  auto ordered = [](const Range& r) { return r.lo <= r.hi; };
  if (!ordered(rotation_deg) || !ordered(scale) || !ordered(shear_deg)) {
    throw ConfigError("augmentation: range with lo > hi");
  }
  if (!(scale.lo > 0.0)) throw ConfigError("augmentation: scale must be positive");
  if (std::abs(shear_deg.lo) >= 90.0 || std::abs(shear_deg.hi) >= 90.0) {
    throw ConfigError("augmentation: shear must be within (-90, 90) degrees");
  }
  if (flip_h_prob < 0.0 || flip_h_prob > 1.0 || flip_v_prob < 0.0 || flip_v_prob > 1.0) {
    throw ConfigError("augmentation: flip probabilities must be in [0, 1]");
  }
  if (elastic_alpha < 0.0 || elastic_sigma <= 0.0) throw ConfigError("augmentation: bad elastic parameters");
  if (elastic_alpha > std::min(height, width)) {
    throw ConfigError("augmentation: elastic displacement exceeds the image size");
  }
}

DoubleMap gaussian_smooth(const DoubleMap& field, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * i * i / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (double& v : kernel) v /= total;
  const auto h = field.rows(), w = field.cols();
  auto clampi = [](Eigen::Index v, Eigen::Index n) { return std::clamp<Eigen::Index>(v, 0, n - 1); };
  DoubleMap tmp(h, w), out(h, w);
  for (Eigen::Index y = 0; y < h; ++y) {
    for (Eigen::Index x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += kernel[static_cast<std::size_t>(i + radius)] * field(y, clampi(x + i, w));
      tmp(y, x) = acc;
    }
  }
  for (Eigen::Index y = 0; y < h; ++y) {
    for (Eigen::Index x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += kernel[static_cast<std::size_t>(i + radius)] * tmp(clampi(y + i, h), x);
      out(y, x) = acc;
    }
  }
  return out;
}

GeometricTransform sample_transform(const AffineElasticParams& params, int height, int width, std::uint64_t seed) {
  params.validate(height, width);
  Rng rng(seed);
  const double deg = std::numbers::pi / 180.0;
  const double theta = rng.uniform(params.rotation_deg.lo, params.rotation_deg.hi) * deg;
  const double s = rng.uniform(params.scale.lo, params.scale.hi);
  const double shear = rng.uniform(params.shear_deg.lo, params.shear_deg.hi) * deg;
  const bool flip_h = rng.uniform() < params.flip_h_prob;
  const bool flip_v = rng.uniform() < params.flip_v_prob;

  Eigen::Matrix2d rot;
  rot << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
  Eigen::Matrix2d sh;
  sh << 1.0, std::tan(shear), 0.0, 1.0;
  const Eigen::Matrix2d flip = Eigen::Vector2d(flip_h ? -1.0 : 1.0, flip_v ? -1.0 : 1.0).asDiagonal();

  GeometricTransform t;
  t.matrix = rot * sh * (flip / s);
  if (params.elastic_alpha > 0.0) {
    DoubleMap ux(height, width), uy(height, width);
    for (Eigen::Index i = 0; i < ux.size(); ++i) ux.data()[i] = rng.uniform(-1.0, 1.0);
    for (Eigen::Index i = 0; i < uy.size(); ++i) uy.data()[i] = rng.uniform(-1.0, 1.0);
    t.dx = params.elastic_alpha * gaussian_smooth(ux, params.elastic_sigma);
    t.dy = params.elastic_alpha * gaussian_smooth(uy, params.elastic_sigma);
  }
  return t;
}

namespace {

template <typename Sampler>
void for_each_source(int h, int w, const GeometricTransform& t, Sampler&& sample) {
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  const bool elastic = t.dx.size() == static_cast<Eigen::Index>(h) * w;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Eigen::Vector2d p(x - cx, y - cy);
      Eigen::Vector2d q = t.matrix * p + Eigen::Vector2d(cx, cy);
      if (elastic) q += Eigen::Vector2d(t.dx(y, x), t.dy(y, x));
      sample(y, x, q.x(), q.y());
    }
  }
}

}  // namespace

FloatMap warp_bilinear(const FloatMap& image, const GeometricTransform& t) {
  const int h = static_cast<int>(image.rows()), w = static_cast<int>(image.cols());
  FloatMap out(h, w);
  for_each_source(h, w, t, [&](int y, int x, double qx, double qy) {
    qx = std::clamp(qx, 0.0, w - 1.0);
    qy = std::clamp(qy, 0.0, h - 1.0);
    const int x0 = std::min(static_cast<int>(std::floor(qx)), w - 1);
    const int y0 = std::min(static_cast<int>(std::floor(qy)), h - 1);
    const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    const double fx = qx - x0, fy = qy - y0;
    const double v = (1 - fy) * ((1 - fx) * image(y0, x0) + fx * image(y0, x1)) +
                     fy * ((1 - fx) * image(y1, x0) + fx * image(y1, x1));
    out(y, x) = static_cast<float>(v);
  });
  return out;
}

ByteMap warp_nearest(const ByteMap& labels, const GeometricTransform& t) {
  const int h = static_cast<int>(labels.rows()), w = static_cast<int>(labels.cols());
  ByteMap out(h, w);
  for_each_source(h, w, t, [&](int y, int x, double qx, double qy) {
    const auto xi = std::clamp(static_cast<int>(std::lround(qx)), 0, w - 1);
    const auto yi = std::clamp(static_cast<int>(std::lround(qy)), 0, h - 1);
    out(y, x) = labels(yi, xi);
  });
  return out;
}

std::pair<Image, MaskImage> full_augment(const Image& image, const MaskImage& mask, const AffineElasticParams& params,
                                         std::uint64_t seed) {
  require_same_shape(image.pixels, mask.labels, "full_augment");
  const auto t = sample_transform(params, image.height(), image.width(), seed);
  return {Image(warp_bilinear(image.pixels, t)), MaskImage{warp_nearest(mask.labels, t), mask.k}};
}

std::string to_string(ArmKind kind) {
  switch (kind) {
    case ArmKind::Baseline: return "baseline";
    case ArmKind::Gaussian: return "gaussian";
    case ArmKind::Ours: return "ours";
    case ArmKind::Full: return "full";
  }
  return "?";
}

ArmKind parse_arm(const std::string& s) {
  if (s == "baseline") return ArmKind::Baseline;
  if (s == "gaussian") return ArmKind::Gaussian;
  if (s == "ours") return ArmKind::Ours;
  if (s == "full") return ArmKind::Full;
  throw ConfigError("unknown arm '" + s + "' (expected baseline, gaussian, ours or full)");
}

std::vector<Case> build_augmented_trainset(const std::vector<Case>& train, const AugmentationArm& arm,
                                           const NoiseModelIndex* noise_model, std::uint64_t seed) {
  if (arm.kind == ArmKind::Baseline) return train;
  if (arm.copies < 0) throw ConfigError("augmentation: copies must be >= 0");
  if (arm.kind == ArmKind::Ours && noise_model == nullptr) {
    throw ConfigError("augmentation: arm 'ours' requires a fitted noise model");
  }
  std::vector<Case> out = train;
  out.reserve(train.size() * static_cast<std::size_t>(1 + arm.copies));
  for (int copy = 0; copy < arm.copies; ++copy) {
    for (std::size_t i = 0; i < train.size(); ++i) {
      const Case& src = train[i];
      const auto s = derive_seed(seed, {static_cast<std::uint64_t>(copy), i});
      Case aug;
      aug.id = src.id + "_aug" + std::to_string(copy);
      aug.region = src.region;
      switch (arm.kind) {
        case ArmKind::Gaussian:
          aug.image = gaussian_noise_augment(src.image, arm.gaussian_std, s);
          aug.mask = src.mask;
          break;
        case ArmKind::Ours: {
          const auto it = noise_model->find(src.id);
          if (it == noise_model->end()) throw ConfigError("augmentation: no noise model entry for " + src.id);
          std::tie(aug.image, aug.mask) = sample_augmented(it->second, src.mask, s);
          break;
        }
        case ArmKind::Full:
          std::tie(aug.image, aug.mask) = full_augment(src.image, src.mask, arm.affine, s);
          break;
        case ArmKind::Baseline:
          break;
      }
      out.push_back(std::move(aug));
    }
  }
  return out;
}

void write_noise_model(const std::filesystem::path& dir, const std::vector<NoiseModelEntry>& entries, int T,
                       std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  std::string index = "case_id\tfamily\tT\tseed\n";
  for (const auto& e : entries) {
    write_arr(dir / (e.case_id + "_nm_mean.arr"), e.mean);
    write_arr(dir / (e.case_id + "_nm_scale.arr"), e.scale);
    index += e.case_id + "\t" + to_string(e.family) + "\t" + std::to_string(T) + "\t" + std::to_string(seed) + "\n";
  }
  write_text_file(dir / "noisemodel.tsv", index);
}

std::vector<NoiseModelEntry> read_noise_model(const std::filesystem::path& dir) {
  std::istringstream in(read_text_file(dir / "noisemodel.tsv"));
  std::vector<NoiseModelEntry> entries;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string id, family;
    std::getline(row, id, '\t');
    std::getline(row, family, '\t');
    NoiseModelEntry e{id, read_arr_float(dir / (id + "_nm_mean.arr")), read_arr_float(dir / (id + "_nm_scale.arr")),
                      parse_likelihood(family)};
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace uqaug
