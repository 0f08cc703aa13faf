#include "uqaug/datagen.hpp"

#include "uqaug/arr_io.hpp"
#include "uqaug/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace uqaug {

void PhantomConfig::validate() const {
  if (size < 32) throw ConfigError("phantom: size must be >= 32");
  if (brain_radius <= 0 || 2.0 * brain_radius >= size) {
    throw ConfigError("phantom: brain radius must fit inside the image");
  }
  if (min_tumors < 0 || max_tumors < min_tumors) throw ConfigError("phantom: bad tumor count range");
  if (tumor_min_axis <= 0 || tumor_max_axis < tumor_min_axis ||
      tumor_max_axis + 2.0 >= brain_radius) {
    throw ConfigError("phantom: bad tumor axis range");
  }
  if (noise.sigma_interior < 0 || noise.sigma_boundary < 0 || noise.sigma_background < 0 ||
      noise.boundary_width < 0) {
    throw ConfigError("phantom: noise parameters must be non-negative");
  }
}

PhantomGeometry sample_phantom_geometry(const PhantomConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  PhantomGeometry g{config.size, config.brain_radius, {}};
  const int n = config.min_tumors +
                static_cast<int>(rng.below(static_cast<std::uint64_t>(config.max_tumors - config.min_tumors + 1)));
  const double c = (config.size - 1) / 2.0;
  for (int i = 0; i < n; ++i) {
    Ellipse e{};
    e.a = rng.uniform(config.tumor_min_axis, config.tumor_max_axis);
    e.b = rng.uniform(config.tumor_min_axis, config.tumor_max_axis);
    e.theta = rng.uniform(0.0, std::numbers::pi);
    const double reach = config.brain_radius - std::max(e.a, e.b) - 2.0;
    const double r = reach * std::sqrt(rng.uniform());
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    e.cy = c + r * std::sin(phi);
    e.cx = c + r * std::cos(phi);
    g.tumors.push_back(e);
  }
  return g;
}

namespace {

bool inside(const Ellipse& e, double y, double x) {
  const double dy = y - e.cy, dx = x - e.cx;
  const double ct = std::cos(e.theta), st = std::sin(e.theta);
  const double u = (dx * ct + dy * st) / e.a;
  const double v = (-dx * st + dy * ct) / e.b;
  return u * u + v * v <= 1.0;
}

}  // namespace

ByteMap brain_disk(const PhantomGeometry& g) {
  ByteMap m(g.size, g.size);
  const double c = (g.size - 1) / 2.0;
  for (int y = 0; y < g.size; ++y) {
    for (int x = 0; x < g.size; ++x) {
      const double dy = y - c, dx = x - c;
      m(y, x) = dy * dy + dx * dx <= g.brain_radius * g.brain_radius ? 1 : 0;
    }
  }
  return m;
}

ByteMap tumor_labels(const PhantomGeometry& g) {
  const ByteMap brain = brain_disk(g);
  ByteMap m = ByteMap::Zero(g.size, g.size);
  for (int y = 0; y < g.size; ++y) {
    for (int x = 0; x < g.size; ++x) {
      if (!brain(y, x)) continue;
      for (const auto& e : g.tumors) {
        if (inside(e, y, x)) {
          m(y, x) = 1;
          break;
        }
      }
    }
  }
  return m;
}

FloatMap clean_phantom(const PhantomGeometry& g, const PhantomConfig& config) {
  const ByteMap brain = brain_disk(g);
  const ByteMap tumor = tumor_labels(g);
  FloatMap img(g.size, g.size);
  for (Eigen::Index i = 0; i < img.size(); ++i) {
    double v = brain.data()[i] ? config.brain_intensity : 0.0;
    if (tumor.data()[i]) v += config.tumor_contrast;
    img.data()[i] = static_cast<float>(v);
  }
  return img;
}

FloatMap noise_std_map(const PhantomGeometry& g, const PhantomConfig& config) {
  const ByteMap brain = brain_disk(g);
  const ByteMap tumor = tumor_labels(g);
  const double w = config.noise.boundary_width;
  const int reach = static_cast<int>(std::ceil(w));
  FloatMap sd(g.size, g.size);
  for (int y = 0; y < g.size; ++y) {
    for (int x = 0; x < g.size; ++x) {
      if (!brain(y, x)) {
        sd(y, x) = static_cast<float>(config.noise.sigma_background);
        continue;
      }
      bool near_edge = false;
      for (int dy = -reach; dy <= reach && !near_edge; ++dy) {
        for (int dx = -reach; dx <= reach; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || xx < 0 || yy >= g.size || xx >= g.size) continue;
          if (dy * dy + dx * dx > w * w) continue;
          if (tumor(yy, xx) != tumor(y, x)) {
            near_edge = true;
            break;
          }
        }
      }
      sd(y, x) = static_cast<float>(near_edge ? config.noise.sigma_boundary : config.noise.sigma_interior);
    }
  }
  return sd;
}

Case render_phantom_case(const PhantomGeometry& g, const PhantomConfig& config,
                         std::uint64_t noise_seed, std::string id) {
  FloatMap img = clean_phantom(g, config);
  const FloatMap sd = noise_std_map(g, config);
  Rng rng(noise_seed);
  for (Eigen::Index i = 0; i < img.size(); ++i) {
    const double z = rng.normal();
    if (sd.data()[i] > 0) img.data()[i] += static_cast<float>(sd.data()[i] * z);
  }
  return Case{std::move(id), Image(std::move(img)), MaskImage{tumor_labels(g), 2},
              RegionMask{brain_disk(g)}};
}

std::vector<Case> generate_phantom_dataset(int n_cases, const PhantomConfig& config,
                                           std::uint64_t seed) {
  if (n_cases < 1) throw ConfigError("phantom: n_cases must be >= 1");
  config.validate();
  std::vector<Case> cases;
  cases.reserve(static_cast<std::size_t>(n_cases));
  for (int i = 0; i < n_cases; ++i) {
    const auto idx = static_cast<std::uint64_t>(i);
    const auto geometry = sample_phantom_geometry(config, derive_seed(seed, {1, idx}));
    char id[32];
    std::snprintf(id, sizeof id, "case%04d", i);
    cases.push_back(render_phantom_case(geometry, config, derive_seed(seed, {2, idx}), id));
  }
  return cases;
}

Image normalize_image(const Image& image, const RegionMask& region) {
  require_same_shape(image.pixels, region.member, "normalize_image");
  double sum = 0.0;
  Eigen::Index n = 0;
  for (Eigen::Index i = 0; i < image.pixels.size(); ++i) {
    if (region.member.data()[i]) {
      sum += image.pixels.data()[i];
      ++n;
    }
  }
  if (n < 2) throw DegenerateInputError("normalize_image: region has fewer than 2 pixels");
  const double mean = sum / static_cast<double>(n);
  double ss = 0.0;
  for (Eigen::Index i = 0; i < image.pixels.size(); ++i) {
    if (region.member.data()[i]) {
      const double d = image.pixels.data()[i] - mean;
      ss += d * d;
    }
  }
  const double sd = std::sqrt(ss / static_cast<double>(n));
  if (!(sd > 0.0)) throw DegenerateInputError("normalize_image: region has zero variance");
  FloatMap out = ((image.pixels.cast<double>().array() - mean) / sd).cast<float>();
  return Image(std::move(out));
}

Image center_crop(const Image& image, int target_h, int target_w) {
  return Image(center_crop(image.pixels, target_h, target_w));
}

Case center_crop(const Case& c, int target_h, int target_w) {
  return Case{c.id, center_crop(c.image, target_h, target_w),
              MaskImage{center_crop(c.mask.labels, target_h, target_w), c.mask.k},
              RegionMask{center_crop(c.region.member, target_h, target_w)}};
}

DatasetSplit split_dataset(std::vector<Case> cases, std::array<double, 3> ratios,
                           std::uint64_t seed) {
  if (cases.empty()) throw ConfigError("split_dataset: empty case list");
  for (double r : ratios) {
    if (r < 0.0) throw ConfigError("split_dataset: negative ratio");
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) {
    throw ConfigError("split_dataset: ratios must sum to 1");
  }
  const auto n = static_cast<long long>(cases.size());
  const long long n_train = std::min(n, std::llround(static_cast<double>(n) * ratios[0]));
  const long long n_val = std::min(n - n_train, std::llround(static_cast<double>(n) * ratios[1]));

  std::vector<std::size_t> order(cases.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());

  DatasetSplit split;
  for (long long i = 0; i < n; ++i) {
    auto& c = cases[order[static_cast<std::size_t>(i)]];
    if (i < n_train) {
      split.train.push_back(std::move(c));
    } else if (i < n_train + n_val) {
      split.val.push_back(std::move(c));
    } else {
      split.test.push_back(std::move(c));
    }
  }
  return split;
}

Case preprocess_case(const Case& c, const PreprocessConfig& config) {
  Case out = c;
  if (config.normalize) out.image = normalize_image(c.image, c.region);
  const int h = config.crop_h > 0 ? config.crop_h : c.image.height();
  const int w = config.crop_w > 0 ? config.crop_w : c.image.width();
  if (h != c.image.height() || w != c.image.width()) out = center_crop(out, h, w);
  return out;
}

namespace {

void write_case(const std::filesystem::path& dir, const Case& c) {
  write_arr(dir / (c.id + "_img.arr"), c.image.pixels);
  write_arr(dir / (c.id + "_mask.arr"), c.mask.labels);
  write_arr(dir / (c.id + "_region.arr"), c.region.member);
}

struct ManifestRow {
  std::string id;
  std::string split;
};

std::vector<ManifestRow> read_manifest(const std::filesystem::path& dir) {
  std::istringstream in(read_text_file(dir / "manifest.tsv"));
  std::vector<ManifestRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ManifestRow row;
    const auto tab = line.find('\t');
    row.id = line.substr(0, tab);
    if (tab != std::string::npos) row.split = line.substr(tab + 1);
    if (row.id == "case_id") continue;
    rows.push_back(std::move(row));
  }
  return rows;
}

MaskImage read_mask(const std::filesystem::path& path, int k) {
  MaskImage mask{read_arr_bytes(path), k};
  if ((mask.labels.array() >= k).any()) {
    throw BoundsError("mask " + path.string() + " has labels >= k");
  }
  return mask;
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const DatasetSplit& split) {
  std::filesystem::create_directories(dir);
  std::string manifest = "case_id\tsplit\n";
  const std::pair<const std::vector<Case>*, const char*> parts[] = {
      {&split.train, "train"}, {&split.val, "val"}, {&split.test, "test"}};
  for (const auto& [cases, name] : parts) {
    for (const auto& c : *cases) {
      write_case(dir, c);
      manifest += c.id + "\t" + name + "\n";
    }
  }
  write_text_file(dir / "manifest.tsv", manifest);
}

DatasetSplit read_dataset(const std::filesystem::path& dir) {
  DatasetSplit split;
  for (const auto& row : read_manifest(dir)) {
    Case c{row.id, Image(read_arr_float(dir / (row.id + "_img.arr"))),
           read_mask(dir / (row.id + "_mask.arr"), 2),
           RegionMask{read_arr_bytes(dir / (row.id + "_region.arr"))}};
    if (row.split == "train") {
      split.train.push_back(std::move(c));
    } else if (row.split == "val") {
      split.val.push_back(std::move(c));
    } else if (row.split == "test") {
      split.test.push_back(std::move(c));
    } else {
      throw IoError("manifest: case " + row.id + " has unknown split '" + row.split + "'");
    }
  }
  return split;
}

DatasetSplit ingest_dataset(const std::filesystem::path& dir, const PreprocessConfig& prep,
                            std::array<double, 3> ratios, std::uint64_t seed, int k) {
  const auto rows = read_manifest(dir);
  if (rows.empty()) throw ConfigError("ingest: manifest lists no cases");
  std::vector<Case> cases;
  bool have_splits = true;
  std::set<std::string> seen;
  for (const auto& row : rows) {
    if (!seen.insert(row.id).second) throw ConfigError("ingest: duplicate case id " + row.id);
    Case c;
    c.id = row.id;
    c.image = Image(read_arr_float(dir / (row.id + "_img.arr")));
    require_finite(c.image.pixels, "ingest image " + row.id);
    c.mask = read_mask(dir / (row.id + "_mask.arr"), k);
    require_same_shape(c.image.pixels, c.mask.labels, "ingest mask " + row.id);
    const auto region_path = dir / (row.id + "_region.arr");
    if (std::filesystem::exists(region_path)) {
      c.region.member = read_arr_bytes(region_path);
    } else {
      c.region.member = (c.image.pixels.array() != 0.0f).cast<std::uint8_t>();
    }
    require_same_shape(c.image.pixels, c.region.member, "ingest region " + row.id);
    have_splits = have_splits && (row.split == "train" || row.split == "val" || row.split == "test");
    cases.push_back(preprocess_case(c, prep));
  }
  if (!have_splits) return split_dataset(std::move(cases), ratios, seed);
  DatasetSplit split;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto& dst = rows[i].split == "train" ? split.train : rows[i].split == "val" ? split.val : split.test;
    dst.push_back(std::move(cases[i]));
  }
  return split;
}

}  // namespace uqaug
