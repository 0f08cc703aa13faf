#pragma once

#include "uqaug/common.hpp"
#include "uqaug/rng.hpp"

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

namespace testing {

template <typename Scalar = double>
uqaug::Map2<Scalar> random_map(uqaug::Rng& rng, Eigen::Index rows, Eigen::Index cols, double lo = -1.0,
                               double hi = 1.0) {
  uqaug::Map2<Scalar> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(rng.uniform(lo, hi));
  return m;
}

inline uqaug::ByteMap random_mask(uqaug::Rng& rng, Eigen::Index rows, Eigen::Index cols, double p_one = 0.5) {
  uqaug::ByteMap m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.bernoulli(p_one) ? 1 : 0;
  return m;
}

// Scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("uqaug_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
