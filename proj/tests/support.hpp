#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include <gtest/gtest.h>

#include "xstitch/stitched.hpp"

namespace xstitch::testing {

inline constexpr int kSeeds = 20;

/// Seeded generator of random shapes, tensors and alpha matrices.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  double uniform(double lo = -1.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  Index integer(Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng_); }
  int label(Index classes) { return static_cast<int>(integer(0, classes - 1)); }
  bool coin() { return (rng_() & 1U) != 0; }

  template <typename Scalar>
  Tensor<Scalar> tensor(Shape shape, double lo = -1.0, double hi = 1.0) {
    Tensor<Scalar> t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(uniform(lo, hi));
    return t;
  }

  /// Values bounded away from zero by `gap`, for checks near ReLU kinks.
  template <typename Scalar>
  Tensor<Scalar> tensor_off_zero(Shape shape, double gap = 1e-2) {
    Tensor<Scalar> t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) {
      const double v = uniform(gap, 1.0);
      t[i] = static_cast<Scalar>(coin() ? v : -v);
    }
    return t;
  }

  /// (batch, channels, height, width) or (batch, features).
  Shape activation_shape() {
    const Index n = integer(1, 3);
    const Index c = integer(1, 4);
    if (coin()) return {n, c};
    return {n, c, integer(1, 4), integer(1, 4)};
  }

  template <typename Scalar>
  AlphaMatrix<Scalar> alpha() {
    AlphaMatrix<Scalar> m;
    m << static_cast<Scalar>(uniform()), static_cast<Scalar>(uniform()), static_cast<Scalar>(uniform()),
        static_cast<Scalar>(uniform());
    return m;
  }

  template <typename Scalar>
  CrossStitchUnit<Scalar> unit(Granularity g, Index channels) {
    CrossStitchUnit<Scalar> u;
    u.granularity = g;
    u.site = "site";
    const Index count = g == Granularity::per_map ? 1 : channels;
    for (Index i = 0; i < count; ++i) u.alphas.push_back(alpha<Scalar>());
    return u;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

/// Fresh, empty directory under the system temp dir, named after the running test.
inline std::filesystem::path scratch_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  auto dir = std::filesystem::temp_directory_path() / "xstitch_tests" /
             (std::string(info->test_suite_name()) + "." + info->name());
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace xstitch::testing
