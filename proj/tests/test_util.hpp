#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "eqcm/rng.hpp"
#include "eqcm/tensor.hpp"

namespace testutil {

template <typename T>
eqcm::Tensor<T> random_tensor(std::vector<int> shape, eqcm::Rng& rng, double lo = -1.0,
                              double hi = 1.0) {
  eqcm::Tensor<T> t(std::move(shape));
  for (auto& x : t.v) x = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
eqcm::Tensor<T> random_normal(std::vector<int> shape, eqcm::Rng& rng, double sigma = 1.0) {
  eqcm::Tensor<T> t(std::move(shape));
  for (auto& x : t.v) x = static_cast<T>(sigma * rng.normal());
  return t;
}

// Random row-stochastic [N, C] matrix.
template <typename T>
eqcm::Tensor<T> random_probs(int n, int c, eqcm::Rng& rng) {
  eqcm::Tensor<T> t({n, c});
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < c; ++j) {
      const double u = rng.uniform(0.05, 1.0);
      t.v[static_cast<std::size_t>(i) * c + j] = static_cast<T>(u);
      s += u;
    }
    for (int j = 0; j < c; ++j)
      t.v[static_cast<std::size_t>(i) * c + j] =
          static_cast<T>(t.v[static_cast<std::size_t>(i) * c + j] / s);
  }
  return t;
}

template <typename T>
eqcm::Tensor<T> one_hot(const std::vector<int>& classes, int c) {
  eqcm::Tensor<T> t({static_cast<int>(classes.size()), c});
  for (std::size_t i = 0; i < classes.size(); ++i) t.v[i * c + classes[i]] = T(1);
  return t;
}

template <typename T>
double max_abs_diff(const eqcm::Tensor<T>& a, const eqcm::Tensor<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.v[i]) - b.v[i]));
  return m;
}

// Per-test scratch directory under the build tree.
inline std::string scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "eqcm_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace testutil
