#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "compomerge/rng.hpp"
#include "compomerge/tensor.hpp"

namespace testing {

using compomerge::SeededRng;
using compomerge::TensorF32;
using compomerge::TensorF64;

// Scratch directory removed on scope exit.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            ("compomerge_test_" + std::to_string(stamp) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline TensorF32 random_tensor(std::vector<std::size_t> shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  SeededRng rng(seed);
  TensorF32 t(shape);
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

// Textbook i-j-k product, no shared code with the library.
template <typename T>
std::vector<double> naive_matmul(const compomerge::Tensor<T>& a, const compomerge::Tensor<T>& b) {
  const std::size_t m = a.shape()[0], n = a.shape()[1], p = b.shape()[1];
  std::vector<double> out(m * p, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < p; ++j)
      for (std::size_t k = 0; k < n; ++k) out[i * p + j] += double(a.data()[i * n + k]) * double(b.data()[k * p + j]);
  return out;
}

inline double rel_diff(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

template <typename A, typename B>
double max_rel_diff(const A& a, const B& b, double floor = 1e-12) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, rel_diff(double(a[i]), double(b[i]), floor));
  return worst;
}

template <typename A, typename B>
double max_abs_diff(const A& a, const B& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(double(a[i]) - double(b[i])));
  return worst;
}

inline double frobenius(const TensorF32& t) {
  double s = 0.0;
  for (float v : t.data()) s += double(v) * v;
  return std::sqrt(s);
}

}  // namespace testing
