#pragma once

#include "ksr/kspace.hpp"
#include "ksr/tensor.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

namespace test {

using ksr::Image;
using ksr::Index;
using ksr::Shape;
using ksr::Tensor;

// sin(a·n + b)·scale + offset over flat row-major indices; mirrors
// tests/oracle/make_frozen.py.
inline Tensor<double> pattern(const Shape& shape, double a, double b, double scale = 1.0, double offset = 0.0,
                              bool requires_grad = false) {
  Tensor<double>::Array v(ksr::numel(shape));
  for (Index n = 0; n < v.size(); ++n) v[n] = offset + scale * std::sin(a * static_cast<double>(n) + b);
  return Tensor<double>(shape, std::move(v), requires_grad);
}

inline Image pattern_image(Index rows, Index cols, double a, double b, double scale = 0.5, double offset = 0.5) {
  Image img(rows, cols);
  for (Index n = 0; n < img.size(); ++n) img.data()[n] = offset + scale * std::sin(a * static_cast<double>(n) + b);
  return img;
}

// Uniform [0,1) image from a std::mt19937_64 stream.
inline Image random_image(Index rows, Index cols, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(rows, cols);
  for (Index n = 0; n < img.size(); ++n) img.data()[n] = u(gen);
  return img;
}

template <typename A, typename B>
double max_abs_diff(const A& a, const B& b, Index n) {
  double worst = 0;
  for (Index i = 0; i < n; ++i) worst = std::max(worst, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return worst;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("ksr-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace test
