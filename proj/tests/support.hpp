#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "maha/tensor.hpp"

namespace maha::testing {

/// s * sin(a * (k + 1) + c) for k = 0..count-1; the oracle script uses the
/// same formula.
inline std::vector<double> wave(std::size_t count, double a, double c, double s) {
  std::vector<double> v(count);
  for (std::size_t k = 0; k < count; ++k) v[k] = s * std::sin(a * static_cast<double>(k + 1) + c);
  return v;
}

inline Matrix wave_matrix(std::size_t rows, std::size_t cols, double a, double c, double s) {
  return Matrix(rows, cols, wave(rows * cols, a, c, s));
}

inline ConvKernel wave_kernel(std::size_t k, std::size_t d_in, std::size_t d_out, double a, double c, double s) {
  ConvKernel kernel(k, d_in, d_out);
  kernel.weights = wave(k * d_in * d_out, a, c, s);
  return kernel;
}

inline Matrix col(std::vector<double> v) {
  const std::size_t n = v.size();
  return Matrix(n, 1, std::move(v));
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("maha_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace maha::testing
