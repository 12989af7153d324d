#pragma once

// Attention matrices as plain-text PGM (P2) images or CSV. Darker pixels
// mean more attention.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "maha/errors.hpp"
#include "maha/tensor.hpp"

namespace maha {

enum class HeatmapNorm { global_max, per_row };
enum class HeatmapFormat { pgm, csv };

inline HeatmapFormat parse_heatmap_format(const std::string& s) {
  if (s == "pgm") return HeatmapFormat::pgm;
  if (s == "csv") return HeatmapFormat::csv;
  throw ConfigError("unknown heatmap format '" + s + "' (expected pgm or csv)");
}

inline std::string to_string(HeatmapFormat f) { return f == HeatmapFormat::pgm ? "pgm" : "csv"; }

struct HeatmapSpec {
  std::size_t scale = 0;
  HeatmapNorm norm = HeatmapNorm::global_max;
  HeatmapFormat format = HeatmapFormat::pgm;
};

inline void require_square(const Matrix& a, const char* who) {
  if (a.rows() != a.cols()) throw ShapeError(std::string(who) + ": attention matrix " + a.shape() + " is not square");
}

/// Pixel value round(255 * (1 - a_ij / norm)).
inline std::vector<std::uint8_t> quantize_attention(const Matrix& a, HeatmapNorm norm) {
  require_square(a, "quantize_attention");
  const double global = max_abs(a);
  std::vector<std::uint8_t> px(a.size());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double scale = global;
    if (norm == HeatmapNorm::per_row) {
      scale = 0.0;
      for (double v : a.row(i)) scale = std::max(scale, std::abs(v));
    }
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const double rel = scale > 0.0 ? a(i, j) / scale : 0.0;
      const double v = std::round(255.0 * (1.0 - std::clamp(rel, 0.0, 1.0)));
      px[i * a.cols() + j] = static_cast<std::uint8_t>(v);
    }
  }
  return px;
}

inline std::string export_heatmap(const Matrix& a, const HeatmapSpec& spec) {
  require_square(a, "export_heatmap");
  std::ostringstream os;
  if (spec.format == HeatmapFormat::pgm) {
    const auto px = quantize_attention(a, spec.norm);
    os << "P2\n" << a.cols() << ' ' << a.rows() << "\n255\n";
    for (std::size_t i = 0; i < a.rows(); ++i) {
      for (std::size_t j = 0; j < a.cols(); ++j) {
        if (j) os << ' ';
        os << static_cast<int>(px[i * a.cols() + j]);
      }
      os << '\n';
    }
  } else {
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (std::size_t i = 0; i < a.rows(); ++i) {
      for (std::size_t j = 0; j < a.cols(); ++j) {
        if (j) os << ',';
        os << a(i, j);
      }
      os << '\n';
    }
  }
  return os.str();
}

struct PgmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  int maxval = 0;
  std::vector<std::uint8_t> pixels;
};

/// Reads a plain P2 image (comments are allowed between tokens).
inline PgmImage parse_pgm(const std::string& bytes) {
  std::istringstream in(bytes);
  auto next_token = [&]() {
    std::string tok;
    while (in >> tok) {
      if (tok[0] == '#') {
        std::string rest;
        std::getline(in, rest);
        continue;
      }
      return tok;
    }
    throw ShapeError("parse_pgm: unexpected end of data");
  };
  if (next_token() != "P2") throw ShapeError("parse_pgm: missing P2 magic");
  PgmImage img;
  img.width = std::stoul(next_token());
  img.height = std::stoul(next_token());
  img.maxval = std::stoi(next_token());
  if (img.maxval <= 0 || img.maxval > 255) throw ShapeError("parse_pgm: maxval out of range");
  img.pixels.reserve(img.width * img.height);
  for (std::size_t i = 0; i < img.width * img.height; ++i) {
    const int v = std::stoi(next_token());
    if (v < 0 || v > img.maxval) throw ShapeError("parse_pgm: pixel out of range");
    img.pixels.push_back(static_cast<std::uint8_t>(v));
  }
  return img;
}

/// sum_ij a_ij exp(-|i - j|) / n: 1 for a diagonal matrix, smaller when mass
/// sits away from the diagonal.
inline double diagonality_score(const Matrix& a) {
  require_square(a, "diagonality_score");
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const double dist = std::abs(static_cast<double>(i) - static_cast<double>(j));
      s += a(i, j) * std::exp(-dist);
    }
  return s / static_cast<double>(a.rows());
}

}  // namespace maha
