#pragma once

#include "isr/core.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace isr::testing {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = scale * rng.normal();
  }
  return m;
}

inline Matrix random_unit_columns(Eigen::Index d, Eigen::Index m, Rng& rng) {
  Matrix raw = random_matrix(d, m, rng);
  for (Eigen::Index c = 0; c < m; ++c) raw.col(c) /= raw.col(c).norm();
  return raw;
}

inline int random_int(Rng& rng, int lo, int hi) {  // inclusive
  return lo + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(hi - lo + 1)));
}

/// |a - b| / max(|a|, |b|, floor)
inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace isr::testing
