#include "isr/core.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>

namespace isr {

Vector l2_normalize(const Vector& v) {
  if (v.size() < 1) {
    throw DegenerateVectorError("l2_normalize: empty vector");
  }
  const double norm = v.norm();
  if (!(norm >= kDegenerateNorm)) {
    throw DegenerateVectorError("l2_normalize: vector norm below 1e-12");
  }
  return v / norm;
}

Matrix l2_normalize_columns(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    out.col(j) = l2_normalize(m.col(j));
  }
  return out;
}

FeatureMatrix::FeatureMatrix(Matrix columns) : data_(std::move(columns)) {
  if (data_.rows() < 2) {
    throw DimensionMismatchError("FeatureMatrix: embedding dimension must be >= 2");
  }
  for (Eigen::Index j = 0; j < data_.cols(); ++j) {
    if (std::abs(data_.col(j).norm() - 1.0) > kUnitNormTolerance) {
      throw DegenerateVectorError("FeatureMatrix: column " + std::to_string(j) + " is not unit norm");
    }
  }
}

FeatureMatrix FeatureMatrix::normalized(const Matrix& raw) { return FeatureMatrix(l2_normalize_columns(raw)); }

FeatureMatrix FeatureMatrix::trusted(Matrix columns) {
  FeatureMatrix f;
  f.data_ = std::move(columns);
  return f;
}

FeatureMatrix FeatureMatrix::block(Eigen::Index first, Eigen::Index count) const {
  return trusted(data_.middleCols(first, count));
}

FeatureMatrix FeatureMatrix::select(const std::vector<int>& columns) const {
  Matrix out(data_.rows(), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t j = 0; j < columns.size(); ++j) {
    out.col(static_cast<Eigen::Index>(j)) = data_.col(columns[j]);
  }
  return trusted(std::move(out));
}

AssociationMatrix::AssociationMatrix(std::vector<int> row_to_col, int cols)
    : row_to_col_(std::move(row_to_col)), cols_(cols) {
  if (rows() > cols_) {
    throw DimensionMismatchError("AssociationMatrix: requires m <= n");
  }
  std::vector<char> used(static_cast<std::size_t>(cols_), 0);
  for (int c : row_to_col_) {
    if (c < 0 || c >= cols_) {
      throw DimensionMismatchError("AssociationMatrix: row matched to out-of-range column");
    }
    if (used[static_cast<std::size_t>(c)]++) {
      throw DimensionMismatchError("AssociationMatrix: column matched twice");
    }
  }
}

Matrix AssociationMatrix::dense() const {
  Matrix out = Matrix::Zero(rows(), cols_);
  for (int i = 0; i < rows(); ++i) out(i, matched_column(i)) = 1.0;
  return out;
}

AssociationMatrix AssociationMatrix::from_dense(const Matrix& entries) {
  std::vector<int> row_to_col;
  for (Eigen::Index i = 0; i < entries.rows(); ++i) {
    int match = -1;
    for (Eigen::Index j = 0; j < entries.cols(); ++j) {
      const double e = entries(i, j);
      if (e != 0.0 && e != 1.0) throw DimensionMismatchError("AssociationMatrix: entries must be boolean");
      if (e == 1.0) {
        if (match >= 0) throw DimensionMismatchError("AssociationMatrix: row sums to more than 1");
        match = static_cast<int>(j);
      }
    }
    if (match < 0) throw DimensionMismatchError("AssociationMatrix: row sums to 0");
    row_to_col.push_back(match);
  }
  return AssociationMatrix(std::move(row_to_col), static_cast<int>(entries.cols()));
}

Matrix cosine_cost(const FeatureMatrix& x, const FeatureMatrix& y) {
  if (x.dim() != y.dim()) {
    throw DimensionMismatchError("cosine_cost: feature dimensions differ");
  }
  Matrix cost = -(x.matrix().transpose() * y.matrix());
  cost.array() += 1.0;
  return cost;
}

std::string to_string(NegativeSelection mode) {
  return mode == NegativeSelection::most_similar ? "most_similar" : "most_dissimilar";
}

std::string to_string(Modulation mode) {
  switch (mode) {
    case Modulation::reliability_stopgrad: return "reliability_stopgrad";
    case Modulation::reliability_kept: return "reliability_kept";
    case Modulation::focal: return "focal";
    case Modulation::none: return "none";
  }
  return "unknown";
}

NegativeSelection parse_negative_selection(std::string_view text) {
  if (text == "most_similar") return NegativeSelection::most_similar;
  if (text == "most_dissimilar") return NegativeSelection::most_dissimilar;
  throw InvalidConfigError("negative_selection: expected most_similar or most_dissimilar, got '" +
                           std::string(text) + "'");
}

Modulation parse_modulation(std::string_view text) {
  for (Modulation m : {Modulation::reliability_stopgrad, Modulation::reliability_kept, Modulation::focal,
                       Modulation::none}) {
    if (text == to_string(m)) return m;
  }
  throw InvalidConfigError("modulation: unknown value '" + std::string(text) + "'");
}

void LossConfig::validate() const {
  if (!(tau > 0.0)) throw InvalidConfigError("tau: must be > 0");
  if (!(gamma >= 0.0)) throw InvalidConfigError("gamma: must be >= 0");
  if (k < 1) throw InvalidConfigError("k: must be >= 1");
  if (!(lambda >= 0.0)) throw InvalidConfigError("lambda: must be >= 0");
}

std::uint64_t Rng::uniform_index(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::uniform_index: n must be positive");
  // Rejection sampling keeps the result exactly uniform.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t draw = next_u64();
  while (draw >= limit) draw = next_u64();
  return draw % n;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t basis) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  std::uint64_t hash = basis;
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= bytes[i];
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

std::uint64_t fnv1a64(std::string_view text) { return fnv1a64(text.data(), text.size()); }

std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
  std::uint64_t z = fnv1a64(purpose) ^ (seed + 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

}  // namespace isr
