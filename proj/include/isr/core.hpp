#pragma once

// Shared containers, configuration records and deterministic randomness.

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace isr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DegenerateVectorError : public Error {
 public:
  using Error::Error;
};

class DimensionMismatchError : public Error {
 public:
  using Error::Error;
};

class InvalidConfigError : public Error {
 public:
  using Error::Error;
};

inline constexpr double kUnitNormTolerance = 1e-6;
inline constexpr double kDegenerateNorm = 1e-12;

/// Returns v / |v|. Throws DegenerateVectorError when |v| < 1e-12.
Vector l2_normalize(const Vector& v);

/// Column-wise l2 normalization; throws on any degenerate column.
Matrix l2_normalize_columns(const Matrix& m);

/// d x m set of unit-norm embeddings, one column per crop.
class FeatureMatrix {
 public:
  FeatureMatrix() = default;

  /// Validates that every column is unit norm within 1e-6 and d >= 2.
  explicit FeatureMatrix(Matrix columns);

  /// Normalizes each column first.
  static FeatureMatrix normalized(const Matrix& raw);

  /// Wraps columns that the caller has already normalized, skipping the check.
  static FeatureMatrix trusted(Matrix columns);

  Eigen::Index dim() const { return data_.rows(); }
  Eigen::Index size() const { return data_.cols(); }
  bool empty() const { return data_.cols() == 0; }

  const Matrix& matrix() const { return data_; }
  auto col(Eigen::Index i) const { return data_.col(i); }

  /// Columns [first, first + count).
  FeatureMatrix block(Eigen::Index first, Eigen::Index count) const;
  /// Columns selected by index.
  FeatureMatrix select(const std::vector<int>& columns) const;

 private:
  Matrix data_;
};

/// Boolean m x n association: each row matched to exactly one column, columns
/// used at most once, m <= n. Stored as the matched column per row.
class AssociationMatrix {
 public:
  AssociationMatrix() = default;
  AssociationMatrix(std::vector<int> row_to_col, int cols);

  int rows() const { return static_cast<int>(row_to_col_.size()); }
  int cols() const { return cols_; }
  int matched_column(int row) const { return row_to_col_[static_cast<std::size_t>(row)]; }
  const std::vector<int>& row_to_col() const { return row_to_col_; }

  bool operator()(int row, int col) const { return matched_column(row) == col; }
  Matrix dense() const;

  /// Validates a dense boolean matrix against the row/column constraints.
  static AssociationMatrix from_dense(const Matrix& entries);

  bool operator==(const AssociationMatrix&) const = default;

 private:
  std::vector<int> row_to_col_;
  int cols_ = 0;
};

/// c_ij = 1 - x_i . y_j
Matrix cosine_cost(const FeatureMatrix& x, const FeatureMatrix& y);

enum class NegativeSelection { most_similar, most_dissimilar };
enum class Modulation { reliability_stopgrad, reliability_kept, focal, none };

std::string to_string(NegativeSelection mode);
std::string to_string(Modulation mode);
NegativeSelection parse_negative_selection(std::string_view text);
Modulation parse_modulation(std::string_view text);

struct LossConfig {
  double tau = 0.1;
  double gamma = 6.0;
  int k = 16;
  double lambda = 5.0;
  NegativeSelection negative_selection = NegativeSelection::most_similar;
  Modulation modulation = Modulation::reliability_stopgrad;

  void validate() const;
};

/// Seeded generator. The engine is std::mt19937_64, whose output sequence is
/// fixed by the standard; the conversions to real values are done here so the
/// stream is identical on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t draws() const { return draws_; }

  std::uint64_t next_u64() {
    ++draws_;
    return engine_();
  }
  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer on [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n);
  /// Standard normal via Box-Muller.
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[uniform_index(i)]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::uint64_t draws_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Sub-seed derived from (seed, purpose) by FNV-1a and a splitmix64 finalizer.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose);

/// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t basis = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view text);
std::string hex64(std::uint64_t value);

}  // namespace isr
