#pragma once

// Minimum-cost rectangular assignment for cross-frame positive mining.

#include "isr/core.hpp"

#include <optional>
#include <utility>
#include <vector>

namespace isr {

class AssignmentError : public Error {
 public:
  using Error::Error;
};

struct Matching {
  std::vector<std::pair<int, int>> pairs;  // (row, column), ascending rows
  double total_cost = 0.0;

  AssociationMatrix association(int cols) const;
};

/// Exact minimum-cost assignment of every row of an m x n cost matrix (m <= n)
/// to a distinct column. Among equal-cost optima the lexicographically smallest
/// pair list is returned.
///
/// Throws AssignmentError when m > n or any entry is non-finite.
Matching solve_assignment(const Matrix& cost);

inline constexpr int kBruteForceMaxSize = 8;

/// Enumerates every injective row -> column map. n <= 8.
Matching brute_force_assignment(const Matrix& cost);

struct MinedPairs {
  AssociationMatrix pi;  // rows index the smaller side
  bool swapped = false;  // true when rows are Y's columns and columns are X's
  double total_cost = 0.0;
};

/// Builds the cosine cost between two frames and solves the assignment,
/// swapping operands when X has more columns than Y. Returns nullopt when
/// either frame is empty.
std::optional<MinedPairs> mine_positive_pairs(const FeatureMatrix& x, const FeatureMatrix& y);

}  // namespace isr
