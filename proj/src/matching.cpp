#include "isr/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace isr {

AssociationMatrix Matching::association(int cols) const {
  std::vector<int> row_to_col(pairs.size());
  for (const auto& [row, col] : pairs) row_to_col[static_cast<std::size_t>(row)] = col;
  return AssociationMatrix(std::move(row_to_col), cols);
}

namespace {

void check_cost(const Matrix& cost) {
  if (cost.rows() > cost.cols()) {
    throw AssignmentError("assignment: more rows than columns, caller must swap operands");
  }
  if (!cost.allFinite()) {
    throw AssignmentError("assignment: non-finite cost entry");
  }
}

Matching make_matching(const Matrix& cost, const std::vector<int>& row_to_col) {
  Matching result;
  result.pairs.reserve(row_to_col.size());
  for (std::size_t i = 0; i < row_to_col.size(); ++i) {
    const int row = static_cast<int>(i);
    result.pairs.emplace_back(row, row_to_col[i]);
    result.total_cost += cost(row, row_to_col[i]);
  }
  return result;
}

// Row potentials u, column potentials v with c_ij - u_i - v_j >= 0, tight on the
// matched edges, v_j <= 0 and v_j == 0 on every unmatched column.
struct Duals {
  std::vector<double> u;
  std::vector<double> v;
  std::vector<int> row_to_col;
};

// Shortest augmenting path Hungarian method for m <= n; O(m^2 n).
Duals hungarian(const Matrix& cost) {
  const int m = static_cast<int>(cost.rows());
  const int n = static_cast<int>(cost.cols());
  constexpr double inf = std::numeric_limits<double>::infinity();

  // 1-based with a virtual column 0.
  std::vector<double> u(static_cast<std::size_t>(m) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<int> owner(static_cast<std::size_t>(n) + 1, 0);
  std::vector<int> way(static_cast<std::size_t>(n) + 1, 0);
  std::vector<double> min_slack(static_cast<std::size_t>(n) + 1);
  std::vector<char> used(static_cast<std::size_t>(n) + 1);

  for (int row = 1; row <= m; ++row) {
    owner[0] = row;
    int col0 = 0;
    std::fill(min_slack.begin(), min_slack.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[col0] = 1;
      const int row0 = owner[col0];
      double delta = inf;
      int col1 = 0;
      for (int col = 1; col <= n; ++col) {
        if (used[col]) continue;
        const double slack = cost(row0 - 1, col - 1) - u[row0] - v[col];
        if (slack < min_slack[col]) {
          min_slack[col] = slack;
          way[col] = col0;
        }
        if (min_slack[col] < delta) {
          delta = min_slack[col];
          col1 = col;
        }
      }
      for (int col = 0; col <= n; ++col) {
        if (used[col]) {
          u[owner[col]] += delta;
          v[col] -= delta;
        } else {
          min_slack[col] -= delta;
        }
      }
      col0 = col1;
    } while (owner[col0] != 0);
    do {
      const int col1 = way[col0];
      owner[col0] = owner[col1];
      col0 = col1;
    } while (col0 != 0);
  }

  Duals duals;
  duals.u.assign(u.begin() + 1, u.end());
  duals.v.assign(v.begin() + 1, v.end());
  duals.row_to_col.assign(static_cast<std::size_t>(m), -1);
  for (int col = 1; col <= n; ++col) {
    if (owner[col] != 0) duals.row_to_col[static_cast<std::size_t>(owner[col] - 1)] = col - 1;
  }
  return duals;
}

// Every optimal assignment is a perfect matching of the tight-edge graph once
// the n - m unmatched columns are absorbed by zero-cost dummy rows that may only
// sit on columns with v_j == 0. Walking rows in order and taking the smallest
// column that still admits a completion yields the lexicographic optimum.
class TieBreaker {
 public:
  TieBreaker(const Matrix& cost, const Duals& duals) : cost_(cost), duals_(duals) {
    const double scale = std::max(1.0, cost.cwiseAbs().maxCoeff());
    eps_ = 1e-10 * scale;
    m_ = static_cast<int>(cost.rows());
    n_ = static_cast<int>(cost.cols());
    owner_.assign(static_cast<std::size_t>(n_), kDummy);
    for (int row = 0; row < m_; ++row) owner_[static_cast<std::size_t>(duals.row_to_col[row])] = row;
    row_to_col_ = duals.row_to_col;
  }

  std::vector<int> run() {
    for (int row = 0; row < m_; ++row) {
      for (int col = 0; col < row_to_col_[row]; ++col) {
        if (!tight(row, col) || is_fixed(owner_[static_cast<std::size_t>(col)], row)) continue;
        if (try_reassign(row, col)) break;
      }
    }
    return row_to_col_;
  }

 private:
  static constexpr int kDummy = -1;

  bool tight(int row, int col) const {
    if (row == kDummy) return std::abs(duals_.v[col]) <= eps_;
    return cost_(row, col) - duals_.u[row] - duals_.v[col] <= eps_;
  }

  // Rows before `current` are already fixed; dummies never are.
  static bool is_fixed(int owner, int current) { return owner != kDummy && owner < current; }

  bool try_reassign(int row, int col) {
    const auto saved_owner = owner_;
    const auto saved_rows = row_to_col_;
    const int vacated = row_to_col_[row];
    const int displaced = owner_[static_cast<std::size_t>(col)];
    owner_[static_cast<std::size_t>(col)] = row;
    owner_[static_cast<std::size_t>(vacated)] = kFree;
    row_to_col_[row] = col;
    visited_.assign(static_cast<std::size_t>(n_), 0);
    visited_[static_cast<std::size_t>(col)] = 1;
    fixed_upto_ = row;
    if (augment(displaced)) return true;
    owner_ = saved_owner;
    row_to_col_ = saved_rows;
    return false;
  }

  bool augment(int row) {
    for (int col = 0; col < n_; ++col) {
      auto& seen = visited_[static_cast<std::size_t>(col)];
      if (seen || !tight(row, col)) continue;
      const int holder = owner_[static_cast<std::size_t>(col)];
      if (holder != kFree && holder != kDummy && holder <= fixed_upto_) continue;
      seen = 1;
      if (holder == kFree || augment(holder)) {
        owner_[static_cast<std::size_t>(col)] = row;
        if (row != kDummy) row_to_col_[row] = col;
        return true;
      }
    }
    return false;
  }

  static constexpr int kFree = -2;

  const Matrix& cost_;
  const Duals& duals_;
  double eps_ = 0.0;
  int m_ = 0;
  int n_ = 0;
  int fixed_upto_ = -1;
  std::vector<int> owner_;
  std::vector<int> row_to_col_;
  std::vector<char> visited_;
};

}  // namespace

Matching solve_assignment(const Matrix& cost) {
  check_cost(cost);
  if (cost.rows() == 0) return {};
  const Duals duals = hungarian(cost);
  return make_matching(cost, TieBreaker(cost, duals).run());
}

Matching brute_force_assignment(const Matrix& cost) {
  check_cost(cost);
  if (cost.cols() > kBruteForceMaxSize) {
    throw AssignmentError("brute_force_assignment: n exceeds enumeration bound of 8");
  }
  const int m = static_cast<int>(cost.rows());
  const int n = static_cast<int>(cost.cols());
  std::vector<int> current(static_cast<std::size_t>(m));
  std::vector<int> best;
  double best_cost = std::numeric_limits<double>::infinity();
  std::vector<char> used(static_cast<std::size_t>(n), 0);

  // Rows in order, columns ascending: the first optimum found is the
  // lexicographically smallest one.
  auto recurse = [&](auto&& self, int row, double partial) -> void {
    if (row == m) {
      if (partial < best_cost - 1e-12) {
        best_cost = partial;
        best = current;
      }
      return;
    }
    for (int col = 0; col < n; ++col) {
      if (used[static_cast<std::size_t>(col)]) continue;
      used[static_cast<std::size_t>(col)] = 1;
      current[static_cast<std::size_t>(row)] = col;
      self(self, row + 1, partial + cost(row, col));
      used[static_cast<std::size_t>(col)] = 0;
    }
  };
  recurse(recurse, 0, 0.0);
  return make_matching(cost, best);
}

std::optional<MinedPairs> mine_positive_pairs(const FeatureMatrix& x, const FeatureMatrix& y) {
  if (x.empty() || y.empty()) return std::nullopt;
  const bool swapped = x.size() > y.size();
  const Matrix cost = swapped ? cosine_cost(y, x) : cosine_cost(x, y);
  const Matching matching = solve_assignment(cost);
  return MinedPairs{matching.association(static_cast<int>(cost.cols())), swapped, matching.total_cost};
}

}  // namespace isr
