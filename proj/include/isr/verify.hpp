#pragma once

// Self-contained property suites run by `isr verify`: the assignment oracle
// sweep, finite-difference gradient checks, loss-curve properties, the queue
// rank oracle and the retrieval metric oracle.

#include "isr/core.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace isr {

struct SuiteResult {
  std::string name;
  bool passed = true;
  int cases = 0;
  int failures = 0;
  double worst_error = 0.0;  // suite-specific, compared against `tolerance`
  double tolerance = 0.0;
  double seconds = 0.0;
  std::string detail;  // first failure, if any
};

struct VerifyOptions {
  int instances = 0;  // 0 uses each suite's default
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> curves_csv;
};

std::vector<std::string> verify_suite_names();

/// solve_assignment against brute_force_assignment, m <= n <= 7 (default 1000 instances).
SuiteResult verify_matching(const VerifyOptions& options);
/// Similarity, queue, focal, kept-gradient and full encoder pipeline gradients
/// against central differences (default 500 configurations).
SuiteResult verify_gradients(const VerifyOptions& options);
/// |dL/dp| = p^(gamma-1) on the grid, kept-gradient slump roots, alpha scaling.
SuiteResult verify_curves(const VerifyOptions& options);
/// Queue selection against a full sort (default 200 instances).
SuiteResult verify_queue(const VerifyOptions& options);
/// mAP and CMC against rank enumeration for galleries of at most 8 (default 500).
SuiteResult verify_metrics(const VerifyOptions& options);

SuiteResult run_verify_suite(const std::string& name, const VerifyOptions& options);

/// Loss and derivative curves: gamma, p, loss, grad_stopgrad, grad_kept for
/// p = 0.001, 0.002, ..., 1.0.
void write_curves_csv(const std::filesystem::path& path, const std::vector<double>& gammas);

}  // namespace isr
