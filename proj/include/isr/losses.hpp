#pragma once

// Reliability score, reliability-guided contrastive loss and its variants,
// batch scaling, and the memory-queue loss, with exact gradients.

#include "isr/core.hpp"

#include <vector>

namespace isr {

inline constexpr double kMinReliability = 1e-300;

struct ReliabilityReport {
  std::vector<double> reliability;  // p(x_i) in (0, 1]
  std::vector<int> matched;         // matched column per anchor
  Matrix softmax;                   // m x n; row i is the softmax over columns for anchor i
};

/// p(x_i) = sum_j pi_ij exp(x_i.y_j / tau) / sum_j exp(x_i.y_j / tau).
ReliabilityReport reliability(const FeatureMatrix& x, const FeatureMatrix& y, const AssociationMatrix& pi,
                              double tau);

/// Same, from a precomputed m x n similarity matrix s_ij = x_i . y_j.
ReliabilityReport reliability_from_similarities(const Matrix& similarities, const AssociationMatrix& pi,
                                                double tau);

/// Per-anchor loss values with the derivative used for backprop.
/// grad_logp is dL/d(log p) under the variant's differentiation rule; the
/// derivative w.r.t. p is grad_logp / p (reported in grad_p).
struct AnchorLosses {
  std::vector<double> values;
  std::vector<double> grad_p;
  std::vector<double> grad_logp;
};

/// -p^gamma log p with p^gamma treated as a constant in backprop.
AnchorLosses rc_loss(const ReliabilityReport& report, double gamma);
AnchorLosses rc_loss(const std::vector<double>& reliability, double gamma);

/// Same value as rc_loss but the gradient flows through p^gamma:
/// dL/dp = -p^(gamma-1) (gamma log p + 1).
AnchorLosses rc_loss_kept_gradient(const ReliabilityReport& report, double gamma);
AnchorLosses rc_loss_kept_gradient(const std::vector<double>& reliability, double gamma);

/// -(1-p)^gamma log p, gradient through the factor.
AnchorLosses focal_loss(const ReliabilityReport& report, double gamma);
AnchorLosses focal_loss(const std::vector<double>& reliability, double gamma);

/// Dispatches on the modulation mode. `none` is plain cross-entropy.
AnchorLosses modulated_loss(const std::vector<double>& reliability, Modulation modulation, double gamma);

struct BatchScale {
  double loss = 0.0;
  double alpha = 1.0;
};

/// (alpha / m) sum_i L_i with alpha = sum L_{gamma=0} / sum L_gamma, both
/// frozen. alpha = 1 when the denominator is zero.
BatchScale rc_batch_loss(const std::vector<double>& losses, const std::vector<double>& losses_gamma0);

/// dL/ds_ij for the similarity logits, given dL/d(log p_i) per anchor.
/// d log p_i / d s_ij = (pi_ij - sigma_ij) / tau.
Matrix similarity_gradient(const ReliabilityReport& report, const std::vector<double>& grad_logp, double tau);

struct LossOutput {
  double value = 0.0;
  Matrix grad_x;                         // d x m
  Matrix grad_y;                         // d x n
  std::vector<Matrix> grad_negatives;    // d x k_i per anchor
  double alpha = 1.0;
  std::vector<int> flagged;              // anchors without negatives
};

/// Full contrastive term for one frame pair: reliabilities, per-anchor loss
/// under cfg.modulation, alpha scaling (plain mean for focal), and gradients
/// w.r.t. both embedding sets.
LossOutput contrastive_loss(const FeatureMatrix& x, const FeatureMatrix& y, const AssociationMatrix& pi,
                            const LossConfig& cfg);

/// Queue term: mean over anchors of (1/k) sum_j softplus(x_i . f_j).
/// negatives[i] is d x k_i; anchors with k_i = 0 contribute 0 and are flagged.
LossOutput queue_loss(const FeatureMatrix& anchors, const std::vector<Matrix>& negatives);

/// L_RC + lambda L_Q.
double total_loss(double rc, double q, double lambda);

/// log(1 + e^s) without overflow.
double softplus(double s);
double sigmoid(double s);

}  // namespace isr
