#include "isr/losses.hpp"

#include <algorithm>
#include <cmath>

namespace isr {

double softplus(double s) { return s > 0.0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s)); }

double sigmoid(double s) {
  if (s >= 0.0) return 1.0 / (1.0 + std::exp(-s));
  const double e = std::exp(s);
  return e / (1.0 + e);
}

ReliabilityReport reliability_from_similarities(const Matrix& similarities, const AssociationMatrix& pi,
                                                double tau) {
  if (similarities.rows() != pi.rows() || similarities.cols() != pi.cols()) {
    throw DimensionMismatchError("reliability: association shape does not match similarities");
  }
  if (!(tau > 0.0)) throw InvalidConfigError("reliability: tau must be > 0");

  const Eigen::Index m = similarities.rows();
  const Eigen::Index n = similarities.cols();
  ReliabilityReport report;
  report.reliability.resize(static_cast<std::size_t>(m));
  report.matched = pi.row_to_col();
  report.softmax.resize(m, n);

  for (Eigen::Index i = 0; i < m; ++i) {
    const double top = similarities.row(i).maxCoeff();
    double total = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      const double e = std::exp((similarities(i, j) - top) / tau);
      report.softmax(i, j) = e;
      total += e;
    }
    report.softmax.row(i) /= total;
    // General form of the numerator; exactly one pi_ij is set per row.
    double p = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (pi(static_cast<int>(i), static_cast<int>(j))) p += report.softmax(i, j);
    }
    report.reliability[static_cast<std::size_t>(i)] = std::clamp(p, kMinReliability, 1.0);
  }
  return report;
}

ReliabilityReport reliability(const FeatureMatrix& x, const FeatureMatrix& y, const AssociationMatrix& pi,
                              double tau) {
  if (x.dim() != y.dim()) throw DimensionMismatchError("reliability: feature dimensions differ");
  return reliability_from_similarities(x.matrix().transpose() * y.matrix(), pi, tau);
}

namespace {

double clamp_p(double p) { return std::clamp(p, kMinReliability, 1.0); }

void check_gamma(double gamma) {
  if (!(gamma >= 0.0)) throw InvalidConfigError("gamma: must be >= 0");
}

AnchorLosses make_losses(std::size_t m) {
  AnchorLosses out;
  out.values.resize(m);
  out.grad_p.resize(m);
  out.grad_logp.resize(m);
  return out;
}

}  // namespace

AnchorLosses rc_loss(const std::vector<double>& reliability, double gamma) {
  check_gamma(gamma);
  AnchorLosses out = make_losses(reliability.size());
  for (std::size_t i = 0; i < reliability.size(); ++i) {
    const double p = clamp_p(reliability[i]);
    const double factor = std::pow(p, gamma);  // frozen
    out.values[i] = -factor * std::log(p);
    out.grad_logp[i] = -factor;
    out.grad_p[i] = -std::pow(p, gamma - 1.0);
  }
  return out;
}

AnchorLosses rc_loss(const ReliabilityReport& report, double gamma) { return rc_loss(report.reliability, gamma); }

AnchorLosses rc_loss_kept_gradient(const std::vector<double>& reliability, double gamma) {
  check_gamma(gamma);
  AnchorLosses out = make_losses(reliability.size());
  for (std::size_t i = 0; i < reliability.size(); ++i) {
    const double p = clamp_p(reliability[i]);
    const double log_p = std::log(p);
    const double slope = gamma * log_p + 1.0;
    out.values[i] = -std::pow(p, gamma) * log_p;
    out.grad_logp[i] = -std::pow(p, gamma) * slope;
    out.grad_p[i] = -std::pow(p, gamma - 1.0) * slope;
  }
  return out;
}

AnchorLosses rc_loss_kept_gradient(const ReliabilityReport& report, double gamma) {
  return rc_loss_kept_gradient(report.reliability, gamma);
}

AnchorLosses focal_loss(const std::vector<double>& reliability, double gamma) {
  check_gamma(gamma);
  AnchorLosses out = make_losses(reliability.size());
  for (std::size_t i = 0; i < reliability.size(); ++i) {
    const double p = clamp_p(reliability[i]);
    const double q = 1.0 - p;
    const double log_p = std::log(p);
    const double factor = std::pow(q, gamma);
    out.values[i] = -factor * log_p;
    // d/dp (1-p)^gamma = -gamma (1-p)^(gamma-1); the product with log p vanishes at p = 1.
    const double factor_slope = (gamma == 0.0 || q <= 0.0) ? 0.0 : gamma * std::pow(q, gamma - 1.0);
    out.grad_p[i] = factor_slope * log_p - factor / p;
    out.grad_logp[i] = factor_slope * p * log_p - factor;
  }
  return out;
}

AnchorLosses focal_loss(const ReliabilityReport& report, double gamma) {
  return focal_loss(report.reliability, gamma);
}

AnchorLosses modulated_loss(const std::vector<double>& reliability, Modulation modulation, double gamma) {
  switch (modulation) {
    case Modulation::reliability_stopgrad: return rc_loss(reliability, gamma);
    case Modulation::reliability_kept: return rc_loss_kept_gradient(reliability, gamma);
    case Modulation::focal: return focal_loss(reliability, gamma);
    case Modulation::none: return rc_loss(reliability, 0.0);
  }
  return rc_loss(reliability, gamma);
}

BatchScale rc_batch_loss(const std::vector<double>& losses, const std::vector<double>& losses_gamma0) {
  if (losses.empty()) throw DimensionMismatchError("rc_batch_loss: empty batch");
  if (losses.size() != losses_gamma0.size()) {
    throw DimensionMismatchError("rc_batch_loss: batch sizes differ");
  }
  double sum = 0.0;
  double sum0 = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    sum += losses[i];
    sum0 += losses_gamma0[i];
  }
  BatchScale out;
  out.alpha = sum > 0.0 ? sum0 / sum : 1.0;
  out.loss = out.alpha * sum / static_cast<double>(losses.size());
  return out;
}

Matrix similarity_gradient(const ReliabilityReport& report, const std::vector<double>& grad_logp, double tau) {
  const Eigen::Index m = report.softmax.rows();
  Matrix grad = -report.softmax;
  for (Eigen::Index i = 0; i < m; ++i) {
    grad(i, report.matched[static_cast<std::size_t>(i)]) += 1.0;
    grad.row(i) *= grad_logp[static_cast<std::size_t>(i)] / tau;
  }
  return grad;
}

LossOutput contrastive_loss(const FeatureMatrix& x, const FeatureMatrix& y, const AssociationMatrix& pi,
                            const LossConfig& cfg) {
  cfg.validate();
  LossOutput out;
  out.grad_x = Matrix::Zero(x.dim(), x.size());
  out.grad_y = Matrix::Zero(y.dim(), y.size());
  if (x.empty()) return out;

  const ReliabilityReport report = reliability(x, y, pi, cfg.tau);
  const AnchorLosses losses = modulated_loss(report.reliability, cfg.modulation, cfg.gamma);
  const double m = static_cast<double>(x.size());

  if (cfg.modulation == Modulation::focal || cfg.modulation == Modulation::none) {
    out.alpha = 1.0;
    double sum = 0.0;
    for (double v : losses.values) sum += v;
    out.value = sum / m;
  } else {
    const AnchorLosses plain = rc_loss(report.reliability, 0.0);
    const BatchScale scale = rc_batch_loss(losses.values, plain.values);
    out.alpha = scale.alpha;
    out.value = scale.loss;
  }

  std::vector<double> coeff(losses.grad_logp.size());
  for (std::size_t i = 0; i < coeff.size(); ++i) coeff[i] = out.alpha / m * losses.grad_logp[i];
  const Matrix grad_s = similarity_gradient(report, coeff, cfg.tau);
  out.grad_x = y.matrix() * grad_s.transpose();
  out.grad_y = x.matrix() * grad_s;
  return out;
}

LossOutput queue_loss(const FeatureMatrix& anchors, const std::vector<Matrix>& negatives) {
  if (static_cast<Eigen::Index>(negatives.size()) != anchors.size()) {
    throw DimensionMismatchError("queue_loss: one negative block per anchor required");
  }
  LossOutput out;
  out.grad_x = Matrix::Zero(anchors.dim(), anchors.size());
  out.grad_negatives.resize(negatives.size());
  if (anchors.empty()) return out;

  const double m = static_cast<double>(anchors.size());
  double total = 0.0;
  for (Eigen::Index i = 0; i < anchors.size(); ++i) {
    const Matrix& block = negatives[static_cast<std::size_t>(i)];
    if (block.cols() == 0) {
      out.flagged.push_back(static_cast<int>(i));
      out.grad_negatives[static_cast<std::size_t>(i)] = Matrix::Zero(anchors.dim(), 0);
      continue;
    }
    if (block.rows() != anchors.dim()) throw DimensionMismatchError("queue_loss: negative dimension differs");
    const double k = static_cast<double>(block.cols());
    const Vector sims = block.transpose() * anchors.col(i);
    Vector weights(sims.size());
    double anchor_loss = 0.0;
    for (Eigen::Index j = 0; j < sims.size(); ++j) {
      anchor_loss += softplus(sims(j));
      weights(j) = sigmoid(sims(j)) / (k * m);
    }
    total += anchor_loss / k;
    out.grad_x.col(i) = block * weights;
    out.grad_negatives[static_cast<std::size_t>(i)] = anchors.col(i) * weights.transpose();
  }
  out.value = total / m;
  return out;
}

double total_loss(double rc, double q, double lambda) { return rc + lambda * q; }

}  // namespace isr
