#pragma once

// Trainable feature extractor: an MLP with ReLU hidden layers and a final l2
// normalization, with exact manual backprop, AdamW and a cosine schedule.

#include "isr/core.hpp"

#include "json.hpp"

#include <filesystem>
#include <vector>

namespace isr {

struct EncoderConfig {
  int input_dim = 48;
  std::vector<int> hidden{64};
  int output_dim = 32;

  void validate() const;
};

class Encoder {
 public:
  struct Cache {
    std::vector<Matrix> layer_inputs;  // input to each affine layer
    std::vector<Matrix> pre_activations;
    Matrix output;  // unit columns
    Vector norms;   // pre-normalization column norms
  };

  Encoder() = default;
  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization for weights and biases.
  Encoder(EncoderConfig cfg, Rng& rng);

  const EncoderConfig& config() const { return cfg_; }
  int layer_count() const { return static_cast<int>(params_.size() / 2); }

  /// W0, b0, W1, b1, ... in declaration order. Biases are column vectors.
  std::vector<Matrix>& parameters() { return params_; }
  const std::vector<Matrix>& parameters() const { return params_; }
  std::size_t parameter_count() const;

  /// Encodes the columns of `observations` (input_dim x m).
  FeatureMatrix forward(const Matrix& observations, Cache* cache = nullptr) const;

  /// Gradients of a scalar loss w.r.t. every parameter, given dL/d(output).
  std::vector<Matrix> backward(const Cache& cache, const Matrix& grad_output) const;

  std::vector<Matrix> zero_gradients() const;

 private:
  EncoderConfig cfg_;
  std::vector<Matrix> params_;
};

/// Gradient of u = z/|z| pulled back to z: (I - u u^T) g / |z|, per column.
Matrix normalization_backward(const Matrix& unit, const Vector& norms, const Matrix& grad_unit);

struct AdamWConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  long total_steps = 1;  // cosine period T
};

/// base * 0.5 * (1 + cos(pi * t / T)), clamped to t in [0, T].
double cosine_learning_rate(double base, long step, long total_steps);

enum class StepStatus { ok, non_finite_gradient };

struct StepReport {
  StepStatus status = StepStatus::ok;
  double learning_rate = 0.0;
  std::string diagnostics;
};

class AdamW {
 public:
  AdamW() = default;
  AdamW(AdamWConfig cfg, const std::vector<Matrix>& params);

  const AdamWConfig& config() const { return cfg_; }
  long step_count() const { return step_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }
  std::vector<Matrix>& first_moments() { return m_; }
  std::vector<Matrix>& second_moments() { return v_; }
  void set_step_count(long step) { step_ = step; }

  double current_learning_rate() const;

  /// Decoupled weight decay then Adam update at the scheduled rate. A
  /// non-finite gradient leaves parameters and state untouched.
  StepReport step(std::vector<Matrix>& params, const std::vector<Matrix>& grads);

 private:
  AdamWConfig cfg_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long step_ = 0;
};

/// `<stem>.json` (metadata) + `<stem>.bin` (little-endian float64 parameters,
/// then first and second moments, in declaration order).
void save_checkpoint(const std::filesystem::path& stem, const Encoder& encoder, const AdamW& optimizer,
                     const nlohmann::json& extra_metadata);

struct Checkpoint {
  Encoder encoder;
  AdamW optimizer;
  nlohmann::json metadata;
};

Checkpoint load_checkpoint(const std::filesystem::path& stem);

/// FNV-1a over the parameter bytes.
std::uint64_t parameter_hash(const std::vector<Matrix>& params);

}  // namespace isr
