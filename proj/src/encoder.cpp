#include "isr/encoder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

namespace isr {

using json = nlohmann::json;

void EncoderConfig::validate() const {
  if (input_dim < 1) throw InvalidConfigError("encoder input_dim: must be >= 1");
  if (output_dim < 2) throw InvalidConfigError("encoder output_dim: must be >= 2");
  for (int h : hidden) {
    if (h < 1) throw InvalidConfigError("encoder hidden width: must be >= 1");
  }
}

Encoder::Encoder(EncoderConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::vector<int> widths{cfg_.input_dim};
  widths.insert(widths.end(), cfg_.hidden.begin(), cfg_.hidden.end());
  widths.push_back(cfg_.output_dim);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(widths[l]));
    Matrix w(widths[l + 1], widths[l]);
    Matrix b(widths[l + 1], 1);
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = rng.uniform(-bound, bound);
    }
    for (Eigen::Index r = 0; r < b.rows(); ++r) b(r, 0) = rng.uniform(-bound, bound);
    params_.push_back(std::move(w));
    params_.push_back(std::move(b));
  }
}

std::size_t Encoder::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += static_cast<std::size_t>(p.size());
  return total;
}

std::vector<Matrix> Encoder::zero_gradients() const {
  std::vector<Matrix> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(Matrix::Zero(p.rows(), p.cols()));
  return out;
}

FeatureMatrix Encoder::forward(const Matrix& observations, Cache* cache) const {
  if (observations.cols() > 0 && observations.rows() != cfg_.input_dim) {
    throw DimensionMismatchError("encoder forward: observation dimension differs from input_dim");
  }
  const Eigen::Index m = observations.cols();
  if (cache) {
    cache->layer_inputs.clear();
    cache->pre_activations.clear();
  }
  if (m == 0) {
    if (cache) {
      cache->output = Matrix(cfg_.output_dim, 0);
      cache->norms = Vector(0);
    }
    return FeatureMatrix::trusted(Matrix(cfg_.output_dim, 0));
  }

  Matrix activation = observations;
  const int layers = layer_count();
  for (int l = 0; l < layers; ++l) {
    const Matrix& w = params_[static_cast<std::size_t>(2 * l)];
    const Matrix& b = params_[static_cast<std::size_t>(2 * l + 1)];
    Matrix pre = w * activation;
    pre.colwise() += b.col(0);
    if (cache) cache->layer_inputs.push_back(activation);
    if (l + 1 < layers) {
      activation = pre.cwiseMax(0.0);
    } else {
      activation = pre;
    }
    if (cache) cache->pre_activations.push_back(std::move(pre));
  }

  Vector norms = activation.colwise().norm().transpose();
  Matrix unit(activation.rows(), m);
  for (Eigen::Index j = 0; j < m; ++j) {
    norms(j) = std::max(norms(j), kDegenerateNorm);
    unit.col(j) = activation.col(j) / norms(j);
  }
  if (cache) {
    cache->output = unit;
    cache->norms = norms;
  }
  return FeatureMatrix::trusted(std::move(unit));
}

Matrix normalization_backward(const Matrix& unit, const Vector& norms, const Matrix& grad_unit) {
  Matrix out(unit.rows(), unit.cols());
  for (Eigen::Index j = 0; j < unit.cols(); ++j) {
    const double radial = unit.col(j).dot(grad_unit.col(j));
    out.col(j) = (grad_unit.col(j) - radial * unit.col(j)) / norms(j);
  }
  return out;
}

std::vector<Matrix> Encoder::backward(const Cache& cache, const Matrix& grad_output) const {
  const int layers = layer_count();
  if (static_cast<int>(cache.layer_inputs.size()) != layers || grad_output.rows() != cache.output.rows() ||
      grad_output.cols() != cache.output.cols()) {
    throw DimensionMismatchError("encoder backward: cache does not match this forward pass");
  }
  std::vector<Matrix> grads = zero_gradients();
  if (grad_output.cols() == 0) return grads;

  Matrix delta = normalization_backward(cache.output, cache.norms, grad_output);
  for (int l = layers - 1; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    if (l + 1 < layers) {
      delta = delta.cwiseProduct((cache.pre_activations[li].array() > 0.0).cast<double>().matrix());
    }
    grads[2 * li] = delta * cache.layer_inputs[li].transpose();
    grads[2 * li + 1] = delta.rowwise().sum();
    if (l > 0) delta = params_[2 * li].transpose() * delta;
  }
  return grads;
}

double cosine_learning_rate(double base, long step, long total_steps) {
  if (total_steps <= 0) return base;
  const double t = static_cast<double>(std::clamp(step, 0L, total_steps));
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t / static_cast<double>(total_steps)));
}

AdamW::AdamW(AdamWConfig cfg, const std::vector<Matrix>& params) : cfg_(cfg) {
  for (const auto& p : params) {
    m_.push_back(Matrix::Zero(p.rows(), p.cols()));
    v_.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
}

double AdamW::current_learning_rate() const {
  return cosine_learning_rate(cfg_.learning_rate, step_, cfg_.total_steps);
}

StepReport AdamW::step(std::vector<Matrix>& params, const std::vector<Matrix>& grads) {
  if (params.size() != grads.size() || params.size() != m_.size()) {
    throw DimensionMismatchError("AdamW: parameter/gradient count mismatch");
  }
  StepReport report;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].rows() != params[i].rows() || grads[i].cols() != params[i].cols()) {
      throw DimensionMismatchError("AdamW: gradient shape mismatch");
    }
    if (!grads[i].allFinite()) {
      report.status = StepStatus::non_finite_gradient;
      report.diagnostics = "non-finite gradient in parameter block " + std::to_string(i) + " at step " +
                           std::to_string(step_);
      return report;
    }
  }

  const double lr = current_learning_rate();
  report.learning_rate = lr;
  const double t = static_cast<double>(step_ + 1);
  const double correction1 = 1.0 - std::pow(cfg_.beta1, t);
  const double correction2 = 1.0 - std::pow(cfg_.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i] *= 1.0 - lr * cfg_.weight_decay;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grads[i];
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grads[i].cwiseProduct(grads[i]);
    const auto m_hat = m_[i].array() / correction1;
    const auto v_hat = v_[i].array() / correction2;
    params[i].array() -= lr * m_hat / (v_hat.sqrt() + cfg_.epsilon);
  }
  ++step_;
  return report;
}

namespace {

void write_f64(std::ofstream& out, const Matrix& m) {
  // Column-major element order.
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const double value = m.data()[i];
    std::uint64_t bits;
    std::memcpy(&bits, &value, sizeof bits);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
  }
}

void read_f64(std::ifstream& in, Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    std::uint64_t bits;
    in.read(reinterpret_cast<char*>(&bits), sizeof bits);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    std::memcpy(m.data() + i, &bits, sizeof bits);
  }
}

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  return std::filesystem::path(stem.string() + suffix);
}

}  // namespace

std::uint64_t parameter_hash(const std::vector<Matrix>& params) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (const auto& p : params) {
    hash = fnv1a64(p.data(), static_cast<std::size_t>(p.size()) * sizeof(double), hash);
  }
  return hash;
}

void save_checkpoint(const std::filesystem::path& stem, const Encoder& encoder, const AdamW& optimizer,
                     const json& extra_metadata) {
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  const auto& cfg = encoder.config();
  json shapes = json::array();
  for (const auto& p : encoder.parameters()) shapes.push_back({p.rows(), p.cols()});
  const auto& opt = optimizer.config();
  json meta{{"format", "isr-checkpoint/1"},
            {"architecture",
             {{"input_dim", cfg.input_dim}, {"hidden", cfg.hidden}, {"output_dim", cfg.output_dim},
              {"nonlinearity", "relu"}, {"output", "l2_normalized"}}},
            {"parameter_shapes", shapes},
            {"parameter_count", encoder.parameter_count()},
            {"step", optimizer.step_count()},
            {"optimizer",
             {{"name", "adamw"}, {"learning_rate", opt.learning_rate}, {"beta1", opt.beta1}, {"beta2", opt.beta2},
              {"epsilon", opt.epsilon}, {"weight_decay", opt.weight_decay}, {"total_steps", opt.total_steps},
              {"schedule", "cosine"}}},
            {"parameter_hash", hex64(parameter_hash(encoder.parameters()))},
            {"binary_layout", "float64 little-endian column-major; parameters, first moments, second moments"},
            {"extra", extra_metadata}};

  std::ofstream bin(with_suffix(stem, ".bin"), std::ios::binary | std::ios::trunc);
  if (!bin) throw Error("save_checkpoint: cannot open " + with_suffix(stem, ".bin").string());
  for (const auto& p : encoder.parameters()) write_f64(bin, p);
  for (const auto& m : optimizer.first_moments()) write_f64(bin, m);
  for (const auto& v : optimizer.second_moments()) write_f64(bin, v);
  if (!bin) throw Error("save_checkpoint: write failed");

  std::ofstream out(with_suffix(stem, ".json"), std::ios::trunc);
  if (!out) throw Error("save_checkpoint: cannot open " + with_suffix(stem, ".json").string());
  out << meta.dump(1) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& stem) {
  std::ifstream in(with_suffix(stem, ".json"));
  if (!in) throw Error("load_checkpoint: missing " + with_suffix(stem, ".json").string());
  Checkpoint ckpt;
  ckpt.metadata = json::parse(in);
  if (ckpt.metadata.at("format") != "isr-checkpoint/1") throw Error("load_checkpoint: unsupported format");

  EncoderConfig cfg;
  const auto& arch = ckpt.metadata.at("architecture");
  cfg.input_dim = arch.at("input_dim").get<int>();
  cfg.hidden = arch.at("hidden").get<std::vector<int>>();
  cfg.output_dim = arch.at("output_dim").get<int>();
  Rng scratch(0);
  ckpt.encoder = Encoder(cfg, scratch);

  const auto& o = ckpt.metadata.at("optimizer");
  AdamWConfig opt;
  opt.learning_rate = o.at("learning_rate").get<double>();
  opt.beta1 = o.at("beta1").get<double>();
  opt.beta2 = o.at("beta2").get<double>();
  opt.epsilon = o.at("epsilon").get<double>();
  opt.weight_decay = o.at("weight_decay").get<double>();
  opt.total_steps = o.at("total_steps").get<long>();
  ckpt.optimizer = AdamW(opt, ckpt.encoder.parameters());
  ckpt.optimizer.set_step_count(ckpt.metadata.at("step").get<long>());

  std::ifstream bin(with_suffix(stem, ".bin"), std::ios::binary);
  if (!bin) throw Error("load_checkpoint: missing " + with_suffix(stem, ".bin").string());
  for (auto& p : ckpt.encoder.parameters()) read_f64(bin, p);
  for (auto& m : ckpt.optimizer.first_moments()) read_f64(bin, m);
  for (auto& v : ckpt.optimizer.second_moments()) read_f64(bin, v);
  if (!bin) throw Error("load_checkpoint: binary file truncated");
  return ckpt;
}

}  // namespace isr
