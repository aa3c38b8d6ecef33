#include "isr/verify.hpp"

#include "isr/encoder.hpp"
#include "isr/eval.hpp"
#include "isr/losses.hpp"
#include "isr/matching.hpp"
#include "isr/memory_queue.hpp"
#include "isr/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

namespace isr {

namespace {

class Tracker {
 public:
  Tracker(std::string name, double tolerance) : start_(std::chrono::steady_clock::now()) {
    result_.name = std::move(name);
    result_.tolerance = tolerance;
  }

  // Records one check of `error` against the suite tolerance (or `tolerance`).
  void check(double error, const std::string& what, double tolerance = -1.0) {
    const double limit = tolerance < 0.0 ? result_.tolerance : tolerance;
    ++result_.cases;
    if (tolerance < 0.0) result_.worst_error = std::max(result_.worst_error, error);
    if (!(error <= limit)) fail(what + ": error " + format(error) + " > " + format(limit));
  }

  void require(bool ok, const std::string& what) {
    ++result_.cases;
    if (!ok) fail(what);
  }

  SuiteResult finish() {
    result_.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    result_.passed = result_.failures == 0;
    return result_;
  }

 private:
  static std::string format(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
  }
  void fail(const std::string& message) {
    if (result_.failures++ == 0) result_.detail = message;
  }

  SuiteResult result_;
  std::chrono::steady_clock::time_point start_;
};

int pick(Rng& rng, int lo, int hi) {
  return lo + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(hi - lo + 1)));
}

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = scale * rng.normal();
  }
  return m;
}

Matrix unit_columns(Eigen::Index d, Eigen::Index m, Rng& rng) {
  Matrix raw = gaussian(d, m, rng);
  for (Eigen::Index c = 0; c < m; ++c) raw.col(c) /= raw.col(c).norm();
  return raw;
}

std::vector<int> random_injection(int m, int n, Rng& rng) {
  std::vector<int> cols(static_cast<std::size_t>(n));
  std::iota(cols.begin(), cols.end(), 0);
  rng.shuffle(cols);
  cols.resize(static_cast<std::size_t>(m));
  return cols;
}

Matrix central_difference(const std::function<double(const Matrix&)>& f, const Matrix& at, double h) {
  Matrix grad(at.rows(), at.cols());
  Matrix probe = at;
  for (Eigen::Index i = 0; i < at.size(); ++i) {
    const double base = at.data()[i];
    probe.data()[i] = base + h;
    const double up = f(probe);
    probe.data()[i] = base - h;
    const double down = f(probe);
    probe.data()[i] = base;
    grad.data()[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double relative_error(const Matrix& analytic, const Matrix& numeric) {
  const double scale = std::max({analytic.norm(), numeric.norm(), 1e-10});
  return (analytic - numeric).norm() / scale;
}

// Softmax probability of the matched column, without the max shift.
std::vector<double> plain_reliability(const Matrix& s, const std::vector<int>& matched, double tau) {
  std::vector<double> p;
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    double total = 0.0;
    for (Eigen::Index j = 0; j < s.cols(); ++j) total += std::exp(s(i, j) / tau);
    p.push_back(std::exp(s(i, matched[static_cast<std::size_t>(i)]) / tau) / total);
  }
  return p;
}

}  // namespace

std::vector<std::string> verify_suite_names() { return {"matching", "gradients", "curves", "queue", "metrics"}; }

SuiteResult verify_matching(const VerifyOptions& options) {
  Tracker t("matching", 1e-9);
  Rng rng(derive_seed(options.seed, "verify/matching"));
  const int instances = options.instances > 0 ? options.instances : 1000;
  for (int k = 0; k < instances; ++k) {
    const int n = pick(rng, 1, 7);
    const int m = pick(rng, 1, n);
    Matrix cost(m, n);
    for (Eigen::Index c = 0; c < n; ++c) {
      for (Eigen::Index r = 0; r < m; ++r) cost(r, c) = rng.uniform(0.0, 2.0);
    }
    const Matching fast = solve_assignment(cost);
    const Matching slow = brute_force_assignment(cost);
    t.check(std::abs(fast.total_cost - slow.total_cost), "instance " + std::to_string(k));
  }
  return t.finish();
}

SuiteResult verify_gradients(const VerifyOptions& options) {
  // Losses are held to 1e-5; the encoder pipeline to 1e-4.
  Tracker t("gradients", 1e-5);
  Rng rng(derive_seed(options.seed, "verify/gradients"));
  const int configs = options.instances > 0 ? options.instances : 500;
  const double h = 1e-6;
  for (int k = 0; k < configs; ++k) {
    const std::string tag = " (config " + std::to_string(k) + ")";
    const int n = pick(rng, 1, 7);
    const int m = pick(rng, 1, n);
    const double tau = rng.uniform(0.1, 1.0);
    const double gamma = rng.uniform(0.0, 8.0);
    const Matrix s0 = gaussian(m, n, rng, 0.5);
    const std::vector<int> matched = random_injection(m, n, rng);
    const AssociationMatrix pi(matched, n);
    const ReliabilityReport report = reliability_from_similarities(s0, pi, tau);

    std::vector<double> frozen;
    for (double p : report.reliability) frozen.push_back(std::pow(p, gamma));
    auto stopgrad = [&](const Matrix& s) {
      const auto p = plain_reliability(s, matched, tau);
      double total = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) total -= frozen[i] * std::log(p[i]);
      return total;
    };
    auto kept = [&](const Matrix& s) {
      double total = 0.0;
      for (double p : plain_reliability(s, matched, tau)) total -= std::pow(p, gamma) * std::log(p);
      return total;
    };
    auto focal = [&](const Matrix& s) {
      double total = 0.0;
      for (double p : plain_reliability(s, matched, tau)) total -= std::pow(1.0 - p, gamma) * std::log(p);
      return total;
    };
    t.check(relative_error(similarity_gradient(report, rc_loss(report, gamma).grad_logp, tau),
                           central_difference(stopgrad, s0, h)),
            "stop-gradient similarity gradient" + tag);
    t.check(relative_error(similarity_gradient(report, rc_loss_kept_gradient(report, gamma).grad_logp, tau),
                           central_difference(kept, s0, h)),
            "kept-gradient similarity gradient" + tag);
    t.check(relative_error(similarity_gradient(report, focal_loss(report, gamma).grad_logp, tau),
                           central_difference(focal, s0, h)),
            "focal similarity gradient" + tag);

    // Queue term over anchors and their negatives.
    const int d = pick(rng, 2, 6);
    const int anchors = pick(rng, 1, 4);
    const Matrix a0 = unit_columns(d, anchors, rng);
    std::vector<Matrix> negatives;
    for (int i = 0; i < anchors; ++i) negatives.push_back(unit_columns(d, pick(rng, 0, 4), rng));
    const LossOutput q = queue_loss(FeatureMatrix(a0), negatives);
    t.check(relative_error(q.grad_x, central_difference(
                                         [&](const Matrix& a) {
                                           return queue_loss(FeatureMatrix::trusted(a), negatives).value;
                                         },
                                         a0, h)),
            "queue anchor gradient" + tag);
    for (int i = 0; i < anchors; ++i) {
      if (negatives[static_cast<std::size_t>(i)].cols() == 0) continue;
      auto with_block = [&](const Matrix& block) {
        auto copy = negatives;
        copy[static_cast<std::size_t>(i)] = block;
        return queue_loss(FeatureMatrix::trusted(a0), copy).value;
      };
      t.check(relative_error(q.grad_negatives[static_cast<std::size_t>(i)],
                             central_difference(with_block, negatives[static_cast<std::size_t>(i)], h)),
              "queue negative gradient" + tag);
    }

    // Full pipeline: encoder, super-frame contrastive term with frozen alpha and
    // modulation factors, and the queue term with fixed negatives.
    const int in_dim = pick(rng, 2, 6);
    const int out_dim = pick(rng, 2, 5);
    Rng init(derive_seed(options.seed, "verify/encoder/" + std::to_string(k)));
    const Encoder encoder({in_dim, {pick(rng, 2, 8)}, out_dim}, init);
    const int nx = pick(rng, 1, 5);
    const int ny = pick(rng, 1, 5);
    const Matrix ox = gaussian(in_dim, nx, rng);
    const Matrix oy = gaussian(in_dim, ny, rng);
    AnchorGroup from_x;
    AnchorGroup from_y;
    from_x.anchors = random_injection(pick(rng, 0, std::min(nx, ny)), nx, rng);
    from_x.matched = random_injection(static_cast<int>(from_x.anchors.size()), ny, rng);
    from_y.anchors = random_injection(pick(rng, 0, std::min(nx, ny)), ny, rng);
    from_y.matched = random_injection(static_cast<int>(from_y.anchors.size()), nx, rng);
    LossConfig cfg;
    cfg.tau = tau;
    cfg.gamma = gamma;
    cfg.lambda = rng.uniform(0.0, 5.0);
    std::vector<Matrix> fixed_negatives;
    for (int i = 0; i < nx + ny; ++i) fixed_negatives.push_back(unit_columns(out_dim, pick(rng, 0, 3), rng));

    Encoder::Cache cache_x;
    Encoder::Cache cache_y;
    const FeatureMatrix fx = encoder.forward(ox, &cache_x);
    const FeatureMatrix fy = encoder.forward(oy, &cache_y);
    const SuperFrameLoss rc = super_frame_loss(fx, fy, from_x, from_y, cfg);
    Matrix stacked(out_dim, nx + ny);
    stacked << fx.matrix(), fy.matrix();
    const LossOutput qo = queue_loss(FeatureMatrix::trusted(stacked), fixed_negatives);
    const auto gx = encoder.backward(cache_x, rc.grad_x + cfg.lambda * qo.grad_x.leftCols(nx));
    const auto gy = encoder.backward(cache_y, rc.grad_y + cfg.lambda * qo.grad_x.rightCols(ny));
    // Frozen per-anchor factors in the order super_frame_loss reports them.
    std::vector<double> factor;
    for (double p : rc.reliabilities) factor.push_back(std::pow(p, gamma));
    const double count = std::max<double>(1.0, static_cast<double>(rc.reliabilities.size()));
    auto objective = [&](const Encoder& e) {
      const Matrix x = e.forward(ox).matrix();
      const Matrix y = e.forward(oy).matrix();
      double total = 0.0;
      std::size_t slot = 0;
      auto direction = [&](const Matrix& a, const Matrix& b, const AnchorGroup& g) {
        if (g.anchors.empty()) return;
        Matrix s(static_cast<Eigen::Index>(g.anchors.size()), b.cols());
        for (std::size_t i = 0; i < g.anchors.size(); ++i) s.row(static_cast<Eigen::Index>(i)) = a.col(g.anchors[i]).transpose() * b;
        for (double p : plain_reliability(s, g.matched, tau)) total -= factor[slot++] * std::log(p);
      };
      direction(x, y, from_x);
      direction(y, x, from_y);
      Matrix all(out_dim, nx + ny);
      all << x, y;
      return rc.alpha * total / count + cfg.lambda * queue_loss(FeatureMatrix::trusted(all), fixed_negatives).value;
    };
    for (std::size_t p = 0; p < gx.size(); ++p) {
      Matrix numeric(gx[p].rows(), gx[p].cols());
      for (Eigen::Index i = 0; i < numeric.size(); ++i) {
        Encoder plus = encoder;
        Encoder minus = encoder;
        plus.parameters()[p].data()[i] += h;
        minus.parameters()[p].data()[i] -= h;
        numeric.data()[i] = (objective(plus) - objective(minus)) / (2.0 * h);
      }
      t.check(relative_error(gx[p] + gy[p], numeric), "encoder pipeline block " + std::to_string(p) + tag, 1e-4);
    }
  }
  return t.finish();
}

SuiteResult verify_curves(const VerifyOptions& options) {
  Tracker t("curves", 1e-9);
  const std::vector<double> gammas{0.0, 2.0, 4.0, 6.0, 8.0};
  for (double gamma : gammas) {
    for (int k = 1; k <= 1000; ++k) {
      const double p = k / 1000.0;
      const double slope = std::abs(rc_loss(std::vector<double>{p}, gamma).grad_p[0]);
      const double expected = std::pow(p, gamma - 1.0);
      t.check(std::abs(slope - expected) / std::max(1.0, expected), "stop-gradient slope at p=" + std::to_string(p));
    }
    if (gamma == 0.0) continue;
    // Bisection for the interior zero of the kept-gradient derivative.
    auto derivative = [&](double p) { return rc_loss_kept_gradient(std::vector<double>{p}, gamma).grad_p[0]; };
    double lo = 1e-6;
    double hi = 1.0 - 1e-12;
    t.require(derivative(lo) > 0.0 && derivative(hi) < 0.0, "kept-gradient derivative changes sign");
    for (int it = 0; it < 200 && hi - lo > 1e-15; ++it) {
      const double mid = 0.5 * (lo + hi);
      (derivative(mid) > 0.0 ? lo : hi) = mid;
    }
    t.check(std::abs(0.5 * (lo + hi) - std::exp(-1.0 / gamma)), "slump root for gamma " + std::to_string(gamma),
            1e-6);
  }
  Rng rng(derive_seed(options.seed, "verify/curves"));
  for (int k = 0; k < 500; ++k) {
    const int m = pick(rng, 1, 40);
    std::vector<double> p(static_cast<std::size_t>(m));
    for (double& v : p) v = std::exp(-rng.uniform(0.0, 8.0));
    const double gamma = rng.uniform(0.0, 10.0);
    const auto l0 = rc_loss(p, 0.0).values;
    const double mean0 = std::accumulate(l0.begin(), l0.end(), 0.0) / m;
    const BatchScale scaled = rc_batch_loss(rc_loss(p, gamma).values, l0);
    t.check(std::abs(scaled.loss - mean0) / std::max(1.0, mean0), "alpha-scaled batch loss");
  }
  if (options.curves_csv) write_curves_csv(*options.curves_csv, gammas);
  return t.finish();
}

SuiteResult verify_queue(const VerifyOptions& options) {
  Tracker t("queue", 0.0);
  Rng rng(derive_seed(options.seed, "verify/queue"));
  const int instances = options.instances > 0 ? options.instances : 200;
  for (int k = 0; k < instances; ++k) {
    const int capacity = pick(rng, 1, 500);
    const int d = pick(rng, 2, 8);
    NegativeQueue queue(capacity, d);
    const int total = pick(rng, 0, capacity + 100);
    std::vector<int> videos;
    for (int i = 0; i < total; ++i) videos.push_back(pick(rng, 0, 9));
    queue.enqueue(unit_columns(d, total, rng), videos);
    const auto stored = queue.entries();
    t.require(static_cast<int>(stored.size()) == std::min(total, capacity), "queue size");
    const Vector anchor = unit_columns(d, 1, rng).col(0);
    const int video = pick(rng, 0, 9);
    const int want = pick(rng, 1, 30);
    for (auto mode : {NegativeSelection::most_similar, NegativeSelection::most_dissimilar}) {
      std::vector<std::size_t> eligible;
      for (std::size_t e = 0; e < stored.size(); ++e) {
        if (stored[e].video_id != video) eligible.push_back(e);
      }
      std::stable_sort(eligible.begin(), eligible.end(), [&](std::size_t a, std::size_t b) {
        const double sa = stored[a].embedding.dot(anchor);
        const double sb = stored[b].embedding.dot(anchor);
        return mode == NegativeSelection::most_similar ? sa > sb : sa < sb;
      });
      eligible.resize(std::min(eligible.size(), static_cast<std::size_t>(want)));
      const auto got = queue.select_negatives(anchor, video, want, mode);
      bool same = got.insertion_indices.size() == eligible.size();
      for (std::size_t r = 0; same && r < eligible.size(); ++r) {
        same = got.insertion_indices[r] == stored[eligible[r]].insertion_index;
      }
      t.require(same, "selection differs from full sort in instance " + std::to_string(k));
      t.require(got.shortfall == (eligible.size() < static_cast<std::size_t>(want)), "shortfall flag");
    }
  }
  return t.finish();
}

SuiteResult verify_metrics(const VerifyOptions& options) {
  Tracker t("metrics", 1e-12);
  Rng rng(derive_seed(options.seed, "verify/metrics"));
  const int instances = options.instances > 0 ? options.instances : 500;
  for (int k = 0; k < instances; ++k) {
    const int d = pick(rng, 2, 5);
    const int gsize = pick(rng, 1, 8);
    const int qsize = pick(rng, 1, 6);
    const int labels = pick(rng, 1, 4);
    Matrix gallery = unit_columns(d, gsize, rng);
    if (gsize > 1 && k % 2 == 0) gallery.col(gsize - 1) = gallery.col(0);
    const Matrix queries = unit_columns(d, qsize, rng);
    std::vector<int> gids;
    std::vector<int> qids;
    for (int i = 0; i < gsize; ++i) gids.push_back(pick(rng, 0, labels - 1));
    for (int i = 0; i < qsize; ++i) qids.push_back(pick(rng, 0, labels - 1));
    const EvalReport report = evaluate_embeddings(queries, qids, gallery, gids);
    t.require(report.rank_1 <= report.rank_5 && report.rank_5 <= report.rank_10, "CMC is monotone in k");

    // Enumerate ranks: strictly better items, then equal items at lower index.
    const Matrix sims = gallery.transpose() * queries;
    double ap_sum = 0.0;
    int scored = 0;
    for (int q = 0; q < qsize; ++q) {
      const int id = qids[static_cast<std::size_t>(q)];
      std::vector<int> rank(static_cast<std::size_t>(gsize));
      for (int a = 0; a < gsize; ++a) {
        int better = 0;
        for (int b = 0; b < gsize; ++b) better += sims(b, q) > sims(a, q) || (sims(b, q) == sims(a, q) && b < a);
        rank[static_cast<std::size_t>(a)] = better + 1;
      }
      double ap = 0.0;
      int relevant = 0;
      for (int a = 0; a < gsize; ++a) {
        if (gids[static_cast<std::size_t>(a)] != id) continue;
        ++relevant;
        int above = 0;
        for (int b = 0; b < gsize; ++b) {
          above += gids[static_cast<std::size_t>(b)] == id && rank[static_cast<std::size_t>(b)] <= rank[static_cast<std::size_t>(a)];
        }
        ap += static_cast<double>(above) / rank[static_cast<std::size_t>(a)];
      }
      if (relevant == 0) continue;
      ap_sum += ap / relevant;
      ++scored;
    }
    t.require(report.num_queries == scored, "scored query count");
    if (scored > 0) t.check(std::abs(report.mean_ap - ap_sum / scored), "mAP instance " + std::to_string(k));
  }
  return t.finish();
}

SuiteResult run_verify_suite(const std::string& name, const VerifyOptions& options) {
  if (name == "matching") return verify_matching(options);
  if (name == "gradients") return verify_gradients(options);
  if (name == "curves") return verify_curves(options);
  if (name == "queue") return verify_queue(options);
  if (name == "metrics") return verify_metrics(options);
  throw InvalidConfigError("verify: unknown suite '" + name + "'");
}

void write_curves_csv(const std::filesystem::path& path, const std::vector<double>& gammas) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("write_curves_csv: cannot open " + path.string());
  out << "gamma,p,loss,grad_stopgrad,grad_kept\n";
  char buf[160];
  for (double gamma : gammas) {
    for (int k = 1; k <= 1000; ++k) {
      const std::vector<double> p{k / 1000.0};
      const AnchorLosses stop = rc_loss(p, gamma);
      const AnchorLosses kept = rc_loss_kept_gradient(p, gamma);
      std::snprintf(buf, sizeof buf, "%g,%.3f,%.17g,%.17g,%.17g\n", gamma, p[0], stop.values[0], stop.grad_p[0],
                    kept.grad_p[0]);
      out << buf;
    }
  }
}

}  // namespace isr
