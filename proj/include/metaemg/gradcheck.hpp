#pragma once
// Gradient oracles: an extended-precision reference network, finite
// differences, and the check suites behind `metaemg_cli gradcheck`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "metaemg/meta.hpp"
#include "metaemg/nn.hpp"
#include "metaemg/rng.hpp"

namespace metaemg::gradcheck {

/// |a - b| / max(|a|, |b|), with an absolute floor so that entries which are
/// zero up to rounding on both sides do not divide by zero.
inline double rel_error(double a, double b, double floor = 1e-10) {
  const double scale = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / scale;
}

inline double max_rel_error(const ParamVector& a, const ParamVector& b, std::span<const std::size_t> coords,
                            double floor = 1e-10) {
  double worst = 0.0;
  for (std::size_t j : coords) worst = std::max(worst, rel_error(a[j], b[j], floor));
  return worst;
}

inline std::vector<std::size_t> all_coords(std::size_t n) {
  std::vector<std::size_t> c(n);
  std::iota(c.begin(), c.end(), std::size_t{0});
  return c;
}

inline std::vector<std::size_t> sample_coords(std::size_t n, std::size_t k, Rng rng) {
  std::vector<std::size_t> idx = all_coords(n);
  rng.shuffle(std::span(idx));
  idx.resize(std::min(k, n));
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Random batch with inputs uniform in [-1, 1] and labels spread over classes.
inline Batch random_batch(std::size_t dim, std::size_t n, Rng rng) {
  Batch b;
  b.inputs.resize(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < b.inputs.size(); ++i) b.inputs.data()[i] = rng.uniform(-1.0, 1.0);
  for (std::size_t j = 0; j < n; ++j) b.labels.push_back(static_cast<int>(rng.below(kIntents)));
  return b;
}

/// Perturbs every parameter by a draw from N(0, sd^2).
inline ModelParams jitter(ModelParams p, double sd, Rng rng) {
  for (std::size_t j = 0; j < p.size(); ++j) p[j] += rng.normal(0.0, sd);
  return p;
}

/// Naive loop-based MLP in extended precision, sharing only the flat parameter
/// layout with the library. Used as an independent oracle: its loss feeds
/// central differences whose rounding noise sits far below double precision.
struct ReferenceNet {
  using Real = long double;
  std::vector<std::size_t> sizes;
  bool relu = false;

  explicit ReferenceNet(const NetworkConfig& c) : sizes(c.layer_sizes), relu(c.activation == Activation::ReLU) {}

  std::size_t w_index(std::size_t l, std::size_t o, std::size_t i) const { return offset(l) + i * sizes[l + 1] + o; }
  std::size_t b_index(std::size_t l, std::size_t o) const { return offset(l) + sizes[l] * sizes[l + 1] + o; }
  std::size_t offset(std::size_t l) const {
    std::size_t off = 0;
    for (std::size_t k = 0; k < l; ++k) off += sizes[k] * sizes[k + 1] + sizes[k + 1];
    return off;
  }
  std::size_t count() const { return offset(sizes.size() - 1); }

  Real act(Real z) const { return relu ? std::max(z, Real(0)) : std::tanh(z); }
  Real slope(Real z) const {
    if (relu) return z > 0 ? 1 : 0;
    const Real t = std::tanh(z);
    return 1 - t * t;
  }

  /// Mean cross-entropy; fills `grad` (same layout) when non-null.
  Real loss(const std::vector<Real>& p, const Batch& b, std::vector<Real>* grad = nullptr) const {
    const std::size_t L = sizes.size() - 1;
    const auto B = static_cast<std::size_t>(b.inputs.cols());
    if (grad) grad->assign(p.size(), 0);
    Real total = 0;
    for (std::size_t s = 0; s < B; ++s) {
      std::vector<std::vector<Real>> a(L + 1), z(L + 1);
      a[0].resize(sizes[0]);
      for (std::size_t i = 0; i < sizes[0]; ++i) a[0][i] = b.inputs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s));
      for (std::size_t l = 0; l < L; ++l) {
        z[l + 1].assign(sizes[l + 1], 0);
        a[l + 1].assign(sizes[l + 1], 0);
        for (std::size_t o = 0; o < sizes[l + 1]; ++o) {
          Real acc = p[b_index(l, o)];
          for (std::size_t i = 0; i < sizes[l]; ++i) acc += p[w_index(l, o, i)] * a[l][i];
          z[l + 1][o] = acc;
          a[l + 1][o] = l + 1 < L ? act(acc) : acc;
        }
      }
      const auto& logits = a[L];
      const Real m = *std::max_element(logits.begin(), logits.end());
      Real se = 0;
      for (Real v : logits) se += std::exp(v - m);
      const auto label = static_cast<std::size_t>(b.labels[s]);
      total += m + std::log(se) - logits[label];
      if (!grad) continue;
      std::vector<Real> delta(sizes[L]);
      for (std::size_t o = 0; o < sizes[L]; ++o) delta[o] = (std::exp(logits[o] - m) / se - (o == label)) / Real(B);
      for (std::size_t l = L; l-- > 0;) {
        for (std::size_t o = 0; o < sizes[l + 1]; ++o) {
          (*grad)[b_index(l, o)] += delta[o];
          for (std::size_t i = 0; i < sizes[l]; ++i) (*grad)[w_index(l, o, i)] += delta[o] * a[l][i];
        }
        if (l == 0) break;
        std::vector<Real> prev(sizes[l], 0);
        for (std::size_t i = 0; i < sizes[l]; ++i) {
          Real acc = 0;
          for (std::size_t o = 0; o < sizes[l + 1]; ++o) acc += p[w_index(l, o, i)] * delta[o];
          prev[i] = acc * slope(z[l][i]);
        }
        delta = std::move(prev);
      }
    }
    return total / Real(B);
  }

  /// Query loss after `steps` plain gradient steps on the support loss.
  Real adapted_query_loss(std::vector<Real> p, const Batch& support, const Batch& query, Real alpha, int steps) const {
    std::vector<Real> g;
    for (int m = 0; m < steps; ++m) {
      loss(p, support, &g);
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= alpha * g[j];
    }
    return loss(p, query);
  }

  static std::vector<Real> widen(const ParamVector& v) {
    std::vector<Real> out(v.size());
    for (std::size_t j = 0; j < v.size(); ++j) out[j] = v[j];
    return out;
  }

  /// Central differences of `f` at `p` on `coords`, step h, in extended precision.
  template <typename F>
  static std::vector<double> central(const std::vector<Real>& p, F&& f, Real h, std::span<const std::size_t> coords) {
    std::vector<double> out;
    std::vector<Real> probe = p;
    for (std::size_t j : coords) {
      probe[j] = p[j] + h;
      const Real up = f(probe);
      probe[j] = p[j] - h;
      const Real down = f(probe);
      probe[j] = p[j];
      out.push_back(static_cast<double>((up - down) / (2 * h)));
    }
    return out;
  }
};


// ---------------------------------------------------------------------------
// Check suites
// ---------------------------------------------------------------------------

struct CheckResult {
  std::string name;
  double max_error = 0.0;
  double threshold = 0.0;
  double seconds = 0.0;
  /// Secondary figure, e.g. the same check with double-precision differences.
  double aux_error = -1.0;

  bool passed() const { return max_error < threshold; }
};

namespace detail {

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace detail

/// Analytic batch gradient vs central differences (h = 1e-5) on 20 tiny nets
/// of at most 200 parameters, every coordinate.
inline CheckResult tiny_gradient_check(int trials = 20) {
  const detail::Stopwatch clock;
  CheckResult r{"tiny-net gradient", 0.0, 1e-6};
  double worst_double = 0.0;
  Rng rng(2024);
  for (int trial = 0; trial < trials; ++trial) {
    const Activation act = trial % 2 == 0 ? Activation::Tanh : Activation::ReLU;
    const Network net(NetworkConfig{{6, 10, 6, 3}, act});
    const ModelParams p = jitter(net.init_params(rng.next_u64()), 0.3, rng.split(static_cast<std::uint64_t>(trial)));
    const Batch b = random_batch(6, 8, rng.split(100 + static_cast<std::uint64_t>(trial)));
    const GradientVector g = net.batch_gradient(p, b);
    const auto coords = all_coords(p.size());
    const ReferenceNet ref(net.config());
    const auto fd = ReferenceNet::central(
        ReferenceNet::widen(p), [&](const std::vector<long double>& q) { return ref.loss(q, b); }, 1e-5L, coords);
    for (std::size_t j : coords) r.max_error = std::max(r.max_error, rel_error(g[j], fd[j]));
    worst_double = std::max(worst_double, max_rel_error(g, fd_gradient(net, p, b, 1e-5), coords));
  }
  r.aux_error = worst_double;
  r.seconds = clock.seconds();
  return r;
}

/// 100 sampled coordinates of the full-size network, double-precision differences.
inline CheckResult full_gradient_check(std::size_t coords_n = 100) {
  const detail::Stopwatch clock;
  const Network net;
  const ModelParams p = net.init_params(77);
  const Batch b = random_batch(net.config().layer_sizes.front(), 16, Rng(78));
  const GradientVector g = net.batch_gradient(p, b);
  const auto coords = sample_coords(p.size(), coords_n, Rng(79));
  const GradientVector fd = fd_gradient(net, p, b, 1e-5, coords);
  CheckResult r{"full-net gradient", max_rel_error(g, fd, coords), 1e-5};
  r.seconds = clock.seconds();
  return r;
}

/// Second-order meta-gradient vs central differences of
/// theta -> L_q(inner_adapt(theta)) on tanh nets, M in {1, 2}.
inline CheckResult meta_gradient_check(int trials = 10, std::size_t coords_n = 50) {
  const detail::Stopwatch clock;
  CheckResult r{"meta-gradient", 0.0, 1e-5};
  double worst_double = 0.0;
  Rng rng(77);
  for (int trial = 0; trial < trials; ++trial) {
    const Network net(NetworkConfig{{6, 10, 6, 3}, Activation::Tanh});
    const auto t = static_cast<std::uint64_t>(trial);
    const ModelParams theta = jitter(net.init_params(rng.next_u64()), 0.3, rng.split(t));
    const Rng task_rng = rng.split(1000 + t);
    const TaskBatches task{random_batch(6, 7, task_rng.split("s")), random_batch(6, 9, task_rng.split("q"))};
    MetaConfig mc;
    mc.inner_steps = 1 + trial % 2;
    mc.alpha = 0.5;
    const GradientVector mg = meta_gradient(net, theta, task, mc);
    const auto coords = sample_coords(theta.size(), coords_n, rng.split(2000 + t));
    const ReferenceNet ref(net.config());
    const auto fd = ReferenceNet::central(
        ReferenceNet::widen(theta),
        [&](const std::vector<long double>& q) {
          return ref.adapted_query_loss(q, task.support, task.query, mc.alpha, mc.inner_steps);
        },
        1e-5L, coords);
    const GradientVector fd_double = central_difference(
        theta,
        [&](const ModelParams& q) {
          return net.batch_loss(inner_adapt(net, q, task.support, mc.alpha, mc.inner_steps), task.query);
        },
        1e-5, coords);
    for (std::size_t i = 0; i < coords.size(); ++i) r.max_error = std::max(r.max_error, rel_error(mg[coords[i]], fd[i]));
    worst_double = std::max(worst_double, max_rel_error(mg, fd_double, coords));
  }
  r.aux_error = worst_double;
  r.seconds = clock.seconds();
  return r;
}

/// M = 1: meta-gradient vs (I - alpha H_s) grad L_q(theta_hat) with an explicit
/// Hessian from central differences of the reference gradient, nets of at most
/// 60 parameters.
inline CheckResult closed_form_check(int trials = 5) {
  const detail::Stopwatch clock;
  CheckResult r{"M=1 closed form", 0.0, 1e-6};
  Rng rng(91);
  for (int trial = 0; trial < trials; ++trial) {
    const Activation act = trial % 2 == 0 ? Activation::Tanh : Activation::ReLU;
    const Network net(NetworkConfig{{4, 5, 3, 3}, act});
    const auto t = static_cast<std::uint64_t>(trial);
    const ModelParams theta = jitter(net.init_params(rng.next_u64()), 0.3, rng.split(t));
    const Rng task_rng = rng.split(50 + t);
    const TaskBatches task{random_batch(4, 7, task_rng.split("s")), random_batch(4, 9, task_rng.split("q"))};
    MetaConfig mc;
    mc.inner_steps = 1;
    mc.alpha = 0.4;
    const GradientVector mg = meta_gradient(net, theta, task, mc);

    const ReferenceNet ref(net.config());
    const std::size_t n = theta.size();
    const auto base = ReferenceNet::widen(theta);
    const long double h = 1e-5L;
    Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic> H(n, n);
    for (std::size_t j = 0; j < n; ++j) {
      auto up = base, down = base;
      up[j] += h;
      down[j] -= h;
      std::vector<long double> gu, gd;
      ref.loss(up, task.support, &gu);
      ref.loss(down, task.support, &gd);
      for (std::size_t i = 0; i < n; ++i)
        H(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = (gu[i] - gd[i]) / (2 * h);
    }
    std::vector<long double> gs, gq;
    ref.loss(base, task.support, &gs);
    auto adapted = base;
    for (std::size_t i = 0; i < n; ++i) adapted[i] -= mc.alpha * gs[i];
    ref.loss(adapted, task.query, &gq);
    for (std::size_t i = 0; i < n; ++i) {
      long double v = gq[i];
      for (std::size_t j = 0; j < n; ++j) v -= mc.alpha * H(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * gq[j];
      r.max_error = std::max(r.max_error, rel_error(mg[i], static_cast<double>(v)));
    }
  }
  r.seconds = clock.seconds();
  return r;
}

inline std::vector<CheckResult> run_all() {
  return {tiny_gradient_check(), full_gradient_check(), meta_gradient_check(), closed_form_check()};
}

}  // namespace metaemg::gradcheck
