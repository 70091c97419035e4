#pragma once

#include "bites/common.hpp"

#include <algorithm>
#include <numeric>
#include <optional>
#include <vector>

namespace bites {

/// Weighted empirical measure: one point per row.
struct PointCloud {
  Matrix points;
  Vector weights;

  static PointCloud uniform(Matrix pts) {
    PointCloud c;
    const Index m = pts.rows();
    c.points = std::move(pts);
    c.weights = Vector::Constant(m, 1.0 / static_cast<double>(m));
    return c;
  }

  Index size() const { return points.rows(); }
  Index dim() const { return points.cols(); }

  void validate() const {
    if (points.rows() < 1) throw DataError("point cloud: empty");
    if (weights.size() != points.rows()) throw DataError("point cloud: weight count mismatch");
    if (!points.allFinite() || !weights.allFinite()) throw NumericalError("point cloud: non-finite input");
    if ((weights.array() < 0.0).any()) throw DataError("point cloud: negative weight");
    if (std::abs(weights.sum() - 1.0) > 1e-9) throw DataError("point cloud: weights must sum to 1");
  }
};

struct SinkhornConfig {
  double p = 2.0;
  double epsilon = 0.1;
  int max_iter = 500;
  double tol = 1e-9;
  /// When in (0,1), anneal epsilon geometrically from the squared-diameter
  /// scale down to `epsilon`, one dual update per stage, before the fixed-
  /// epsilon iterations. 0 disables annealing.
  double scaling = 0.0;

  void validate() const {
    if (!(p >= 1.0)) throw ConfigError("sinkhorn: p must be >= 1");
    if (!(epsilon > 0.0)) throw ConfigError("sinkhorn: epsilon must be > 0");
    if (max_iter < 1) throw ConfigError("sinkhorn: max_iter must be positive");
    if (!(scaling >= 0.0 && scaling < 1.0)) throw ConfigError("sinkhorn: scaling must lie in [0, 1)");
  }
};

struct OtResult {
  double value = 0.0;
  Vector f;                         // source potential
  Vector g;                         // target potential
  std::optional<Matrix> coupling;
  bool converged = false;
  int iterations = 0;
  std::vector<double> residuals;    // max dual update per fixed-epsilon iteration
};

namespace detail {

inline double ground_cost(const Eigen::Ref<const Eigen::RowVectorXd>& x, const Eigen::Ref<const Eigen::RowVectorXd>& y,
                          double p) {
  const double sq = (x - y).squaredNorm();
  if (p == 2.0) return sq;
  return std::pow(std::sqrt(sq), p);
}

inline Matrix cost_matrix(const Matrix& x, const Matrix& y, double p) {
  Matrix c(x.rows(), y.rows());
  if (p == 2.0) {
    // Direct differences rather than the |x|^2 + |y|^2 - 2xy expansion: the
    // expansion loses the exact zero diagonal that the debiasing relies on.
    for (Index i = 0; i < x.rows(); ++i)
      for (Index j = 0; j < y.rows(); ++j) c(i, j) = (x.row(i) - y.row(j)).squaredNorm();
  } else {
    for (Index i = 0; i < x.rows(); ++i)
      for (Index j = 0; j < y.rows(); ++j) c(i, j) = ground_cost(x.row(i), y.row(j), p);
  }
  return c;
}

/// Gradient of |d|^p with respect to d.
inline Eigen::RowVectorXd cost_gradient(const Eigen::Ref<const Eigen::RowVectorXd>& d, double p) {
  if (p == 2.0) return 2.0 * d;
  const double r = d.norm();
  if (r == 0.0) return Eigen::RowVectorXd::Zero(d.size());
  return p * std::pow(r, p - 2.0) * d;
}

/// out_i = -eps * log sum_j exp(log_w_j + (h_j - C_ij) / eps), rows of C contiguous.
class SoftMin {
 public:
  void operator()(const Matrix& cost, const Vector& log_w, const Vector& h, double eps, Vector& out) {
    const Index m = cost.rows();
    const Index n = cost.cols();
    row_.resize(n);
    const Eigen::ArrayXd shift = (log_w + h / eps).array();
    out.resize(m);
    for (Index i = 0; i < m; ++i) {
      row_ = shift - cost.row(i).transpose().array() / eps;
      const double mx = row_.maxCoeff();
      out[i] = -eps * (mx + std::log((row_ - mx).exp().sum()));
    }
  }

 private:
  Eigen::ArrayXd row_;
};

inline double annealing_start(const Matrix& x, const Matrix& y, double p) {
  const Index k = x.cols();
  double diam2 = 0.0;
  for (Index j = 0; j < k; ++j) {
    const double lo = std::min(x.col(j).minCoeff(), y.col(j).minCoeff());
    const double hi = std::max(x.col(j).maxCoeff(), y.col(j).maxCoeff());
    diam2 += (hi - lo) * (hi - lo);
  }
  return std::pow(std::sqrt(diam2), p);
}

inline std::vector<double> epsilon_schedule(const Matrix& x, const Matrix& y, const SinkhornConfig& cfg) {
  std::vector<double> eps;
  if (cfg.scaling > 0.0) {
    for (double e = annealing_start(x, y, cfg.p); e > cfg.epsilon; e *= cfg.scaling) eps.push_back(e);
  }
  return eps;
}

inline OtResult finish(const Vector& wa, const Vector& wb, Vector f, Vector g, const Matrix& cost, double eps,
                       bool with_coupling) {
  OtResult r;
  r.value = wa.dot(f) + wb.dot(g);
  if (with_coupling) {
    Matrix pi(cost.rows(), cost.cols());
    for (Index i = 0; i < cost.rows(); ++i)
      for (Index j = 0; j < cost.cols(); ++j)
        pi(i, j) = wa[i] * wb[j] * std::exp((f[i] + g[j] - cost(i, j)) / eps);
    r.coupling = std::move(pi);
  }
  r.f = std::move(f);
  r.g = std::move(g);
  return r;
}

inline void check_pair(const PointCloud& a, const PointCloud& b, const SinkhornConfig& cfg) {
  cfg.validate();
  a.validate();
  b.validate();
  if (a.dim() != b.dim()) throw DataError("sinkhorn: point dimension mismatch");
}

}  // namespace detail

/// Entropic OT between two clouds by alternating log-domain Sinkhorn updates.
/// The value is the dual objective <a,f> + <b,g> at the final potentials.
inline OtResult smoothed_ot(const PointCloud& a, const PointCloud& b, const SinkhornConfig& cfg,
                            bool with_coupling = false) {
  detail::check_pair(a, b, cfg);
  const Matrix cost = detail::cost_matrix(a.points, b.points, cfg.p);
  const Matrix cost_t = cost.transpose();
  const Vector log_a = a.weights.array().log();
  const Vector log_b = b.weights.array().log();
  detail::SoftMin softmin;
  Vector f = Vector::Zero(a.size());
  Vector g = Vector::Zero(b.size());
  Vector f_new, g_new;

  for (double eps : detail::epsilon_schedule(a.points, b.points, cfg)) {
    softmin(cost, log_b, g, eps, f);
    softmin(cost_t, log_a, f, eps, g);
  }

  OtResult r;
  bool converged = false;
  int it = 0;
  std::vector<double> residuals;
  while (it < cfg.max_iter) {
    ++it;
    softmin(cost, log_b, g, cfg.epsilon, f_new);
    softmin(cost_t, log_a, f_new, cfg.epsilon, g_new);
    const double res = std::max((f_new - f).lpNorm<Eigen::Infinity>(), (g_new - g).lpNorm<Eigen::Infinity>());
    f.swap(f_new);
    g.swap(g_new);
    residuals.push_back(res);
    if (!std::isfinite(res)) throw NumericalError("sinkhorn: non-finite dual update");
    if (res < cfg.tol) {
      converged = true;
      break;
    }
  }
  r = detail::finish(a.weights, b.weights, std::move(f), std::move(g), cost, cfg.epsilon, with_coupling);
  r.converged = converged;
  r.iterations = it;
  r.residuals = std::move(residuals);
  return r;
}

/// Entropic OT of a cloud with itself using symmetric (averaged) updates,
/// which converge much faster than alternating ones. Returns f = g.
inline OtResult smoothed_ot_self(const PointCloud& a, const SinkhornConfig& cfg, bool with_coupling = false) {
  cfg.validate();
  a.validate();
  const Matrix cost = detail::cost_matrix(a.points, a.points, cfg.p);
  const Vector log_a = a.weights.array().log();
  detail::SoftMin softmin;
  Vector f = Vector::Zero(a.size());
  Vector t;
  for (double eps : detail::epsilon_schedule(a.points, a.points, cfg)) {
    softmin(cost, log_a, f, eps, t);
    f = 0.5 * (f + t);
  }
  bool converged = false;
  int it = 0;
  std::vector<double> residuals;
  while (it < cfg.max_iter) {
    ++it;
    softmin(cost, log_a, f, cfg.epsilon, t);
    const Vector next = 0.5 * (f + t);
    const double res = (next - f).lpNorm<Eigen::Infinity>();
    f = next;
    residuals.push_back(res);
    if (!std::isfinite(res)) throw NumericalError("sinkhorn: non-finite dual update");
    if (res < cfg.tol) {
      converged = true;
      break;
    }
  }
  // One exact half-step so the returned pair satisfies the g-update optimality exactly.
  softmin(cost, log_a, f, cfg.epsilon, t);
  OtResult r = detail::finish(a.weights, a.weights, f, t, cost, cfg.epsilon, with_coupling);
  r.converged = converged;
  r.iterations = it;
  r.residuals = std::move(residuals);
  return r;
}

struct DivergenceResult {
  double value = 0.0;
  Matrix grad_a;      // d value / d a.points
  Matrix grad_b;      // d value / d b.points
  bool converged = false;
};

namespace detail {

/// Envelope gradient sum_j pi_ij * grad c(x_i - y_j) with pi built from potentials.
inline Matrix transport_gradient(const PointCloud& x, const PointCloud& y, const Vector& f, const Vector& g,
                                 double eps, double p) {
  if (p == 2.0) {
    const Matrix cost = cost_matrix(x.points, y.points, 2.0);
    Matrix pi = ((cost.colwise() - f).rowwise() - g.transpose()).array() * (-1.0 / eps);
    pi = pi.array().exp();
    pi = (pi.array().colwise() * x.weights.array()).rowwise() * y.weights.transpose().array();
    const Vector mass = pi.rowwise().sum();
    return 2.0 * (x.points.array().colwise() * mass.array()).matrix() - 2.0 * pi * y.points;
  }
  Matrix grad = Matrix::Zero(x.size(), x.dim());
  for (Index i = 0; i < x.size(); ++i) {
    for (Index j = 0; j < y.size(); ++j) {
      const Eigen::RowVectorXd d = x.points.row(i) - y.points.row(j);
      const double c = p == 2.0 ? d.squaredNorm() : std::pow(d.norm(), p);
      const double pi = x.weights[i] * y.weights[j] * std::exp((f[i] + g[j] - c) / eps);
      if (pi != 0.0) grad.row(i) += pi * cost_gradient(d, p);
    }
  }
  return grad;
}

}  // namespace detail

/// Debiased Sinkhorn divergence W(a,b) - W(a,a)/2 - W(b,b)/2 with gradients
/// for both clouds' point locations, from the converged dual potentials.
inline DivergenceResult sinkhorn_divergence_with_grad(const PointCloud& a, const PointCloud& b,
                                                      const SinkhornConfig& cfg, bool want_grad = true) {
  detail::check_pair(a, b, cfg);
  const OtResult ab = smoothed_ot(a, b, cfg);
  const OtResult aa = smoothed_ot_self(a, cfg);
  const OtResult bb = smoothed_ot_self(b, cfg);
  DivergenceResult out;
  out.value = ab.value - 0.5 * aa.value - 0.5 * bb.value;
  out.converged = ab.converged && aa.converged && bb.converged;
  if (want_grad) {
    // The self term depends on the cloud through both arguments, which
    // doubles its envelope gradient and cancels the 1/2.
    out.grad_a = detail::transport_gradient(a, b, ab.f, ab.g, cfg.epsilon, cfg.p) -
                 detail::transport_gradient(a, a, aa.f, aa.g, cfg.epsilon, cfg.p);
    out.grad_b = detail::transport_gradient(b, a, ab.g, ab.f, cfg.epsilon, cfg.p) -
                 detail::transport_gradient(b, b, bb.f, bb.g, cfg.epsilon, cfg.p);
  }
  return out;
}

inline double sinkhorn_divergence(const PointCloud& a, const PointCloud& b, const SinkhornConfig& cfg) {
  return sinkhorn_divergence_with_grad(a, b, cfg, false).value;
}

struct DivergenceGradient {
  Matrix grad;
  bool converged = false;
};

/// Gradient of the divergence with respect to a's points. A non-converged
/// solve still returns the gradient, with converged = false.
inline DivergenceGradient sinkhorn_divergence_grad(const PointCloud& a, const PointCloud& b,
                                                   const SinkhornConfig& cfg) {
  auto r = sinkhorn_divergence_with_grad(a, b, cfg, true);
  return {std::move(r.grad_a), r.converged};
}

/// Exact unregularized OT for equal-size uniform clouds by enumerating all
/// assignments (the OT optimum is attained at a permutation in that case).
inline double exhaustive_ot(const PointCloud& a, const PointCloud& b, double p) {
  a.validate();
  b.validate();
  if (a.dim() != b.dim()) throw DataError("exhaustive_ot: dimension mismatch");
  const Index m = a.size();
  if (m != b.size()) throw DataError("exhaustive_ot: clouds must have equal size");
  if (m > 8) throw DataError("exhaustive_ot: instance too large (m > 8)");
  const double w = 1.0 / static_cast<double>(m);
  for (Index i = 0; i < m; ++i)
    if (std::abs(a.weights[i] - w) > 1e-12 || std::abs(b.weights[i] - w) > 1e-12)
      throw DataError("exhaustive_ot: weights must be uniform");
  const Matrix cost = detail::cost_matrix(a.points, b.points, p);
  std::vector<Index> perm(static_cast<std::size_t>(m));
  std::iota(perm.begin(), perm.end(), Index{0});
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (Index i = 0; i < m; ++i) s += cost(i, perm[static_cast<std::size_t>(i)]);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best * w;
}

/// Energy-distance MMD with the -|x - y|^p kernel; the large-epsilon limit
/// of the Sinkhorn divergence.
inline double mmd_energy(const PointCloud& a, const PointCloud& b, double p) {
  a.validate();
  b.validate();
  if (a.dim() != b.dim()) throw DataError("mmd: dimension mismatch");
  auto expect = [p](const PointCloud& x, const PointCloud& y) {
    const Matrix c = detail::cost_matrix(x.points, y.points, p);
    return x.weights.dot(c * y.weights);
  };
  return expect(a, b) - 0.5 * expect(a, a) - 0.5 * expect(b, b);
}

}  // namespace bites
