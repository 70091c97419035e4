#pragma once

#include "bites/common.hpp"

#include <algorithm>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace bites {

/// Samples grouped by distinct observed time. The risk set of the group
/// starting at sorted position `start` is every sample from `start` onward,
/// so risk sets are nested by construction. Censored samples tied with an
/// event time belong to that event's risk set.
struct RiskSetIndex {
  struct Group {
    double time;
    Index start;              // first sorted position with this time
    Index end;                // one past the last
    Index events;             // number of events at this time
  };

  std::vector<Index> order;   // sample indices, ascending time
  std::vector<Group> groups;  // one per distinct time, ascending
  Index total_events = 0;

  std::span<const Index> at_risk(const Group& g) const {
    return {order.data() + g.start, order.size() - static_cast<std::size_t>(g.start)};
  }

  static RiskSetIndex build(const Eigen::Ref<const Vector>& times, std::span<const int> events) {
    if (static_cast<std::size_t>(times.size()) != events.size())
      throw DataError("risk sets: times and events differ in length");
    RiskSetIndex idx;
    const Index n = times.size();
    idx.order.resize(static_cast<std::size_t>(n));
    std::iota(idx.order.begin(), idx.order.end(), Index{0});
    std::stable_sort(idx.order.begin(), idx.order.end(), [&](Index a, Index b) { return times[a] < times[b]; });
    for (Index p = 0; p < n;) {
      Group g{times[idx.order[static_cast<std::size_t>(p)]], p, p, 0};
      while (g.end < n && times[idx.order[static_cast<std::size_t>(g.end)]] == g.time) {
        g.events += events[static_cast<std::size_t>(idx.order[static_cast<std::size_t>(g.end)])] ? 1 : 0;
        ++g.end;
      }
      idx.total_events += g.events;
      idx.groups.push_back(g);
      p = g.end;
    }
    return idx;
  }

  /// log sum_{j in R_k} exp(s_j) for every group, via one reverse pass.
  std::vector<double> log_risk_sums(const Eigen::Ref<const Vector>& scores) const {
    std::vector<double> out(groups.size());
    double acc = -std::numeric_limits<double>::infinity();
    for (std::size_t k = groups.size(); k-- > 0;) {
      const auto& g = groups[k];
      for (Index p = g.start; p < g.end; ++p) {
        const double s = scores[order[static_cast<std::size_t>(p)]];
        const double hi = std::max(acc, s);
        acc = hi + std::log(std::exp(acc - hi) + std::exp(s - hi));
      }
      out[k] = acc;
    }
    return out;
  }
};

namespace detail {

inline void check_cox_inputs(const Eigen::Ref<const Vector>& scores, const Eigen::Ref<const Vector>& times,
                             std::span<const int> events) {
  if (scores.size() != times.size() || static_cast<std::size_t>(scores.size()) != events.size())
    throw DataError("cox: scores, times and events differ in length");
  if (!scores.allFinite()) throw NumericalError("cox: non-finite score");
}

}  // namespace detail

/// Breslow-tied negative Cox partial log-likelihood divided by the number
/// of events. Throws DataError when there is no event.
inline double cox_nll(const Eigen::Ref<const Vector>& scores, const Eigen::Ref<const Vector>& times,
                      std::span<const int> events) {
  detail::check_cox_inputs(scores, times, events);
  const auto idx = RiskSetIndex::build(times, events);
  if (idx.total_events == 0) throw DataError("cox: loss undefined without events");
  const auto log_r = idx.log_risk_sums(scores);
  CompensatedSum sum;
  for (std::size_t k = 0; k < idx.groups.size(); ++k) {
    const auto& g = idx.groups[k];
    if (g.events == 0) continue;
    sum.add(static_cast<double>(g.events) * log_r[k]);
    for (Index p = g.start; p < g.end; ++p) {
      const Index i = idx.order[static_cast<std::size_t>(p)];
      if (events[static_cast<std::size_t>(i)]) sum.add(-scores[i]);
    }
  }
  return sum.value() / static_cast<double>(idx.total_events);
}

/// Gradient of cox_nll with respect to the scores.
inline Vector cox_nll_grad(const Eigen::Ref<const Vector>& scores, const Eigen::Ref<const Vector>& times,
                           std::span<const int> events) {
  detail::check_cox_inputs(scores, times, events);
  const auto idx = RiskSetIndex::build(times, events);
  if (idx.total_events == 0) throw DataError("cox: loss undefined without events");
  const auto log_r = idx.log_risk_sums(scores);
  Vector grad(scores.size());
  // log of sum over event groups k with t_k <= y_j of d_k / R_k, accumulated forward.
  double log_a = -std::numeric_limits<double>::infinity();
  const double inv_d = 1.0 / static_cast<double>(idx.total_events);
  for (std::size_t k = 0; k < idx.groups.size(); ++k) {
    const auto& g = idx.groups[k];
    if (g.events > 0) {
      const double term = std::log(static_cast<double>(g.events)) - log_r[k];
      const double hi = std::max(log_a, term);
      log_a = hi + std::log(std::exp(log_a - hi) + std::exp(term - hi));
    }
    for (Index p = g.start; p < g.end; ++p) {
      const Index j = idx.order[static_cast<std::size_t>(p)];
      const double w = std::exp(scores[j] + log_a);
      grad[j] = (w - (events[static_cast<std::size_t>(j)] ? 1.0 : 0.0)) * inv_d;
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Baseline hazard and survival curves

/// Cumulative baseline hazard on the distinct event times, ascending.
struct BaselineHazard {
  Vector time;
  Vector cumulative;

  /// Right-continuous step lookup; zero before the first event time.
  double at(double t) const {
    const auto* begin = time.data();
    const auto* end = begin + time.size();
    const auto* it = std::upper_bound(begin, end, t);
    if (it == begin) return 0.0;
    return cumulative[it - begin - 1];
  }
};

/// Breslow estimator: increments d_k / sum_{j in R_k} exp(s_j) at each
/// distinct event time, tied events aggregated.
inline BaselineHazard breslow_baseline(const Eigen::Ref<const Vector>& scores, const Eigen::Ref<const Vector>& times,
                                       std::span<const int> events) {
  detail::check_cox_inputs(scores, times, events);
  const auto idx = RiskSetIndex::build(times, events);
  if (idx.total_events == 0) throw DataError("breslow: no events");
  const auto log_r = idx.log_risk_sums(scores);
  std::vector<double> t, h;
  double acc = 0.0;
  for (std::size_t k = 0; k < idx.groups.size(); ++k) {
    const auto& g = idx.groups[k];
    if (g.events == 0) continue;
    acc += std::exp(std::log(static_cast<double>(g.events)) - log_r[k]);
    t.push_back(g.time);
    h.push_back(acc);
  }
  BaselineHazard out;
  out.time = Eigen::Map<Vector>(t.data(), static_cast<Index>(t.size()));
  out.cumulative = Eigen::Map<Vector>(h.data(), static_cast<Index>(h.size()));
  return out;
}

/// Survival probabilities on a time grid starting at S(0) = 1.
struct SurvivalCurve {
  Vector time;
  Vector survival;

  /// Right-continuous step lookup: value at the largest grid time <= t.
  double at(double t) const {
    const auto* begin = time.data();
    const auto* end = begin + time.size();
    const auto* it = std::upper_bound(begin, end, t);
    if (it == begin) return 1.0;
    return survival[it - begin - 1];
  }

  bool valid(double tol = 0.0) const {
    if (time.size() != survival.size() || time.size() == 0) return false;
    if (std::abs(survival[0] - 1.0) > tol) return false;
    for (Index k = 0; k < survival.size(); ++k) {
      if (!(survival[k] >= 0.0 && survival[k] <= 1.0)) return false;
      if (k > 0 && (survival[k] > survival[k - 1] + tol || time[k] < time[k - 1])) return false;
    }
    return true;
  }
};

/// S(t) = exp(-Lambda0(t) * exp(score)) on the hazard grid, with S(0) = 1 prepended.
inline SurvivalCurve survival_curve(const BaselineHazard& hazard, double score) {
  if (!std::isfinite(score)) throw NumericalError("survival_curve: non-finite score");
  SurvivalCurve c;
  const Index g = hazard.time.size();
  c.time.resize(g + 1);
  c.survival.resize(g + 1);
  c.time[0] = 0.0;
  c.survival[0] = 1.0;
  const double rate = std::exp(score);
  for (Index k = 0; k < g; ++k) {
    c.time[k + 1] = hazard.time[k];
    c.survival[k + 1] = std::exp(-hazard.cumulative[k] * rate);
  }
  return c;
}

// ---------------------------------------------------------------------------
// Linear Cox model (T-learner baseline)

struct LinearCoxModel {
  Vector beta;

  Vector scores(const Matrix& x) const {
    if (x.cols() != beta.size()) throw DataError("linear cox: feature count mismatch");
    return x * beta;
  }
};

struct LinearCoxFitOptions {
  double ridge = 0.0;
  double lasso = 0.0;
  int max_iter = 10000;
  double tol = 1e-7;
};

struct LinearCoxFit {
  LinearCoxModel model;
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Minimizes cox_nll(X beta) + ridge |beta|^2 + lasso |beta|_1 by proximal
/// gradient descent with backtracking. Convergence is declared when the
/// norm of the proximal gradient mapping drops below tol.
inline LinearCoxFit fit_linear_cox(const Matrix& x, const Eigen::Ref<const Vector>& times, std::span<const int> events,
                                   const LinearCoxFitOptions& opt = {}) {
  if (opt.ridge < 0.0 || opt.lasso < 0.0) throw ConfigError("linear cox: penalties must be >= 0");
  const Index d = x.cols();
  const auto idx = RiskSetIndex::build(times, events);
  if (idx.total_events == 0) throw DataError("linear cox: no events in slice");

  auto smooth = [&](const Vector& b) {
    const Vector s = x * b;
    return cox_nll(s, times, events) + opt.ridge * b.squaredNorm();
  };
  auto smooth_grad = [&](const Vector& b) -> Vector {
    const Vector s = x * b;
    return x.transpose() * cox_nll_grad(s, times, events) + 2.0 * opt.ridge * b;
  };
  auto prox = [&](const Vector& v, double step) -> Vector {
    const double thr = step * opt.lasso;
    return v.unaryExpr([thr](double z) { return std::copysign(std::max(std::abs(z) - thr, 0.0), z); });
  };

  LinearCoxFit fit;
  Vector beta = Vector::Zero(d);
  double f = smooth(beta);
  double step = 1.0;
  for (int it = 1; it <= opt.max_iter; ++it) {
    fit.iterations = it;
    const Vector g = smooth_grad(beta);
    Vector next;
    double f_next = 0.0;
    for (int bt = 0;; ++bt) {
      next = prox(beta - step * g, step);
      const Vector diff = next - beta;
      f_next = smooth(next);
      if (!std::isfinite(f_next) && bt > 60) throw NumericalError("linear cox: non-finite loss");
      if (std::isfinite(f_next) && f_next <= f + g.dot(diff) + diff.squaredNorm() / (2.0 * step) + 1e-15) break;
      step *= 0.5;
      if (step < 1e-20) throw NumericalError("linear cox: step size underflow");
    }
    const double mapping_norm = (beta - next).norm() / step;
    beta = std::move(next);
    f = f_next;
    if (mapping_norm < opt.tol) {
      fit.converged = true;
      break;
    }
    step *= 1.5;
  }
  if (!beta.allFinite()) throw NumericalError("linear cox: non-finite coefficients");
  fit.model.beta = beta;
  fit.objective = f + opt.lasso * beta.lpNorm<1>();
  return fit;
}

}  // namespace bites
