#pragma once

#include "bites/common.hpp"
#include "bites/cox.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace bites {

struct Concordance {
  double value = 0.0;
  long comparable_pairs = 0;
};

namespace detail {

inline void check_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw DataError(std::string(what) + ": length mismatch");
}

/// Visits Harrell-comparable pairs (i, j): y_i < y_j with E_i = 1, or
/// y_i = y_j with exactly one event, where i is the event. `score(i, j)`
/// returns 1 when concordant, 0.5 on ties and 0 otherwise.
template <typename Score>
Concordance concordance(const Eigen::Ref<const Vector>& times, std::span<const int> events, Score&& score,
                        const char* what) {
  const Index n = times.size();
  double sum = 0.0;
  long pairs = 0;
  for (Index i = 0; i < n; ++i) {
    if (!events[static_cast<std::size_t>(i)]) continue;
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const bool later = times[i] < times[j];
      const bool tied = times[i] == times[j] && !events[static_cast<std::size_t>(j)];
      if (!later && !tied) continue;
      sum += score(i, j);
      ++pairs;
    }
  }
  if (pairs == 0) throw DataError(std::string(what) + ": no comparable pairs");
  return {sum / static_cast<double>(pairs), pairs};
}

}  // namespace detail

/// Higher risk should mean earlier event.
inline Concordance harrell_concordance(const Eigen::Ref<const Vector>& risk, const Eigen::Ref<const Vector>& times,
                                       std::span<const int> events) {
  detail::check_lengths(static_cast<std::size_t>(risk.size()), static_cast<std::size_t>(times.size()), "harrell_c");
  detail::check_lengths(events.size(), static_cast<std::size_t>(times.size()), "harrell_c");
  return detail::concordance(
      times, events,
      [&](Index i, Index j) { return risk[i] > risk[j] ? 1.0 : (risk[i] == risk[j] ? 0.5 : 0.0); }, "harrell_c");
}

inline double harrell_c(const Eigen::Ref<const Vector>& risk, const Eigen::Ref<const Vector>& times,
                        std::span<const int> events) {
  return harrell_concordance(risk, times, events).value;
}

/// Time-dependent concordance: S_i(y_i) < S_j(y_i) over comparable pairs.
inline Concordance antolini_concordance(std::span<const SurvivalCurve> curves, const Eigen::Ref<const Vector>& times,
                                        std::span<const int> events) {
  detail::check_lengths(curves.size(), static_cast<std::size_t>(times.size()), "antolini_c");
  detail::check_lengths(events.size(), static_cast<std::size_t>(times.size()), "antolini_c");
  return detail::concordance(
      times, events,
      [&](Index i, Index j) {
        const double si = curves[static_cast<std::size_t>(i)].at(times[i]);
        const double sj = curves[static_cast<std::size_t>(j)].at(times[i]);
        return si < sj ? 1.0 : (si == sj ? 0.5 : 0.0);
      },
      "antolini_c");
}

inline double antolini_c(std::span<const SurvivalCurve> curves, const Eigen::Ref<const Vector>& times,
                         std::span<const int> events) {
  return antolini_concordance(curves, times, events).value;
}

inline double pehe(const Eigen::Ref<const Vector>& y0_true, const Eigen::Ref<const Vector>& y1_true,
                   const Eigen::Ref<const Vector>& y0_pred, const Eigen::Ref<const Vector>& y1_pred) {
  const auto n = y0_true.size();
  if (y1_true.size() != n || y0_pred.size() != n || y1_pred.size() != n) throw DataError("pehe: length mismatch");
  if (n == 0) throw DataError("pehe: empty input");
  CompensatedSum sum;
  for (Index i = 0; i < n; ++i) {
    const double d = (y1_true[i] - y0_true[i]) - (y1_pred[i] - y0_pred[i]);
    sum.add(d * d);
  }
  return sum.value() / static_cast<double>(n);
}

/// PEHE against a predicted effect vector directly.
inline double pehe_effect(const Eigen::Ref<const Vector>& y0_true, const Eigen::Ref<const Vector>& y1_true,
                          const Eigen::Ref<const Vector>& tau_pred) {
  return pehe(y0_true, y1_true, Vector::Zero(tau_pred.size()), tau_pred);
}

inline double correct_treatment_fraction(std::span<const int> recommended, std::span<const int> best) {
  detail::check_lengths(recommended.size(), best.size(), "correct_treatment_fraction");
  if (best.empty()) throw DataError("correct_treatment_fraction: empty input");
  long hits = 0;
  for (std::size_t i = 0; i < best.size(); ++i) hits += recommended[i] == best[i];
  return static_cast<double>(hits) / static_cast<double>(best.size());
}

// ---------------------------------------------------------------------------
// Kaplan-Meier and log-rank

struct KmCurve {
  Vector time;  // 0 followed by every distinct observed time
  Vector survival;
  std::vector<long> at_risk;
  std::vector<long> events;
  std::vector<long> censored;
  Vector variance;  // Greenwood

  double at(double t) const {
    const auto* begin = time.data();
    const auto* it = std::upper_bound(begin, begin + time.size(), t);
    if (it == begin) return 1.0;
    return survival[it - begin - 1];
  }
};

inline KmCurve kaplan_meier(const Eigen::Ref<const Vector>& times, std::span<const int> events) {
  detail::check_lengths(events.size(), static_cast<std::size_t>(times.size()), "kaplan_meier");
  const Index n = times.size();
  if (n == 0) throw DataError("kaplan_meier: empty input");
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return times[a] < times[b]; });

  std::vector<double> t{0.0}, s{1.0}, var{0.0};
  KmCurve km;
  km.at_risk.push_back(n);
  km.events.push_back(0);
  km.censored.push_back(0);
  double surv = 1.0;
  double greenwood = 0.0;
  long risk = n;
  std::size_t k = 0;
  while (k < order.size()) {
    const double tk = times[order[k]];
    long d = 0, c = 0;
    while (k < order.size() && times[order[k]] == tk) {
      (events[static_cast<std::size_t>(order[k])] ? d : c) += 1;
      ++k;
    }
    if (d > 0) {
      surv *= 1.0 - static_cast<double>(d) / static_cast<double>(risk);
      if (risk > d) greenwood += static_cast<double>(d) / (static_cast<double>(risk) * static_cast<double>(risk - d));
    }
    t.push_back(tk);
    s.push_back(surv);
    var.push_back(surv > 0.0 ? surv * surv * greenwood : 0.0);
    km.at_risk.push_back(risk);
    km.events.push_back(d);
    km.censored.push_back(c);
    risk -= d + c;
  }
  km.time = Eigen::Map<Vector>(t.data(), static_cast<Index>(t.size()));
  km.survival = Eigen::Map<Vector>(s.data(), static_cast<Index>(s.size()));
  km.variance = Eigen::Map<Vector>(var.data(), static_cast<Index>(var.size()));
  return km;
}

struct LogRankResult {
  double chi_square = 0.0;
  double p_value = 1.0;
  double observed_minus_expected = 0.0;  // group 1
  double variance = 0.0;
};

/// Upper tail of the chi-square distribution with one degree of freedom.
inline double chi_square_1df_tail(double x) { return x <= 0.0 ? 1.0 : std::erfc(std::sqrt(0.5 * x)); }

inline LogRankResult logrank_test(std::span<const int> group, const Eigen::Ref<const Vector>& times,
                                  std::span<const int> events) {
  detail::check_lengths(group.size(), static_cast<std::size_t>(times.size()), "logrank_test");
  detail::check_lengths(events.size(), static_cast<std::size_t>(times.size()), "logrank_test");
  long n1 = 0, n0 = 0, total_events = 0;
  for (std::size_t i = 0; i < group.size(); ++i) {
    if (group[i] != 0 && group[i] != 1) throw DataError("logrank_test: group labels must be 0 or 1");
    (group[i] ? n1 : n0) += 1;
    total_events += events[i];
  }
  if (n0 == 0 || n1 == 0) throw DataError("logrank_test: both groups must be nonempty");
  if (total_events == 0) throw DataError("logrank_test: no events");

  std::vector<Index> order(group.size());
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return times[a] < times[b]; });
  CompensatedSum o_minus_e, var;
  std::size_t k = 0;
  while (k < order.size()) {
    const double tk = times[order[k]];
    long d = 0, d1 = 0, leaving0 = 0, leaving1 = 0;
    while (k < order.size() && times[order[k]] == tk) {
      const auto i = static_cast<std::size_t>(order[k]);
      d += events[i];
      if (group[i]) {
        d1 += events[i];
        ++leaving1;
      } else {
        ++leaving0;
      }
      ++k;
    }
    const double n = static_cast<double>(n0 + n1);
    if (d > 0) {
      o_minus_e.add(static_cast<double>(d1) - static_cast<double>(d) * static_cast<double>(n1) / n);
      if (n > 1.0)
        var.add(static_cast<double>(n1) * static_cast<double>(n0) * static_cast<double>(d) * (n - static_cast<double>(d)) /
                (n * n * (n - 1.0)));
    }
    n0 -= leaving0;
    n1 -= leaving1;
  }
  LogRankResult r;
  r.observed_minus_expected = o_minus_e.value();
  r.variance = var.value();
  r.chi_square = r.variance > 0.0 ? r.observed_minus_expected * r.observed_minus_expected / r.variance : 0.0;
  r.p_value = chi_square_1df_tail(r.chi_square);
  return r;
}

struct MetricsReport {
  double harrell_c = std::nan("");
  double antolini_c = std::nan("");
  double pehe = std::nan("");
  double correct_fraction = std::nan("");
  long n_comparable_pairs = 0;
};

}  // namespace bites
