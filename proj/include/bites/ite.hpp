#pragma once

#include "bites/common.hpp"
#include "bites/cox.hpp"
#include "bites/data.hpp"
#include "bites/net.hpp"

#include <array>
#include <vector>

namespace bites {

enum class MedianRule {
  Step,    // first grid time with S <= 0.5
  Linear,  // linear interpolation between the bracketing grid points
};

struct MedianResult {
  double time = 0.0;
  bool restricted = false;  // S never reached 0.5 on the grid
};

/// Inverse of the survival curve at probability 0.5. A curve that stays
/// above 0.5 returns its last grid time, flagged restricted.
inline MedianResult median_survival(const SurvivalCurve& curve, MedianRule rule = MedianRule::Step) {
  if (curve.time.size() == 0) throw DataError("median_survival: empty grid");
  for (Index k = 0; k < curve.survival.size(); ++k) {
    if (curve.survival[k] > 0.5) continue;
    if (rule == MedianRule::Step || k == 0 || curve.survival[k] == 0.5) return {curve.time[k], false};
    const double s_hi = curve.survival[k - 1];
    const double s_lo = curve.survival[k];
    const double w = (s_hi - 0.5) / (s_hi - s_lo);
    return {curve.time[k - 1] + w * (curve.time[k] - curve.time[k - 1]), false};
  }
  return {curve.time[curve.time.size() - 1], true};
}

struct IteEstimate {
  double tau_median = 0.0;
  SurvivalCurve curve0;
  SurvivalCurve curve1;
  int recommended = 0;
  bool restricted0 = false;
  bool restricted1 = false;
};

inline IteEstimate ite_from_curves(SurvivalCurve curve0, SurvivalCurve curve1, MedianRule rule = MedianRule::Step) {
  IteEstimate e;
  const auto m0 = median_survival(curve0, rule);
  const auto m1 = median_survival(curve1, rule);
  e.tau_median = m1.time - m0.time;
  e.recommended = e.tau_median > 0.0 ? 1 : 0;
  e.restricted0 = m0.restricted;
  e.restricted1 = m1.restricted;
  e.curve0 = std::move(curve0);
  e.curve1 = std::move(curve1);
  return e;
}

/// Time-dependent effect S1(t) - S0(t) on the merged grid of both curves.
struct EffectCurve {
  Vector time;
  Vector effect;
};

inline EffectCurve ite_curve(const SurvivalCurve& curve0, const SurvivalCurve& curve1) {
  std::vector<double> grid(curve0.time.data(), curve0.time.data() + curve0.time.size());
  grid.insert(grid.end(), curve1.time.data(), curve1.time.data() + curve1.time.size());
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  EffectCurve out;
  out.time = Eigen::Map<Vector>(grid.data(), static_cast<Index>(grid.size()));
  out.effect.resize(out.time.size());
  for (Index k = 0; k < out.time.size(); ++k) out.effect[k] = curve1.at(out.time[k]) - curve0.at(out.time[k]);
  return out;
}

inline std::vector<IteEstimate> ite_from_curve_sets(const std::array<std::vector<SurvivalCurve>, 2>& curves,
                                                    MedianRule rule = MedianRule::Step) {
  std::vector<IteEstimate> out;
  out.reserve(curves[0].size());
  for (std::size_t i = 0; i < curves[0].size(); ++i) out.push_back(ite_from_curves(curves[0][i], curves[1][i], rule));
  return out;
}

inline std::vector<IteEstimate> recommend_bites(const BitesModel& model, const Matrix& x,
                                                MedianRule rule = MedianRule::Step) {
  return ite_from_curve_sets(model.predict_curves(x), rule);
}

/// Curves from the shared baseline; the recommendation follows the hazard
/// scores instead of the medians: arm 1 iff h(T=1, x) < h(T=0, x).
inline std::vector<IteEstimate> recommend_deepsurv_single(const DeepSurvModel& model, const Matrix& x,
                                                          MedianRule rule = MedianRule::Step) {
  auto out = ite_from_curve_sets(model.predict_curves(x), rule);
  const Vector h0 = model.score(x, 0);
  const Vector h1 = model.score(x, 1);
  for (Index i = 0; i < x.rows(); ++i) out[static_cast<std::size_t>(i)].recommended = h1[i] < h0[i] ? 1 : 0;
  return out;
}

// ---------------------------------------------------------------------------
// Linear Cox T-learner

struct CoxTLearner {
  std::array<LinearCoxModel, 2> arms;
  std::array<BaselineHazard, 2> baselines;
  std::array<LinearCoxFit, 2> fits;
  bool fitted = false;

  std::array<std::vector<SurvivalCurve>, 2> predict_curves(const Matrix& x) const {
    if (!fitted) throw ConfigError("cox t-learner is not fitted");
    std::array<std::vector<SurvivalCurve>, 2> out;
    for (int arm : {0, 1}) {
      const Vector s = arms[static_cast<std::size_t>(arm)].scores(x);
      for (Index i = 0; i < x.rows(); ++i)
        out[static_cast<std::size_t>(arm)].push_back(survival_curve(baselines[static_cast<std::size_t>(arm)], s[i]));
    }
    return out;
  }
};

inline CoxTLearner fit_cox_tlearner(const SurvivalDataset& train, const LinearCoxFitOptions& opt) {
  train.validate();
  CoxTLearner m;
  for (int arm : {0, 1}) {
    const auto sub = train.subset(train.arm_rows(arm));
    if (sub.size() == 0) throw DataError("cox t-learner: arm " + std::to_string(arm) + " is empty");
    auto fit = fit_linear_cox(sub.features, sub.time, sub.event, opt);
    const auto a = static_cast<std::size_t>(arm);
    m.baselines[a] = breslow_baseline(fit.model.scores(sub.features), sub.time, sub.event);
    m.arms[a] = fit.model;
    m.fits[a] = std::move(fit);
  }
  m.fitted = true;
  return m;
}

inline std::vector<IteEstimate> recommend_cox_tlearner(const CoxTLearner& model, const Matrix& x,
                                                       MedianRule rule = MedianRule::Step) {
  return ite_from_curve_sets(model.predict_curves(x), rule);
}

}  // namespace bites
