#include "bites/data.hpp"

#include <gtest/gtest.h>

#include <set>
#include <sstream>

using namespace bites;

namespace {

SurvivalDataset tiny(int n_control, int n_treated) {
  SurvivalDataset ds;
  const int n = n_control + n_treated;
  ds.features = Matrix::Zero(n, 1);
  ds.time = Vector::LinSpaced(n, 1.0, n);
  ds.event.assign(n, 1);
  for (int i = 0; i < n; ++i) ds.treatment.push_back(i < n_control ? 0 : 1);
  ds.feature_names = {"f"};
  return ds;
}

}  // namespace

TEST(LoadCsv, ParsesFeaturesAndOutcomes) {
  std::istringstream in(
      "f1,f2,time,event,treatment\n"
      "1.5,2,3.25,1,0\n"
      "0,-1e-3,0.5,0,1\n"
      "4,5,10,1,1\n");
  const auto ds = load_csv(in);
  ASSERT_EQ(ds.size(), 3);
  ASSERT_EQ(ds.dim(), 2);
  EXPECT_EQ(ds.feature_names, (std::vector<std::string>{"f1", "f2"}));
  EXPECT_DOUBLE_EQ(ds.features(1, 1), -1e-3);
  EXPECT_DOUBLE_EQ(ds.time[0], 3.25);
  EXPECT_EQ(ds.event, (std::vector<int>{1, 0, 1}));
  EXPECT_EQ(ds.treatment, (std::vector<int>{0, 1, 1}));
  EXPECT_NO_THROW(ds.validate());
}

TEST(LoadCsv, SixRoutineParametersGiveSixFeatures) {
  std::istringstream in(
      "pid,age,meno,nodes,grade,pgr,er,duration,status,hormone\n"
      "a,50,1,3,2,10,20,4.5,1,0\n"
      "b,61,1,0,3,0,5,7.0,0,1\n");
  CsvSchema schema;
  schema.time = "duration";
  schema.event = "status";
  schema.treatment = "hormone";
  schema.id = "pid";
  const auto ds = load_csv(in, schema);
  EXPECT_EQ(ds.dim(), 6);
  EXPECT_EQ(ds.row_id(1), "b");
}

TEST(LoadCsv, EventOutsideZeroOneNamesTheRow) {
  std::istringstream in("f1,time,event,treatment\n1,2,1,0\n1,2,2,0\n");
  try {
    load_csv(in);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("event"), std::string::npos) << e.what();
  }
}

TEST(LoadCsv, ErrorsAreLocated) {
  {
    std::istringstream in("f1,time,treatment\n1,2,0\n");
    EXPECT_THROW(load_csv(in), DataError);
  }
  {
    std::istringstream in("f1,time,event,treatment\n1,,1,0\n");
    try {
      load_csv(in);
      FAIL();
    } catch (const DataError& e) {
      EXPECT_NE(std::string(e.what()).find("column 'time'"), std::string::npos) << e.what();
    }
  }
  {
    std::istringstream in("");
    EXPECT_THROW(load_csv(in), DataError);
  }
  {
    std::istringstream in("f1,time,event,treatment\n");
    EXPECT_THROW(load_csv(in), DataError);
  }
  {
    std::istringstream in("f1,time,event,treatment\nNA,1,1,0\n");
    EXPECT_THROW(load_csv(in), DataError);
  }
}

TEST(LoadCsv, OptionalOutcomeColumns) {
  std::istringstream in("f1,f2\n1,2\n3,4\n");
  CsvSchema schema;
  schema.require_outcomes = false;
  schema.require_treatment = false;
  const auto ds = load_csv(in, schema);
  EXPECT_EQ(ds.dim(), 2);
  EXPECT_EQ(ds.size(), 2);
}

TEST(Standardize, HandComputedColumn) {
  SurvivalDataset ds = tiny(2, 1);
  ds.features.resize(3, 2);
  ds.features << 1, 5, 2, 5, 3, 5;
  ds.feature_names = {"a", "b"};
  const auto [out, stats] = standardize(ds);
  EXPECT_NEAR(out.features(0, 0), -1.0, 1e-15);
  EXPECT_NEAR(out.features(1, 0), 0.0, 1e-15);
  EXPECT_NEAR(out.features(2, 0), 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(stats.mean[0], 2.0);
  EXPECT_DOUBLE_EQ(stats.sd[0], 1.0);
  // Constant column passes through centered with sd recorded as 1.
  EXPECT_DOUBLE_EQ(stats.sd[1], 1.0);
  EXPECT_TRUE(out.features.col(1).isZero());
}

TEST(Standardize, IdempotentAndReplayable) {
  const auto [ds, truth] = simulate(SimulationConfig::defaults(Design::Linear, 200, 3));
  const auto [once, s1] = standardize(ds);
  const auto [twice, s2] = standardize(once);
  EXPECT_LT((once.features - twice.features).lpNorm<Eigen::Infinity>(), 1e-12);
  EXPECT_LT(s2.mean.lpNorm<Eigen::Infinity>(), 1e-12);
  EXPECT_LT((s2.sd.array() - 1.0).abs().maxCoeff(), 1e-12);
  EXPECT_LT((s1.apply(ds.features) - once.features).lpNorm<Eigen::Infinity>(), 0.0 + 1e-15);
}

TEST(Split, DeterministicDisjointExhaustive) {
  const auto ds = tiny(6, 4);
  const auto a = split_indices(ds, 0.6, 42, false);
  const auto b = split_indices(ds, 0.6, 42, false);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.validation, b.validation);
  std::set<Index> all(a.train.begin(), a.train.end());
  for (auto i : a.validation) EXPECT_TRUE(all.insert(i).second);
  EXPECT_EQ(all.size(), 10u);
  EXPECT_EQ(a.train.size(), 6u);
}

TEST(Split, StratifiedKeepsArmProportions) {
  const auto ds = tiny(6, 4);
  const auto [train, val] = split(ds, 0.5, 7, true);
  EXPECT_EQ(train.arm_count(0), 3);
  EXPECT_EQ(train.arm_count(1), 2);
  EXPECT_EQ(val.arm_count(0), 3);
  EXPECT_EQ(val.arm_count(1), 2);
}

TEST(Split, SixtyPercentOfThousand) {
  const auto [ds, truth] = simulate(SimulationConfig::defaults(Design::Linear, 1000, 1));
  EXPECT_EQ(split_indices(ds, 0.6, 5, false).train.size(), 600u);
}

TEST(Split, ArmTooSmallToStratify) {
  EXPECT_THROW(split(tiny(5, 1), 0.5, 1, true), DataError);
  EXPECT_THROW(split(tiny(5, 5), 1.0, 1, false), ConfigError);
}

TEST(Simulate, PublishedLinearCoefficients) {
  const auto c = SimulationConfig::defaults(Design::Linear, 10, 0);
  for (int k = 0; k < 10; ++k) {
    EXPECT_DOUBLE_EQ(c.gamma1[k], 0.1);
    EXPECT_NEAR(c.gamma2[k], 0.15 + 0.2 * k, 1e-15);
  }
  EXPECT_NEAR(c.gamma2[9], 1.95, 1e-15);
  const auto nl = SimulationConfig::defaults(Design::NonLinear, 10, 0);
  EXPECT_DOUBLE_EQ(nl.gamma1[0], 2.0);
  EXPECT_NEAR(nl.gamma2[9], 4.1, 1e-12);
  EXPECT_DOUBLE_EQ(nl.scale_c, 0.01);
  const auto b = SimulationConfig::defaults(Design::NonLinearBiased, 10, 0);
  EXPECT_EQ(b.gamma1[4], 0.0);
  EXPECT_EQ(b.gamma2[4], 0.0);
}

TEST(Simulate, SameSeedIsBitIdentical) {
  const auto cfg = SimulationConfig::defaults(Design::NonLinearBiased, 300, 99);
  const auto [a, ta] = simulate(cfg);
  const auto [b, tb] = simulate(cfg);
  EXPECT_TRUE(a.features == b.features);
  EXPECT_TRUE(a.time == b.time);
  EXPECT_EQ(a.event, b.event);
  EXPECT_EQ(a.treatment, b.treatment);
  EXPECT_TRUE(ta.y0 == tb.y0 && ta.y1 == tb.y1);
  EXPECT_NO_THROW(a.validate());
}

TEST(Simulate, BiasedAssignmentRate) {
  const auto [ds, truth] = simulate(SimulationConfig::defaults(Design::NonLinearBiased, 100000, 5));
  int flagged = 0, treated = 0;
  for (Index i = 0; i < ds.size(); ++i) {
    if (truth.clean_features(i, 4) > 0.0 || truth.clean_features(i, 14) > 0.0) {
      ++flagged;
      treated += ds.treatment[i];
    }
  }
  EXPECT_NEAR(static_cast<double>(treated) / flagged, 0.9, 0.01);
}

TEST(Simulate, BiasCoordinatesDoNotAffectTimes) {
  const auto cfg = SimulationConfig::defaults(Design::NonLinearBiased, 50, 8);
  const auto [ds, truth] = simulate(cfg);
  for (Index i = 0; i < ds.size(); ++i) {
    Eigen::RowVectorXd x = truth.clean_features.row(i);
    const auto before = simulation_exponents(cfg, x);
    std::swap(x[4], x[14]);
    x[4] += 3.0;
    const auto after = simulation_exponents(cfg, x);
    EXPECT_EQ(before, after);
  }
}

TEST(Simulate, CensoredTimesBoundedByTruth) {
  const auto [ds, truth] = simulate(SimulationConfig::defaults(Design::Linear, 2000, 4));
  for (Index i = 0; i < ds.size(); ++i) {
    const double y = ds.treatment[i] ? truth.y1[i] : truth.y0[i];
    EXPECT_EQ(truth.best_treatment[i], truth.y1[i] > truth.y0[i] ? 1 : 0);
    if (ds.event[i]) {
      EXPECT_EQ(ds.time[i], y);
    } else {
      EXPECT_LE(ds.time[i], y);
    }
    EXPECT_LE(ds.time[i], 10.0);
  }
}

TEST(ApplyCensoring, HorizonRule) {
  Vector t(2);
  t << 12.0, 3.0;
  const auto c = apply_censoring(t, 10.0, 0.0, 1);
  EXPECT_EQ(c.time[0], 10.0);
  EXPECT_EQ(c.event[0], 0);
  EXPECT_EQ(c.time[1], 3.0);
  EXPECT_EQ(c.event[1], 1);
}

TEST(ApplyCensoring, FractionZeroKeepsEveryEvent) {
  const Vector t = Vector::LinSpaced(100, 0.1, 9.9);
  const auto c = apply_censoring(t, 10.0, 0.0, 1);
  for (int e : c.event) EXPECT_EQ(e, 1);
}

TEST(ApplyCensoring, HalfOfWithinHorizonSamplesCensored) {
  Rng rng(77);
  Vector t(10000);
  for (Index i = 0; i < t.size(); ++i) t[i] = 9.0 * rng.uniform_open();
  const auto c = apply_censoring(t, 10.0, 0.5, 3);
  double rate = 0.0;
  for (int e : c.event) rate += e;
  rate /= 10000.0;
  EXPECT_NEAR(rate, 0.5, 0.02);
  for (Index i = 0; i < t.size(); ++i) {
    if (!c.event[i]) {
      EXPECT_LT(c.time[i], t[i]);
    }
  }
}
