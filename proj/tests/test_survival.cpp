#include <gtest/gtest.h>

#include <cmath>
#include <mutex>
#include <set>
#include <sstream>

#include "ectrial/rng.hpp"
#include "ectrial/survival.hpp"
#include "support.hpp"

using namespace ectrial;
using ectrial::test::rows;

namespace {

struct Step {
  double time, surv, var;
};

// Product-limit written from the definition: scan every row at every event time.
std::vector<Step> brute_km(const SurvivalData& s) {
  std::vector<double> times;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s.event[i]) times.push_back(s.stop[i]);
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());
  std::vector<Step> out;
  double surv = 1, gw = 0;
  for (double t : times) {
    double n = 0, d = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s.start[i] < t && t <= s.stop[i]) n += s.weight[i];
      if (s.event[i] && s.stop[i] == t) d += s.weight[i];
    }
    surv *= 1 - d / n;
    if (n > d) gw += d / (n * (n - d));
    out.push_back({t, surv, surv * surv * gw});
  }
  return out;
}

SurvivalData random_small(Philox4x32& g, bool weighted, bool delayed) {
  SurvivalData s;
  const auto n = 1 + g.below(12);
  for (std::uint32_t i = 0; i < n; ++i) {
    const double stop = 1 + static_cast<double>(g.below(8));  // coarse times force ties
    const double start = delayed && g.uniform() < 0.3 ? stop * g.uniform() : 0.0;
    s.push(start, stop, g.uniform() < 0.6, weighted ? 0.1 + 2 * g.uniform() : 1.0, Arm::RCT, i);
  }
  return s;
}

SurvivalData exponential_sample(std::uint64_t seed, int n, double rate, double censor_max, Arm arm = Arm::RCT,
                                std::uint32_t offset = 0) {
  Philox4x32 g(seed, 0);
  SurvivalData s;
  for (int i = 0; i < n; ++i) {
    const double t = g.exponential(rate), c = censor_max * g.uniform();
    s.push(0, std::min(t, c), t <= c, 1.0, arm, offset + static_cast<std::uint32_t>(i));
  }
  return s;
}

}  // namespace

TEST(KaplanMeier, MatchesBruteForceOnRandomSmallDatasets) {
  Philox4x32 g(2024, 0);
  for (int rep = 0; rep < 1000; ++rep) {
    const auto s = random_small(g, rep % 2 == 1, rep % 3 == 0);
    const auto expect = brute_km(s);
    const auto c = weighted_km(s);
    ASSERT_EQ(c.time.size(), expect.size()) << "dataset " << rep;
    for (std::size_t k = 0; k < expect.size(); ++k) {
      EXPECT_EQ(c.time[k], expect[k].time);
      EXPECT_NEAR(c.survival[k], expect[k].surv, 1e-12) << "dataset " << rep;
      if (c.survival[k] > 0) {
        EXPECT_NEAR(c.greenwood_var[k], expect[k].var, 1e-12);
      }
    }
  }
}

TEST(KaplanMeier, HandExamples) {
  const auto one = weighted_km(rows({5.0}, {1}));
  ASSERT_EQ(one.time, std::vector<double>{5.0});
  EXPECT_EQ(one.survival[0], 0.0);
  EXPECT_EQ(one.median, 5.0);

  const auto four = weighted_km(rows({1, 2, 1.5, 3}, {1, 1, 0, 0}));
  ASSERT_EQ(four.time, (std::vector<double>{1, 2}));
  EXPECT_DOUBLE_EQ(four.survival[0], 0.75);
  EXPECT_DOUBLE_EQ(four.survival[1], 0.375);
  EXPECT_DOUBLE_EQ(four.n_at_risk[1], 2.0);

  // A censoring tied with an event time is still at risk at that time.
  const auto tied = weighted_km(rows({2, 2, 4}, {1, 0, 1}));
  EXPECT_DOUBLE_EQ(tied.survival[0], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(tied.survival[1], 0.0);

  const auto none = weighted_km(rows({1, 2, 3}, {0, 0, 0}));
  EXPECT_TRUE(none.time.empty());
  EXPECT_FALSE(none.median);
  EXPECT_EQ(none.at(10), 1.0);
}

TEST(KaplanMeier, EvaluationIsRightContinuous) {
  const auto c = weighted_km(rows({1, 2, 1.5, 3}, {1, 1, 0, 0}));
  EXPECT_EQ(c.at(0.999), 1.0);
  EXPECT_EQ(c.at(1.0), 0.75);
  EXPECT_EQ(c.at(1.999), 0.75);
  EXPECT_EQ(c.at(50), 0.375);
}

TEST(KaplanMeier, UniformWeightScalingLeavesTheCurveUnchanged) {
  Philox4x32 g(3, 0);
  for (int rep = 0; rep < 50; ++rep) {
    auto s = random_small(g, true, true);
    const auto a = weighted_km(s);
    for (double& w : s.weight) w *= 37.5;
    const auto b = weighted_km(s);
    ASSERT_EQ(a.time, b.time);
    for (std::size_t k = 0; k < a.time.size(); ++k) EXPECT_NEAR(a.survival[k], b.survival[k], 1e-12);
  }
}

TEST(KaplanMeier, NonPositiveWeightsAreRejected) {
  EXPECT_THROW(weighted_km(rows({1, 2}, {1, 1}, {}, {1.0, 0.0})), std::invalid_argument);
}

TEST(KaplanMeier, SurvivalIsNonIncreasingAndBandContainsEstimate) {
  const auto c = weighted_km(exponential_sample(4, 500, 0.1, 30));
  for (std::size_t k = 0; k < c.time.size(); ++k) {
    if (k) {
      EXPECT_LE(c.survival[k], c.survival[k - 1]);
    }
    EXPECT_LE(c.lower[k], c.survival[k] + 1e-15);
    EXPECT_GE(c.upper[k], c.survival[k] - 1e-15);
  }
}

TEST(KaplanMeier, PooledHazardStepLiesBetweenArmSteps) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SurvivalData s = exponential_sample(100 + seed, 400, 0.08, 30, Arm::RCT);
    const SurvivalData b = exponential_sample(200 + seed, 400, 0.12, 20, Arm::OC, 400);
    for (std::size_t i = 0; i < b.size(); ++i) s.push(0, b.stop[i], b.event[i], 1.0, Arm::OC, b.subject[i]);
    const auto pooled = weighted_km(s), r = weighted_km(s.only(Arm::RCT)), o = weighted_km(s.only(Arm::OC));
    auto step = [](const KmCurve& c, double t) -> std::optional<double> {
      for (std::size_t k = 0; k < c.time.size(); ++k)
        if (c.time[k] == t) return c.n_events[k] / c.n_at_risk[k];
      return std::nullopt;
    };
    for (std::size_t k = 0; k < pooled.time.size(); ++k) {
      const double t = pooled.time[k], h = pooled.n_events[k] / pooled.n_at_risk[k];
      // An arm with subjects at risk but no event at t contributes a zero step.
      auto arm_step = [&](const SurvivalData& d, const KmCurve& c) -> std::optional<double> {
        if (auto v = step(c, t)) return v;
        for (std::size_t i = 0; i < d.size(); ++i)
          if (d.start[i] < t && t <= d.stop[i]) return 0.0;
        return std::nullopt;
      };
      const auto hr = arm_step(s.only(Arm::RCT), r), ho = arm_step(s.only(Arm::OC), o);
      const double lo = std::min(hr.value_or(ho.value_or(0)), ho.value_or(hr.value_or(0)));
      const double hi = std::max(hr.value_or(ho.value_or(0)), ho.value_or(hr.value_or(0)));
      EXPECT_GE(h, lo - 1e-15) << "seed " << seed << " t " << t;
      EXPECT_LE(h, hi + 1e-15) << "seed " << seed << " t " << t;
    }
  }
}

TEST(KaplanMeier, PooledCurveCanLeaveTheArmEnvelopeUnderDifferentialCensoring) {
  // Arm A: 100 at risk, half die at 1, the rest censored at 1.5.
  // Arm B: 2 at risk, one dies at 2. Both arms end at 0.5.
  SurvivalData s;
  std::uint32_t id = 0;
  for (int i = 0; i < 50; ++i) s.push(0, 1.0, true, 1, Arm::RCT, id++);
  for (int i = 0; i < 50; ++i) s.push(0, 1.5, false, 1, Arm::RCT, id++);
  s.push(0, 2.0, true, 1, Arm::OC, id++);
  s.push(0, 3.0, false, 1, Arm::OC, id++);
  EXPECT_DOUBLE_EQ(weighted_km(s.only(Arm::RCT)).at(2), 0.5);
  EXPECT_DOUBLE_EQ(weighted_km(s.only(Arm::OC)).at(2), 0.5);
  EXPECT_NEAR(weighted_km(s).at(2), (52.0 / 102.0) * 0.5, 1e-12);
}

TEST(Median, BoundaryAndAbsence) {
  const auto half = weighted_km(rows({7, 9}, {1, 1}));
  EXPECT_DOUBLE_EQ(half.survival[0], 0.5);
  EXPECT_EQ(median_survival(half).median, 7.0);

  const auto high = weighted_km(rows({1, 2, 3, 4, 4, 4, 4, 4, 4, 4}, {1, 1, 1, 0, 0, 0, 0, 0, 0, 0}));
  EXPECT_GT(high.survival.back(), 0.6);
  EXPECT_FALSE(median_survival(high).median);
  EXPECT_FALSE(high.median);
}

TEST(Median, ExponentialSampleRecoversAnalyticMedian) {
  const auto c = weighted_km(exponential_sample(99, 20000, std::log(2.0) / 10.0, 1e9));
  ASSERT_TRUE(c.median);
  EXPECT_NEAR(*c.median, 10.0, 0.3);
  ASSERT_TRUE(c.median_lower && c.median_upper);
  EXPECT_LE(*c.median_lower, *c.median);
  EXPECT_GE(*c.median_upper, *c.median);
  EXPECT_LT(*c.median_upper - *c.median_lower, 1.0);
}

TEST(LogRank, SixSubjectHandExample) {
  // RCT: events at 1 and 3, censored at 5. OC: events at 2, 4, 6.
  const std::vector<Arm> arm = {Arm::RCT, Arm::RCT, Arm::RCT, Arm::OC, Arm::OC, Arm::OC};
  const auto r = weighted_logrank(rows({1, 3, 5, 2, 4, 6}, {1, 1, 0, 1, 1, 1}, arm));
  // Event time: (n, n_rct, d_rct) = (6,3,1) (5,2,0) (4,2,1) (3,1,0) (1,0,0).
  const double expected = 3.0 / 6 + 2.0 / 5 + 2.0 / 4 + 1.0 / 3;
  const double var = 0.25 + 0.24 + 0.25 + 2.0 / 9;
  EXPECT_NEAR(r.observed_minus_expected, 2.0 - expected, 1e-12);
  EXPECT_NEAR(r.variance, var, 1e-12);
  EXPECT_NEAR(r.statistic, std::pow(2.0 - expected, 2) / var, 1e-12);
  EXPECT_NEAR(r.p_value, std::erfc(std::sqrt(r.statistic / 2)), 1e-15);
}

TEST(LogRank, DuplicatedWithSwappedLabelsIsExactlyNull) {
  SurvivalData a = exponential_sample(7, 60, 0.1, 20, Arm::RCT);
  SurvivalData b = exponential_sample(8, 60, 0.2, 20, Arm::OC, 60);
  SurvivalData s = a;
  for (std::size_t i = 0; i < b.size(); ++i) s.push(0, b.stop[i], b.event[i], 1.0, Arm::OC, b.subject[i]);
  const std::size_t n = s.size();
  for (std::size_t i = 0; i < n; ++i)
    s.push(0, s.stop[i], s.event[i], 1.0, s.arm[i] == Arm::RCT ? Arm::OC : Arm::RCT, static_cast<std::uint32_t>(n + i));
  const auto r = weighted_logrank(s);
  EXPECT_NEAR(r.observed_minus_expected, 0.0, 1e-12);
  EXPECT_NEAR(r.statistic, 0.0, 1e-20);
}

TEST(LogRank, UniformWeightScalingAndErrors) {
  SurvivalData s = exponential_sample(11, 80, 0.1, 20, Arm::RCT);
  const auto b = exponential_sample(12, 80, 0.15, 20, Arm::OC, 80);
  Philox4x32 g(13, 0);
  for (std::size_t i = 0; i < b.size(); ++i) s.push(0, b.stop[i], b.event[i], 1.0, Arm::OC, b.subject[i]);
  for (double& w : s.weight) w = 0.3 + g.uniform();
  const auto r1 = weighted_logrank(s);
  for (double& w : s.weight) w *= 250.0;
  const auto r2 = weighted_logrank(s);
  EXPECT_NEAR(r1.statistic, r2.statistic, 1e-10);
  EXPECT_NEAR(r1.p_value, r2.p_value, 1e-12);

  EXPECT_THROW(weighted_logrank(SurvivalData{}), EstimationError);
  EXPECT_THROW(weighted_logrank(rows({1, 2}, {0, 0}, {Arm::RCT, Arm::OC})), EstimationError);
}

TEST(ArmCox, HazardRatioDirectionAndKmCsv) {
  SurvivalData s = exponential_sample(21, 3000, 0.05, 40, Arm::RCT);
  const auto b = exponential_sample(22, 3000, 0.10, 40, Arm::OC, 3000);
  for (std::size_t i = 0; i < b.size(); ++i) s.push(0, b.stop[i], b.event[i], 1.0, Arm::OC, b.subject[i]);
  EXPECT_NEAR(fit_arm_cox(s).hazard_ratio(), 0.5, 0.05);

  std::ostringstream out;
  write_km_csv(out, {{Arm::RCT, weighted_km(rows({1, 2}, {1, 0}))}});
  EXPECT_EQ(out.str(), "arm,time,survival,lo,hi,n_at_risk_weighted\nRCT,0,1,1,1,2\nRCT,1,0.5,"
                       + csv::format_number(weighted_km(rows({1, 2}, {1, 0})).lower[0]) + "," +
                           csv::format_number(weighted_km(rows({1, 2}, {1, 0})).upper[0]) + ",2\n");
}

// ---------------------------------------------------------------------------
// Bootstrap

namespace {

Cohort cohort_of(const SurvivalData& s) {
  std::vector<Subject> subjects;
  for (std::size_t i = 0; i < s.size(); ++i) {
    Subject x;
    x.id = "s" + std::to_string(i);
    x.arm = s.arm[i];
    x.followup_time = s.stop[i];
    x.event = s.event[i];
    subjects.push_back(x);
  }
  return Cohort({}, subjects);
}

double cohort_hr(const Cohort& c) {
  SurvivalData s;
  for (std::uint32_t i = 0; i < c.size(); ++i) s.push(0, c[i].followup_time, c[i].event, 1.0, c[i].arm, i);
  return fit_arm_cox(s).hazard_ratio();
}

Cohort two_arm(std::uint64_t seed, int n) {
  SurvivalData s = exponential_sample(seed, n, 0.08, 30, Arm::RCT);
  const auto b = exponential_sample(seed + 1, n, 0.1, 30, Arm::OC, static_cast<std::uint32_t>(n));
  for (std::size_t i = 0; i < b.size(); ++i) s.push(0, b.stop[i], b.event[i], 1.0, Arm::OC, b.subject[i]);
  return cohort_of(s);
}

}  // namespace

TEST(Bootstrap, QuantileIsLinearInterpolation) {
  EXPECT_DOUBLE_EQ(quantile_sorted({1, 2, 3, 4}, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(quantile_sorted({1, 2, 3, 4}, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(quantile_sorted({1, 2, 3, 4}, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(quantile_sorted({10}, 0.025), 10.0);
  EXPECT_NEAR(quantile_sorted({0, 10, 20, 30, 40}, 0.025), 1.0, 1e-12);
  EXPECT_THROW(quantile_sorted({}, 0.5), std::invalid_argument);
}

TEST(Bootstrap, ResamplingIsStratifiedByArm) {
  const Cohort c = two_arm(1, 40);
  Philox4x32 g(5, 0);
  const Cohort r = resample_within_arms(c, g);
  EXPECT_EQ(r.arm_counts(), c.arm_counts());
  std::set<std::string> ids;
  for (const auto& s : r.subjects()) ids.insert(s.id);
  EXPECT_EQ(ids.size(), r.size());
}

TEST(Bootstrap, SingleReplicateCollapsesTheInterval) {
  const Cohort c = two_arm(2, 100);
  BootstrapOptions opt;
  opt.replicates = 1;
  opt.seed = 9;
  const auto ci = bootstrap_hr(c, cohort_hr, cohort_hr(c), opt);
  ASSERT_EQ(ci.replicate_hr.size(), 1u);
  EXPECT_EQ(ci.lo, ci.replicate_hr[0]);
  EXPECT_EQ(ci.hi, ci.replicate_hr[0]);
}

TEST(Bootstrap, ZeroWidthWhenEverySubjectInAnArmIsIdentical) {
  std::vector<Subject> subjects;
  for (int i = 0; i < 30; ++i) {
    Subject s;
    s.id = "s" + std::to_string(i);
    s.arm = i < 15 ? Arm::RCT : Arm::OC;
    s.followup_time = i < 15 ? 4.0 : 3.0;
    s.event = true;
    subjects.push_back(s);
  }
  const Cohort c({}, subjects);
  auto gap = [](const Cohort& x) {
    SurvivalData r, o;
    for (std::uint32_t i = 0; i < x.size(); ++i)
      (x[i].arm == Arm::RCT ? r : o).push(0, x[i].followup_time, x[i].event, 1, x[i].arm, i);
    return *weighted_km(r).median - *weighted_km(o).median;
  };
  BootstrapOptions opt;
  opt.replicates = 40;
  const auto ci = bootstrap_hr(c, gap, gap(c), opt);
  EXPECT_EQ(ci.lo, 1.0);
  EXPECT_EQ(ci.hi, 1.0);
}

TEST(Bootstrap, IndependentOfThreadCount) {
  const Cohort c = two_arm(3, 150);
  BootstrapOptions opt;
  opt.replicates = 64;
  opt.seed = 77;
  const auto one = bootstrap_hr(c, cohort_hr, cohort_hr(c), opt);
  opt.threads = 4;
  const auto four = bootstrap_hr(c, cohort_hr, cohort_hr(c), opt);
  opt.threads = 8;
  const auto eight = bootstrap_hr(c, cohort_hr, cohort_hr(c), opt);
  EXPECT_EQ(one.replicate_hr, four.replicate_hr);
  EXPECT_EQ(one.replicate_hr, eight.replicate_hr);
  EXPECT_EQ(one.lo, eight.lo);
  EXPECT_EQ(one.hi, eight.hi);
  EXPECT_LT(one.lo, one.point);
  EXPECT_GT(one.hi, one.point);

  opt.seed = 78;
  EXPECT_NE(bootstrap_hr(c, cohort_hr, cohort_hr(c), opt).replicate_hr, one.replicate_hr);
}

TEST(Bootstrap, FailuresAreCountedAndBoundedAndInputsValidated) {
  const Cohort c = two_arm(4, 30);
  BootstrapOptions opt;
  opt.replicates = 40;
  int calls = 0;
  std::mutex m;
  auto flaky = [&](const Cohort& x) {
    std::lock_guard lock(m);
    if (calls++ == 0) throw EstimationError("first replicate fails");
    return cohort_hr(x);
  };
  const auto ci = bootstrap_hr(c, flaky, 1.0, opt);
  EXPECT_EQ(ci.failures, 1);
  EXPECT_EQ(ci.replicate_hr.size(), 39u);

  auto broken = [](const Cohort&) -> double { throw EstimationError("always"); };
  EXPECT_THROW(bootstrap_hr(c, broken, 1.0, opt), EstimationError);
  opt.replicates = 0;
  EXPECT_THROW(bootstrap_hr(c, cohort_hr, 1.0, opt), ConfigError);
}
