#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "ectrial/simulate.hpp"
#include "support.hpp"

using namespace ectrial;

namespace {

std::string cohort_csv(const Cohort& c) {
  std::ostringstream out;
  write_cohort_csv(out, c);
  return out.str();
}

SimConfig small(std::size_t n, std::uint64_t seed = 1) {
  SimConfig c = SimConfig::defaults();
  c.n_per_arm = n;
  c.seed = seed;
  return c;
}

// Two-sample Kolmogorov-Smirnov statistic and its asymptotic p-value.
std::pair<double, double> ks_test(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0;
  while (i < a.size() && j < b.size()) {
    const double t = std::min(a[i], b[j]);
    while (i < a.size() && a[i] == t) ++i;
    while (j < b.size() && b[j] == t) ++j;
    d = std::max(d, std::abs(double(i) / a.size() - double(j) / b.size()));
  }
  const double ne = double(a.size()) * b.size() / (a.size() + b.size());
  const double lambda = (std::sqrt(ne) + 0.12 + 0.11 / std::sqrt(ne)) * d;
  double p = 0;
  for (int k = 1; k <= 100; ++k) p += 2 * ((k % 2) ? 1 : -1) * std::exp(-2.0 * k * k * lambda * lambda);
  return {d, std::clamp(p, 0.0, 1.0)};
}

}  // namespace

TEST(Simulate, FixedSeedIsReproducible) {
  const auto a = generate_cohort(small(300, 5)), b = generate_cohort(small(300, 5));
  EXPECT_EQ(cohort_csv(a.cohort), cohort_csv(b.cohort));
  std::ostringstream ta, tb;
  write_truth_csv(ta, a.truth);
  write_truth_csv(tb, b.truth);
  EXPECT_EQ(ta.str(), tb.str());
  EXPECT_NE(cohort_csv(generate_cohort(small(300, 6)).cohort), cohort_csv(a.cohort));
  EXPECT_EQ(ta.str().substr(0, ta.str().find('\n')),
            "id,arm,noswitch_event_months,noswitch_event_months_rct,noswitch_event_months_oc");
}

TEST(Simulate, ArmSizesIdsAndValidity) {
  const auto sim = generate_cohort(small(250));
  EXPECT_EQ(sim.cohort.arm_counts().rct, 250u);
  EXPECT_EQ(sim.cohort.arm_counts().oc, 250u);
  EXPECT_EQ(sim.truth.size(), 500u);
  EXPECT_EQ(sim.cohort[0].id, "R1");
  EXPECT_EQ(sim.cohort[250].id, "O1");
  // The emitted cohort passes the same validation as a loaded one.
  EXPECT_NO_THROW(validate_cohort(to_records(sim.cohort), sim.cohort.specs()));
  for (const auto& s : sim.cohort.subjects()) {
    EXPECT_GT(s.followup_time, 0.0);
    EXPECT_LE(s.followup_time, 36.0);
    if (s.switch_time) {
      EXPECT_LT(*s.switch_time, s.followup_time);
    }
    if (s.progression_time) {
      EXPECT_LT(*s.progression_time, s.followup_time);
    }
  }
}

TEST(Simulate, DefaultSwitchFractionIsRealistic) {
  const auto sim = generate_cohort(small(3000, 11));
  std::size_t sw[2] = {0, 0};
  for (const auto& s : sim.cohort.subjects()) sw[s.arm == Arm::RCT ? 0 : 1] += s.switch_time.has_value();
  EXPECT_GE(sw[0] / 3000.0, 0.45);
  EXPECT_LE(sw[0] / 3000.0, 0.65);
  EXPECT_GE(sw[1] / 3000.0, 0.45);
  EXPECT_LE(sw[1] / 3000.0, 0.65);
}

TEST(Simulate, NeverSwitchersObserveTheirCounterfactualTime) {
  const auto sim = generate_cohort(small(2000, 12));
  std::size_t checked = 0;
  for (std::size_t i = 0; i < sim.cohort.size(); ++i) {
    const auto& s = sim.cohort[i];
    const auto& t = sim.truth[i];
    ASSERT_EQ(s.id, t.id);
    EXPECT_EQ(t.noswitch_time, s.arm == Arm::RCT ? t.noswitch_time_rct : t.noswitch_time_oc);
    if (s.switch_time) continue;
    if (s.event) {
      EXPECT_EQ(s.followup_time, t.noswitch_time) << s.id;
      ++checked;
    } else {
      EXPECT_GE(t.noswitch_time, s.followup_time) << s.id;
    }
  }
  EXPECT_GT(checked, 500u);
}

TEST(Simulate, SwitchEffectShortensOrLengthensSurvivalInTheRightDirection) {
  SimConfig harmful = small(2000, 13), none = small(2000, 13);
  harmful.switch_effect = std::log(2.0);
  none.switch_effect = 0.0;
  const auto a = generate_cohort(harmful), b = generate_cohort(none);
  for (std::size_t i = 0; i < a.cohort.size(); ++i) {
    // Same random numbers: only post-switch hazard differs.
    ASSERT_EQ(a.truth[i].noswitch_time, b.truth[i].noswitch_time);
    if (a.cohort[i].switch_time && a.cohort[i].event && b.cohort[i].event) {
      EXPECT_LE(a.cohort[i].followup_time, b.cohort[i].followup_time);
    }
    if (!b.cohort[i].switch_time) {
      EXPECT_EQ(a.cohort[i].followup_time, b.cohort[i].followup_time);
    }
  }
}

TEST(Simulate, NullEffectCounterfactualsAgreeInDistribution) {
  SimConfig cfg = small(10000, 14);
  cfg.theta = 0.0;
  const auto sim = generate_cohort(cfg);
  // Independent halves of the trial arm under each setting.
  auto split = [](const std::vector<TruthRecord>& truth, std::vector<double>& rct, std::vector<double>& oc) {
    rct.clear();
    oc.clear();
    for (const auto& t : truth) {
      if (t.arm != Arm::RCT) continue;
      if (rct.size() == oc.size())
        rct.push_back(t.noswitch_time_rct);
      else
        oc.push_back(t.noswitch_time_oc);
    }
  };
  std::vector<double> rct, oc;
  split(sim.truth, rct, oc);
  ASSERT_EQ(rct.size(), 5000u);
  EXPECT_GT(ks_test(rct, oc).second, 0.01);

  // With the effect switched on the same comparison detects it.
  cfg.theta = std::log(0.6);
  const auto eff = generate_cohort(cfg);
  split(eff.truth, rct, oc);
  EXPECT_LT(ks_test(rct, oc).second, 1e-6);
}

TEST(Simulate, KolmogorovOracleSanity) {
  EXPECT_NEAR(ks_test({1, 2, 3}, {1, 2, 3}).first, 0.0, 0);
  EXPECT_DOUBLE_EQ(ks_test({1, 2}, {3, 4}).first, 1.0);
  EXPECT_DOUBLE_EQ(ks_test({1, 3}, {2, 4}).first, 0.5);
}

TEST(Simulate, ConfigErrors) {
  EXPECT_THROW(generate_cohort(small(0)), ConfigError);
  SimConfig c = small(10);
  c.categorical[0].probs = {0.5, 0.4, 0.3};
  EXPECT_THROW(generate_cohort(c), ConfigError);
  c = small(10);
  c.weibull_shape = 0;
  EXPECT_THROW(generate_cohort(c), ConfigError);
  c = small(10);
  c.outcome["not_a_term"] = 1.0;
  EXPECT_THROW(generate_cohort(c), ConfigError);
  c = small(10);
  c.accrual = 40;
  EXPECT_THROW(generate_cohort(c), ConfigError);
}

TEST(CounterfactualTruth, NullEffectIsExactlyOne) {
  SimConfig cfg = small(10);
  cfg.theta = 0.0;
  cfg.switch_effect = 1.5;
  const auto t = counterfactual_truth(cfg, 20000, 21.0);
  EXPECT_NEAR(t.hazard_ratio, 1.0, 1e-9);
  EXPECT_EQ(t.n, 20000u);
  EXPECT_EQ(t.km_rct.survival, t.km_oc.survival);
}

TEST(CounterfactualTruth, DegeneratePopulationGivesExpTheta) {
  SimConfig cfg;
  cfg.categorical = {{"only", {"a", "b"}, {1.0, 0.0}}};
  cfg.assignment = {{"Intercept", 0.0}};
  cfg.progression_effect = 0.0;
  cfg.theta = std::log(0.7);
  const auto t = counterfactual_truth(cfg, 100000, 1e9);
  // Cox estimate from 1e5 exact pairs: sd of log HR about sqrt(2 / 1e5).
  EXPECT_NEAR(t.log_hr, std::log(0.7), 4 * std::sqrt(2.0 / 1e5));
}

TEST(CounterfactualTruth, PaperRegimeIsNearItsSettingValue) {
  SimConfig cfg = small(10, 3);
  cfg.theta = std::log(0.94);
  const auto t = counterfactual_truth(cfg, 200000, 21.0);
  EXPECT_NEAR(t.hazard_ratio, 0.94, 0.02);
}

TEST(CounterfactualTruth, FromRecordsUsesTrialSubjectsOnly) {
  std::vector<TruthRecord> recs = {{"a", Arm::RCT, 5, 5, 3}, {"b", Arm::RCT, 8, 8, 9},
                                   {"c", Arm::OC, 1, 7, 1},  {"d", Arm::RCT, 30, 30, 25}};
  const auto t = counterfactual_truth(recs, 21.0);
  EXPECT_EQ(t.n, 3u);
  EXPECT_EQ(t.km_rct.time, (std::vector<double>{5, 8}));
  EXPECT_EQ(t.km_oc.time, (std::vector<double>{3, 9}));
}

TEST(SimConfigParsing, ShippedConfigAndOverrides) {
  const auto c = parse_sim_config(test::read_text(test::config_path("simulation.toml")));
  EXPECT_GE(c.n_per_arm, 1u);
  EXPECT_NO_THROW(c.validate());

  const auto d = parse_sim_config("n_per_arm = 12\ntheta = -0.5\n[switching]\nrate_rct = 0.01\n");
  EXPECT_EQ(d.n_per_arm, 12u);
  EXPECT_EQ(d.theta, -0.5);
  EXPECT_EQ(d.switch_rate_rct, 0.01);
  EXPECT_EQ(d.switch_rate_oc, SimConfig::defaults().switch_rate_oc);
  EXPECT_EQ(d.assignment, SimConfig::defaults().assignment);

  const auto j = parse_sim_config(R"({"n_per_arm": 4, "outcome": {"coefficients": {"gender=Male": 0.3}}})");
  EXPECT_EQ(j.n_per_arm, 4u);
  EXPECT_EQ(j.outcome.size(), 1u);

  EXPECT_THROW(parse_sim_config("bogus = 1\n"), ConfigError);
  EXPECT_THROW(parse_sim_config("[outcome]\nweibull_shape = \"x\"\n"), ConfigError);
  EXPECT_THROW(parse_sim_config("n_per_arm = -3\n"), ConfigError);
  EXPECT_THROW(parse_sim_config("{ not json"), ConfigError);
}

TEST(SimulatorInternals, WeibullInversionMatchesClosedForm) {
  const double shape = 1.3, scale = 20;
  const double e = 0.8;
  const std::vector<detail::Piece> one = {{std::numeric_limits<double>::infinity(), 0.4}};
  EXPECT_NEAR(detail::invert_weibull(e, shape, scale, one), scale * std::pow(e / std::exp(0.4), 1 / shape), 1e-12);
  // Two pieces: cumulative hazard at the returned time equals e.
  const std::vector<detail::Piece> two = {{5.0, 0.0}, {std::numeric_limits<double>::infinity(), 1.0}};
  const double t = detail::invert_weibull(e, shape, scale, two);
  const double h = std::pow(5.0 / scale, shape) + std::exp(1.0) * (std::pow(t / scale, shape) - std::pow(5.0 / scale, shape));
  EXPECT_GT(t, 5.0);
  EXPECT_NEAR(h, e, 1e-12);
}
