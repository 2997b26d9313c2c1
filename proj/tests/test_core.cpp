#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "ectrial/cohort.hpp"
#include "ectrial/csv.hpp"
#include "ectrial/emulation.hpp"
#include "ectrial/rng.hpp"
#include "ectrial/toml.hpp"
#include "support.hpp"

using namespace ectrial;
using ectrial::test::record;

// ---------------------------------------------------------------------------
// Philox

TEST(Philox, KnownAnswerVectors) {
  using P = Philox4x32;
  EXPECT_EQ(P::block({0, 0, 0, 0}, {0, 0}), (P::Block{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
  EXPECT_EQ(P::block({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu}),
            (P::Block{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
  EXPECT_EQ(P::block({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u}),
            (P::Block{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(Philox, FirstDrawsOfStreamZeroAreTheZeroBlock) {
  Philox4x32 g(0, 0);
  EXPECT_EQ(g(), 0x6627e8d5u);
  EXPECT_EQ(g(), 0xe169c58du);
  EXPECT_EQ(g(), 0xbc57ac4cu);
  EXPECT_EQ(g(), 0x9b00dbd8u);
}

TEST(Philox, StreamsAreReproducibleAndDistinct) {
  Philox4x32 a(42, 7), b(42, 7), c(42, 8), d(43, 7);
  int same_c = 0, same_d = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto x = a();
    EXPECT_EQ(x, b());
    same_c += x == c();
    same_d += x == d();
  }
  EXPECT_LT(same_c, 3);
  EXPECT_LT(same_d, 3);
}

TEST(Philox, UniformMomentsAndRange) {
  Philox4x32 g(mix_seed(5, 1), 0);
  const int n = 200000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = g.uniform();
    ASSERT_GT(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
    sq += u * u;
  }
  EXPECT_NEAR(sum / n, 0.5, 0.005);
  EXPECT_NEAR(sq / n - (sum / n) * (sum / n), 1.0 / 12.0, 0.002);
}

TEST(Philox, NormalAndCategorical) {
  Philox4x32 g(mix_seed(9, 2), 3);
  const int n = 100000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = g.normal(1.0, 2.0);
    sum += z;
    sq += z * z;
  }
  EXPECT_NEAR(sum / n, 1.0, 0.03);
  EXPECT_NEAR(std::sqrt(sq / n - (sum / n) * (sum / n)), 2.0, 0.03);

  const double probs[] = {0.2, 0.0, 0.5, 0.3};
  int counts[4] = {0, 0, 0, 0};
  for (int i = 0; i < n; ++i) ++counts[g.categorical(probs)];
  EXPECT_EQ(counts[1], 0);
  EXPECT_NEAR(counts[0] / double(n), 0.2, 0.01);
  EXPECT_NEAR(counts[2] / double(n), 0.5, 0.01);
}

TEST(Philox, BelowStaysInRange) {
  Philox4x32 g(1, 1);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 5000; ++i) {
    const auto k = g.below(7);
    ASSERT_LT(k, 7u);
    seen.insert(k);
  }
  EXPECT_EQ(seen.size(), 7u);
}

TEST(Philox, MixSeedSeparatesDomains) {
  EXPECT_NE(mix_seed(1, 0x5151), mix_seed(1, 0xB007));
  EXPECT_NE(mix_seed(1, 0x5151), mix_seed(2, 0x5151));
  EXPECT_EQ(mix_seed(1, 0x5151), mix_seed(1, 0x5151));
}

// ---------------------------------------------------------------------------
// CSV

TEST(Csv, QuotedFields) {
  const auto t = csv::parse("a,b,c\r\n\"x,y\",\"he said \"\"hi\"\"\",\"multi\nline\"\n1,,3\n");
  ASSERT_EQ(t.header, (std::vector<std::string>{"a", "b", "c"}));
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[0][0], "x,y");
  EXPECT_EQ(t.rows[0][1], "he said \"hi\"");
  EXPECT_EQ(t.rows[0][2], "multi\nline");
  EXPECT_EQ(t.rows[1][1], "");
  EXPECT_EQ(t.column("c"), 2u);
  EXPECT_FALSE(t.column("d"));
}

TEST(Csv, ByteOrderMarkAndMissingTrailingNewline) {
  const auto t = csv::parse("\xEF\xBB\xBFid,v\n1,2");
  EXPECT_EQ(t.header[0], "id");
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_EQ(t.rows[0][1], "2");
}

TEST(Csv, RaggedRowReportsLine) {
  try {
    csv::parse("a,b\n1,2\n3\n");
    FAIL();
  } catch (const csv::ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  EXPECT_THROW(csv::parse("a\n\"open\n"), csv::ParseError);
  EXPECT_THROW(csv::parse(""), csv::ParseError);
}

TEST(Csv, WriterRoundTrip) {
  std::ostringstream out;
  csv::Writer w(out);
  w.row({"h1", "h2"}).row({"a,b", "q\"q"}).row({"", "line\nbreak"});
  const auto t = csv::parse(out.str());
  EXPECT_EQ(t.rows[0], (std::vector<std::string>{"a,b", "q\"q"}));
  EXPECT_EQ(t.rows[1], (std::vector<std::string>{"", "line\nbreak"}));
}

TEST(Csv, NumbersRoundTripExactly) {
  Philox4x32 g(3, 0);
  for (int i = 0; i < 2000; ++i) {
    const double x = (g.uniform() - 0.5) * std::pow(10.0, static_cast<int>(g.below(20)) - 10);
    EXPECT_EQ(*csv::parse_number(csv::format_number(x)), x);
  }
  EXPECT_EQ(csv::format_number(0.1), "0.1");
  EXPECT_EQ(csv::format_number(21), "21");
  EXPECT_EQ(*csv::parse_number(" +2.5 "), 2.5);
  EXPECT_FALSE(csv::parse_number("2.5x"));
  EXPECT_FALSE(csv::parse_number(""));
}

// ---------------------------------------------------------------------------
// TOML subset

TEST(Toml, ScalarsTablesAndArrays) {
  const auto j = toml::parse(R"(
# comment
name = "x" # trailing
'literal key' = 'C:\path'
count = 3
ratio = -0.25
exp = 1e3
flag = true
list = [1, 2,
        3, ]
point = { a = 1, b = "two" }
dotted.key = 5

[section]
inner = false
[section.sub]
deep = "yes"

[[items]]
id = 1
[[items]]
id = 2
)");
  EXPECT_EQ(j["name"], "x");
  EXPECT_EQ(j["literal key"], "C:\\path");
  EXPECT_EQ(j["count"], 3);
  EXPECT_TRUE(j["count"].is_number_integer());
  EXPECT_DOUBLE_EQ(j["ratio"].get<double>(), -0.25);
  EXPECT_DOUBLE_EQ(j["exp"].get<double>(), 1000.0);
  EXPECT_EQ(j["flag"], true);
  EXPECT_EQ(j["list"], nlohmann::json({1, 2, 3}));
  EXPECT_EQ(j["point"]["b"], "two");
  EXPECT_EQ(j["dotted"]["key"], 5);
  EXPECT_EQ(j["section"]["inner"], false);
  EXPECT_EQ(j["section"]["sub"]["deep"], "yes");
  ASSERT_EQ(j["items"].size(), 2u);
  EXPECT_EQ(j["items"][1]["id"], 2);
  EXPECT_EQ(j.dump().find('\x01'), std::string::npos);
}

TEST(Toml, EscapesInBasicStrings) {
  const auto j = toml::parse("s = \"a\\tb\\\"c\\u00e9\"\n");
  EXPECT_EQ(j["s"], "a\tb\"c\xC3\xA9");
}

TEST(Toml, ErrorsCarryLineNumbers) {
  auto message = [](const std::string& text) {
    try {
      toml::parse(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_EQ(message("a = 1\na = 2\n"), "config line 2: duplicate key 'a'");
  EXPECT_NE(message("[t]\nx = 1\n[t]\n").find("config line 3"), std::string::npos);
  EXPECT_NE(message("[t]\nx = 1\n[t]\n").find("defined twice"), std::string::npos);
  EXPECT_NE(message("a = \"open\n").find("unterminated string"), std::string::npos);
  EXPECT_NE(message("a = 1 2\n").find("config line 1"), std::string::npos);
  EXPECT_NE(message("a = [1, 2\n").find("config line"), std::string::npos);
  EXPECT_NE(message("a = 0x10\n").find("invalid"), std::string::npos);
}

// ---------------------------------------------------------------------------
// Cohort

namespace {

std::vector<CovariateSpec> small_specs() {
  return {CovariateSpec::categorical("sex", {"F", "M"}), CovariateSpec::continuous("age")};
}

}  // namespace

TEST(Cohort, ValidatesAndCodesCovariates) {
  const std::vector<SubjectRecord> recs = {
      record("a", Arm::RCT, 10, true, 4.0, 2.0, {{"sex", std::string("M")}, {"age", 61.0}}),
      record("b", Arm::OC, 5, false, std::nullopt, std::nullopt, {{"sex", std::monostate{}}, {"age", 70.0}}),
  };
  const Cohort c = validate_cohort(recs, small_specs());
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[0].values[0], 1.0);
  EXPECT_EQ(c[0].values[1], 61.0);
  EXPECT_FALSE(c[1].values[0]);
  EXPECT_EQ(c.arm_counts(), (ArmCounts{1, 1}));

  const auto back = to_records(c);
  EXPECT_EQ(std::get<std::string>(back[0].baseline.at("sex")), "M");
  EXPECT_TRUE(std::holds_alternative<std::monostate>(back[1].baseline.at("sex")));
}

TEST(Cohort, RejectsInvalidSubjects) {
  auto specs = small_specs();
  auto bad = [&](SubjectRecord r, const std::string& field) {
    try {
      std::vector<SubjectRecord> v{r};
      validate_cohort(v, specs);
    } catch (const ValidationError& e) {
      EXPECT_EQ(e.field(), field);
      return;
    }
    ADD_FAILURE() << "accepted invalid subject for field " << field;
  };
  bad(record("x", Arm::RCT, -1, false), "followup_months");
  bad(record("x", Arm::RCT, 0, false), "followup_months");
  bad(record("x", Arm::RCT, 5, false, 6.0), "switch_months");
  bad(record("x", Arm::RCT, 5, false, std::nullopt, 7.0), "progression_months");
  bad(record("x", Arm::RCT, 5, false, std::nullopt, std::nullopt, {{"sex", std::string("U")}}), "sex");
  bad(record("x", Arm::RCT, 5, false, std::nullopt, std::nullopt, {{"height", 1.0}}), "height");
  bad(record("x", Arm::RCT, 5, false, std::nullopt, std::nullopt, {{"age", std::string("old")}}), "age");
  bad(record("", Arm::RCT, 5, false), "id");

  std::vector<SubjectRecord> dup{record("d", Arm::RCT, 1, false), record("d", Arm::OC, 1, false)};
  EXPECT_THROW(validate_cohort(dup, specs), ValidationError);

  auto twice = specs;
  twice.push_back(CovariateSpec::continuous("age"));
  EXPECT_THROW(validate_cohort(std::vector<SubjectRecord>{}, twice), ConfigError);
  EXPECT_THROW(CovariateSpec::categorical("one", {"a"}).validate(), ConfigError);
  EXPECT_THROW(CovariateSpec::categorical("ref", {"a", "b"}, {}, "c").validate(), ConfigError);
}

TEST(Cohort, CsvRoundTrip) {
  const std::vector<SubjectRecord> recs = {
      record("a,1", Arm::RCT, 10.25, true, 4.0, 2.0, {{"sex", std::string("M")}, {"age", 61.5}}),
      record("b", Arm::OC, 5, false, std::nullopt, std::nullopt, {{"age", 70.0}}),
  };
  const Cohort c = validate_cohort(recs, small_specs());
  std::ostringstream out;
  write_cohort_csv(out, c);
  const Cohort back = cohort_from_table(csv::parse(out.str()), small_specs());
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].id, c[i].id);
    EXPECT_EQ(back[i].arm, c[i].arm);
    EXPECT_EQ(back[i].followup_time, c[i].followup_time);
    EXPECT_EQ(back[i].event, c[i].event);
    EXPECT_EQ(back[i].switch_time, c[i].switch_time);
    EXPECT_EQ(back[i].progression_time, c[i].progression_time);
    EXPECT_EQ(back[i].values, c[i].values);
  }
}

TEST(Cohort, CsvErrors) {
  const auto specs = small_specs();
  EXPECT_THROW(cohort_from_table(csv::parse("id,arm\n"), specs), csv::ParseError);
  const std::string head = "id,arm,followup_months,event,switch_months,progression_months,sex\n";
  EXPECT_THROW(cohort_from_table(csv::parse(head + "a,XX,1,0,,,F\n"), specs), csv::ParseError);
  EXPECT_THROW(cohort_from_table(csv::parse(head + "a,RCT,1,2,,,F\n"), specs), csv::ParseError);
  EXPECT_THROW(cohort_from_table(csv::parse(head + "a,RCT,z,0,,,F\n"), specs), csv::ParseError);
  const std::string extra = "id,arm,followup_months,event,switch_months,progression_months,zip\n";
  EXPECT_THROW(cohort_from_table(csv::parse(extra + "a,RCT,1,0,,,1\n"), specs), ValidationError);
}

TEST(Cohort, AdoptSpecsMatchesByName) {
  const std::vector<SubjectRecord> recs = {
      record("a", Arm::RCT, 1, false, std::nullopt, std::nullopt, {{"sex", std::string("M")}, {"age", 61.0}})};
  const Cohort c = validate_cohort(recs, small_specs());
  std::vector<CovariateSpec> target = {CovariateSpec::continuous("age"),
                                       CovariateSpec::categorical("sex", {"M", "F"})};
  const Cohort d = adopt_specs(c, target);
  EXPECT_EQ(d[0].values[0], 61.0);
  EXPECT_EQ(d[0].values[1], 0.0);
  EXPECT_THROW(adopt_specs(c, {CovariateSpec::continuous("bmi")}), ConfigError);
  EXPECT_THROW(adopt_specs(c, {CovariateSpec::categorical("sex", {"M", "X"})}), ConfigError);
}

TEST(CountingProcess, SplitsAtGridAndOnset) {
  const std::vector<SubjectRecord> recs = {record("a", Arm::RCT, 3.5, true, std::nullopt, 1.25)};
  const Cohort c = validate_cohort(recs, {});
  const TimeVarying tv[] = {TimeVarying::progression()};
  const auto cp = to_counting_process(c, GridSpec{1.0}, tv);
  const std::vector<double> stops = {1.0, 1.25, 2.0, 3.0, 3.5};
  ASSERT_EQ(cp.intervals.size(), stops.size());
  for (std::size_t k = 0; k < stops.size(); ++k) {
    EXPECT_EQ(cp.intervals[k].stop, stops[k]);
    EXPECT_EQ(cp.intervals[k].event_at_stop, k + 1 == stops.size());
    EXPECT_EQ(cp.intervals[k].indicator(0), stops[k] > 1.25);
  }
  EXPECT_EQ(cp.tv_names, std::vector<std::string>{"progression"});
}

TEST(CountingProcess, RandomSubjectsAreTiledExactly) {
  Philox4x32 g(11, 0);
  std::vector<SubjectRecord> recs;
  for (int i = 0; i < 300; ++i) {
    const double fu = 0.01 + 30.0 * g.uniform();
    std::optional<double> prog;
    if (g.uniform() < 0.5) prog = fu * g.uniform();
    if (g.uniform() < 0.1) prog = fu;
    if (g.uniform() < 0.05) prog = 0.0;
    recs.push_back(record("s" + std::to_string(i), i % 2 ? Arm::OC : Arm::RCT, fu, g.uniform() < 0.5, std::nullopt, prog));
  }
  const Cohort c = validate_cohort(recs, {});
  const TimeVarying tv[] = {TimeVarying::progression()};
  const double step = 0.75;
  const auto cp = to_counting_process(c, GridSpec{step}, tv);
  std::size_t k = 0;
  for (std::uint32_t s = 0; s < c.size(); ++s) {
    double at = 0.0;
    int events = 0;
    for (; k < cp.intervals.size() && cp.intervals[k].subject == s; ++k) {
      const auto& iv = cp.intervals[k];
      ASSERT_EQ(iv.start, at);
      ASSERT_GT(iv.stop, iv.start);
      events += iv.event_at_stop;
      const auto& p = c[s].progression_time;
      ASSERT_EQ(iv.indicator(0), p && *p < iv.stop);
      if (p) {
        ASSERT_FALSE(iv.start < *p && *p < iv.stop);
      }
      ASSERT_LE(std::floor(iv.stop / step - 1e-12), std::floor(iv.start / step + 1e-12) + 1);
      at = iv.stop;
    }
    ASSERT_EQ(at, c[s].followup_time);
    ASSERT_EQ(events, c[s].event ? 1 : 0);
  }
  EXPECT_EQ(k, cp.intervals.size());
  EXPECT_THROW(to_counting_process(c, GridSpec{0.0}, tv), ConfigError);
}

// ---------------------------------------------------------------------------
// Windowed observations and eligibility

TEST(WindowedObservation, ClosestThenWorst) {
  const std::vector<RawObservation> obs = {
      {"p", "ecog", 0.0, -20}, {"p", "ecog", 1.0, -3}, {"p", "ecog", 2.0, 3},
      {"p", "ecog", 4.0, -31}, {"p", "other", 9.0, 0},
  };
  auto v = select_windowed_observation(obs, "ecog", {-30, 7});
  ASSERT_TRUE(v);
  EXPECT_EQ(std::get<double>(*v), 2.0);
  v = select_windowed_observation(obs, "ecog", {-30, 0});
  EXPECT_EQ(std::get<double>(*v), 1.0);
  EXPECT_FALSE(select_windowed_observation(obs, "ecog", {10, 20}));
  EXPECT_FALSE(select_windowed_observation(obs, "missing", {-30, 7}));
  EXPECT_THROW(select_windowed_observation(obs, "ecog", {7, -30}), std::invalid_argument);
}

TEST(WindowedObservation, SameDayTakesLargest) {
  const std::vector<RawObservation> obs = {{"p", "ecog", 1.0, 0}, {"p", "ecog", 2.0, 0}, {"p", "ecog", 0.0, 0}};
  EXPECT_EQ(std::get<double>(*select_windowed_observation(obs, "ecog", {-30, 7})), 2.0);
}

namespace {

Cohort eligibility_cohort() {
  std::vector<SubjectRecord> recs;
  const char* sex[] = {"F", "M"};
  for (int i = 0; i < 10; ++i)
    recs.push_back(record("s" + std::to_string(i), i < 4 ? Arm::RCT : Arm::OC, 1.0 + i, i % 2 == 0, std::nullopt,
                          std::nullopt, {{"sex", std::string(sex[i % 2])}, {"age", 50.0 + 3 * i}}));
  return validate_cohort(recs, small_specs());
}

}  // namespace

TEST(Eligibility, AlwaysKeepsEveryone) {
  const Cohort c = eligibility_cohort();
  const std::vector<EligibilityRule> rules = {EligibilityRule::always("all")};
  const auto r = apply_eligibility(c, {}, rules);
  EXPECT_EQ(r.cohort.size(), 10u);
  EXPECT_EQ(r.attrition.input_count, 10u);
  ASSERT_EQ(r.attrition.rows.size(), 1u);
  EXPECT_EQ(r.attrition.rows[0].remaining, 10u);
}

TEST(Eligibility, SequentialAttrition) {
  const Cohort c = eligibility_cohort();
  EligibilityRule male;
  male.name = "male";
  male.type = EligibilityRule::Type::FieldInSet;
  male.field = "sex";
  male.values = {"M"};
  EligibilityRule age;
  age.name = "age <= 70";
  age.type = EligibilityRule::Type::FieldComparison;
  age.field = "age";
  age.op = Comparison::LessEqual;
  age.value = 70;
  const std::vector<EligibilityRule> rules = {male, age};
  const auto r = apply_eligibility(c, {}, rules);
  EXPECT_EQ(r.attrition.rows[0].remaining, 5u);
  EXPECT_EQ(r.attrition.rows[1].remaining, 3u);  // ages 53, 59, 65
  EXPECT_EQ(r.cohort.size(), 3u);
  for (const auto& s : r.cohort.subjects()) EXPECT_EQ(s.values[0], 1.0);

  std::ostringstream out;
  write_attrition_csv(out, r.attrition);
  EXPECT_EQ(out.str(), "criterion,remaining\nTotal patients in the cohort,10\nmale,5\nage <= 70,3\n");
}

TEST(Eligibility, ArmTargetedRulesCountOnlyThatArm) {
  const Cohort c = eligibility_cohort();
  EligibilityRule r;
  r.name = "OC follow-up over 6";
  r.type = EligibilityRule::Type::FieldRange;
  r.field = "followup_months";
  r.lo = 6.5;
  r.hi = 100;
  r.arms = {Arm::OC};
  const std::vector<EligibilityRule> rules = {r};
  const auto res = apply_eligibility(c, {}, rules);
  EXPECT_EQ(res.attrition.input_count, 6u);
  EXPECT_EQ(res.attrition.rows[0].remaining, 4u);
  EXPECT_EQ(res.cohort.arm_counts(), (ArmCounts{4, 4}));
}

TEST(Eligibility, WindowedObservationRule) {
  const Cohort c = eligibility_cohort();
  std::vector<RawObservation> obs;
  for (int i = 0; i < 10; ++i) obs.push_back({"s" + std::to_string(i), "ecog", double(i % 3), -5});
  obs.push_back({"s0", "ecog", 2.0, -2});
  EligibilityRule r;
  r.name = "ecog 0-1";
  r.type = EligibilityRule::Type::WindowedObservation;
  r.kind = "ecog";
  r.window = {-30, 7};
  r.values = {"0", "1"};
  const std::vector<EligibilityRule> rules = {r};
  const auto res = apply_eligibility(c, obs, rules);
  // s0 has a closer value of 2; s2, s5, s8 have 2.
  EXPECT_EQ(res.cohort.size(), 6u);
}

TEST(Eligibility, MissingValuesAndConfigErrors) {
  const std::vector<SubjectRecord> recs = {record("a", Arm::RCT, 1, false, std::nullopt, std::nullopt, {{"age", 50.0}}),
                                           record("b", Arm::OC, 1, false)};
  const Cohort c = validate_cohort(recs, small_specs());
  EligibilityRule r;
  r.name = "age";
  r.type = EligibilityRule::Type::FieldComparison;
  r.field = "age";
  r.op = Comparison::Greater;
  r.value = 0;
  std::vector<EligibilityRule> rules = {r};
  EXPECT_EQ(apply_eligibility(c, {}, rules).cohort.size(), 1u);
  rules[0].allow_missing = true;
  EXPECT_EQ(apply_eligibility(c, {}, rules).cohort.size(), 2u);

  rules[0].field = "weight";
  EXPECT_THROW(apply_eligibility(c, {}, rules), ConfigError);
  rules = {EligibilityRule::always("x"), EligibilityRule::always("x")};
  EXPECT_THROW(apply_eligibility(c, {}, rules), ConfigError);
  EXPECT_THROW(apply_eligibility(c, {}, std::vector<EligibilityRule>{}), ConfigError);
  EligibilityRule w;
  w.name = "w";
  w.type = EligibilityRule::Type::WindowedObservation;
  w.kind = "lab";
  rules = {w};
  EXPECT_THROW(apply_eligibility(c, {}, rules), ConfigError);
}

TEST(Observations, CsvParsing) {
  const auto obs = observations_from_table(csv::parse("subject_id,kind,value,offset_days\na,ecog,1,-3\na,stage,IV,0\n"));
  ASSERT_EQ(obs.size(), 2u);
  EXPECT_EQ(std::get<double>(obs[0].value), 1.0);
  EXPECT_EQ(std::get<std::string>(obs[1].value), "IV");
  EXPECT_EQ(obs[0].offset_days, -3);
  EXPECT_THROW(observations_from_table(csv::parse("subject_id,kind,value,offset_days\na,ecog,1,2.5\n")),
               csv::ParseError);
}

// ---------------------------------------------------------------------------
// Imputation

TEST(Imputation, MedianModeAndDrop) {
  auto specs = small_specs();
  specs[0].roles = {Role::PsModel};
  specs[1].roles = {Role::PsModel, Role::Balance};
  specs[1].missing_policy = MissingPolicy::ImputeMedian;
  specs.push_back(CovariateSpec::continuous("lab", {Role::PsModel}));
  std::vector<SubjectRecord> recs;
  const double ages[] = {40, 50, 60, 70};
  for (int i = 0; i < 10; ++i) {
    std::map<std::string, RawValue> b;
    if (i < 4) b["age"] = ages[i];
    if (i != 9) b["sex"] = std::string(i < 6 ? "M" : "F");
    if (i < 5) b["lab"] = double(i);
    recs.push_back(record("s" + std::to_string(i), Arm::RCT, 1, false, std::nullopt, std::nullopt, b));
  }
  const Cohort c = validate_cohort(recs, specs);
  // age is 60% missing, lab 50%, sex 10%
  const auto res = impute_missing(c, 0.7);
  ASSERT_EQ(res.report.rows.size(), 3u);
  EXPECT_EQ(res.report.rows[0].action, ImputationAction::ImputedMode);
  EXPECT_EQ(res.report.rows[0].fill_label, "M");
  EXPECT_EQ(res.report.rows[1].action, ImputationAction::ImputedMedian);
  EXPECT_EQ(*res.report.rows[1].fill_value, 55.0);
  EXPECT_EQ(res.report.rows[2].action, ImputationAction::ImputedMedian);
  EXPECT_DOUBLE_EQ(res.report.rows[1].missing_fraction, 0.6);
  for (std::size_t i = 0; i < 10; ++i) {
    ASSERT_TRUE(res.cohort[i].values[1]);
    if (i < 4) {
      EXPECT_EQ(*res.cohort[i].values[1], ages[i]);
    }
  }
  EXPECT_EQ(*res.cohort[9].values[0], 1.0);

  const auto strict = impute_missing(c, 0.3);
  EXPECT_EQ(strict.report.rows[1].action, ImputationAction::Dropped);
  EXPECT_EQ(strict.report.rows[2].action, ImputationAction::Dropped);
  EXPECT_TRUE(strict.cohort.specs()[1].roles.empty());
  EXPECT_FALSE(strict.cohort[9].values[1]);
  EXPECT_EQ(strict.report.rows[0].action, ImputationAction::ImputedMode);
}

TEST(Imputation, CompleteDataIsUntouched) {
  const Cohort c = eligibility_cohort();
  const auto res = impute_missing(c);
  for (const auto& row : res.report.rows) EXPECT_EQ(row.action, ImputationAction::None);
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_EQ(res.cohort[i].values, c[i].values);
}

TEST(Imputation, ModeTieUsesFirstDeclaredLevel) {
  std::vector<SubjectRecord> recs = {
      record("a", Arm::RCT, 1, false, std::nullopt, std::nullopt, {{"sex", std::string("M")}}),
      record("b", Arm::RCT, 1, false, std::nullopt, std::nullopt, {{"sex", std::string("F")}}),
      record("c", Arm::RCT, 1, false),
  };
  const auto res = impute_missing(validate_cohort(recs, small_specs()), 0.5);
  EXPECT_EQ(res.report.rows[0].fill_label, "F");
  EXPECT_FALSE(res.report.rows[0].note.empty());
}
