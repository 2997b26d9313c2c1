#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ectrial/cohort.hpp"
#include "ectrial/cox.hpp"
#include "ectrial/csv.hpp"
#include "ectrial/design.hpp"
#include "ectrial/errors.hpp"
#include "ectrial/logistic.hpp"
#include "ectrial/rng.hpp"
#include "ectrial/survival.hpp"
#include "ectrial/toml.hpp"

namespace ectrial {

struct CategoricalGenerator {
  std::string name;
  std::vector<std::string> levels;  // first level is the reference
  std::vector<double> probs;
};

/// Log-normal continuous covariate.
struct ContinuousGenerator {
  std::string name;
  double meanlog = 0.0;
  double sdlog = 1.0;
  Transform transform = Transform::None;  // how model terms see it
};

using Coefficients = std::map<std::string, double>;  // design-term name -> coefficient

/// Two-arm data-generating process with known no-switch potential outcomes.
///
/// Death hazard: (shape/scale)(t/scale)^(shape-1) * exp(outcome terms
/// + theta [RCT] + progression_effect [progressed by t] + delta [switched by t]).
/// Progression: exponential clock. Switch: exponential clock whose rate jumps
/// at progression. Arm membership: logistic model on baseline terms, sampled
/// until each arm holds n_per_arm subjects.
struct SimConfig {
  std::size_t n_per_arm = 1000;
  std::uint64_t seed = 1;

  std::vector<CategoricalGenerator> categorical;
  std::vector<ContinuousGenerator> continuous;

  Coefficients assignment;

  double weibull_shape = 1.2;
  double weibull_scale = 26.0;
  Coefficients outcome;
  double theta = 0.0;
  double progression_effect = 0.25;
  double switch_effect = -0.2;  // delta

  double progression_rate = 0.10;
  Coefficients progression;

  double switch_rate_rct = 0.035;
  double switch_rate_oc = 0.045;
  double switch_progression_effect = 1.2;
  Coefficients switching;

  double max_followup = 36.0;
  double accrual = 12.0;  // administrative censoring uniform on [max - accrual, max]

  /// Covariates, assignment coefficients and effect sizes loosely shaped on
  /// a pooled trial-control plus routine-care first-line NSCLC population.
  static SimConfig defaults() {
    SimConfig c;
    c.categorical = {
        {"age_group", {"<65", "65-75", ">=75"}, {0.396, 0.380, 0.224}},
        {"gender", {"Female", "Male"}, {0.407, 0.593}},
        {"race", {"Asian", "White", "Other"}, {0.036, 0.733, 0.231}},
        {"smoking", {"No", "Yes"}, {0.078, 0.922}},
        {"tumor_type", {"De novo", "Recurrent"}, {0.674, 0.326}},
        {"histology", {"Non-squamous", "Squamous"}, {0.665, 0.335}},
        {"treatment", {"Carboplatin+Pacli/Nab-pacli", "Platinum+Pemetrexed"}, {0.584, 0.416}},
    };
    c.continuous = {{"time_from_dx", std::log(1.3), 0.78, Transform::Log}};
    c.assignment = {
        {"Intercept", 0.999},
        {"age_group=65-75", -0.509},
        {"age_group=>=75", -1.342},
        {"gender=Male", 0.559},
        {"race=White", -2.094},
        {"race=Other", -3.959},
        {"smoking=Yes", -0.183},
        {"tumor_type=Recurrent", -2.446},
        {"log(time_from_dx)", 0.840},
        {"histology=Squamous", 0.076},
        {"treatment=Platinum+Pemetrexed", -0.832},
    };
    c.outcome = {
        {"age_group=65-75", 0.15}, {"age_group=>=75", 0.35}, {"gender=Male", 0.15},
        {"race=Other", 0.10},      {"smoking=Yes", 0.10},     {"tumor_type=Recurrent", -0.20},
        {"histology=Squamous", 0.10}, {"treatment=Platinum+Pemetrexed", -0.10},
    };
    c.progression = {{"histology=Squamous", 0.15}, {"tumor_type=Recurrent", 0.10}};
    c.switching = {{"age_group=65-75", -0.10}, {"age_group=>=75", -0.40}, {"race=Other", -0.20},
                   {"histology=Squamous", 0.25}};
    return c;
  }

  void validate() const {
    if (n_per_arm < 1) throw ConfigError("simulation: n_per_arm must be >= 1");
    for (const auto& g : categorical) {
      if (g.levels.size() < 2 || g.levels.size() != g.probs.size())
        throw ConfigError("simulation: covariate '" + g.name + "' needs >= 2 levels with one probability each");
      double sum = 0.0;
      for (double p : g.probs) {
        if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("simulation: probabilities of '" + g.name + "' must be in [0,1]");
        sum += p;
      }
      if (std::abs(sum - 1.0) > 1e-6) throw ConfigError("simulation: probabilities of '" + g.name + "' must sum to 1");
    }
    for (const auto& g : continuous)
      if (!(g.sdlog >= 0.0) || !std::isfinite(g.meanlog))
        throw ConfigError("simulation: invalid log-normal parameters for '" + g.name + "'");
    if (!(weibull_shape > 0.0) || !(weibull_scale > 0.0)) throw ConfigError("simulation: Weibull shape/scale must be > 0");
    if (!(progression_rate >= 0.0) || !(switch_rate_rct >= 0.0) || !(switch_rate_oc >= 0.0))
      throw ConfigError("simulation: rates must be >= 0");
    if (!(max_followup > 0.0) || !(accrual >= 0.0) || accrual >= max_followup)
      throw ConfigError("simulation: need max_followup > accrual >= 0");
  }

  std::vector<CovariateSpec> covariate_specs() const {
    std::vector<CovariateSpec> specs;
    for (const auto& g : categorical) specs.push_back(CovariateSpec::categorical(g.name, g.levels));
    for (const auto& g : continuous) specs.push_back(CovariateSpec::continuous(g.name, {}, g.transform));
    return specs;
  }
};

/// Hidden no-switch potential outcomes for one simulated subject.
struct TruthRecord {
  std::string id;
  Arm arm = Arm::RCT;
  double noswitch_time = 0.0;      // under the subject's own arm
  double noswitch_time_rct = 0.0;  // as if in the trial setting
  double noswitch_time_oc = 0.0;   // as if in routine care
};

struct SimulatedCohort {
  Cohort cohort;
  std::vector<TruthRecord> truth;
};

namespace detail {

/// Linear predictor over named design terms for one candidate.
class TermEvaluator {
 public:
  TermEvaluator(const Cohort& schema, const Coefficients& coef, const char* what) {
    std::vector<std::size_t> all(schema.specs().size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const auto terms = make_terms(schema, all, true);
    for (const auto& [name, value] : coef) {
      auto it = std::find_if(terms.begin(), terms.end(), [&](const DesignTerm& t) { return t.name == name; });
      if (it == terms.end()) throw ConfigError(std::string("simulation: unknown ") + what + " term '" + name + "'");
      terms_.push_back(*it);
      coef_.push_back(value);
    }
  }

  double operator()(const Subject& s) const {
    double lp = 0.0;
    for (std::size_t j = 0; j < terms_.size(); ++j) lp += coef_[j] * term_value(terms_[j], s);
    return lp;
  }

 private:
  std::vector<DesignTerm> terms_;
  std::vector<double> coef_;
};

struct Piece {
  double until;  // end of piece (infinity for the last)
  double log_mult;
};

/// Inverts a Weibull cumulative hazard with piecewise-constant multipliers.
inline double invert_weibull(double e, double shape, double scale, const std::vector<Piece>& pieces) {
  auto cumhaz0 = [&](double t) { return std::pow(t / scale, shape); };
  double a = 0.0, remaining = e;
  for (const auto& p : pieces) {
    const double m = std::exp(p.log_mult);
    const double h0a = cumhaz0(a);
    const double span = std::isinf(p.until) ? std::numeric_limits<double>::infinity() : m * (cumhaz0(p.until) - h0a);
    if (remaining < span) return scale * std::pow(h0a + remaining / m, 1.0 / shape);
    remaining -= span;
    a = p.until;
  }
  return std::numeric_limits<double>::infinity();
}

struct Draw {
  Subject subject;
  double t_observed_arm;  // latent death time with switching
  double t0_rct, t0_oc;   // latent death times without switching
  double switch_time, progression_time, censor_time;
};

class Generator {
 public:
  explicit Generator(const SimConfig& cfg)
      : cfg_(cfg),
        schema_(cfg.covariate_specs(), {}),
        assign_(schema_, cfg.assignment, "assignment"),
        outcome_(schema_, cfg.outcome, "outcome"),
        progression_(schema_, cfg.progression, "progression"),
        switching_(schema_, cfg.switching, "switch") {}

  const Cohort& schema() const { return schema_; }

  /// Candidate `index` of the stream; its arm comes from the assignment model.
  Draw draw(std::uint64_t key, std::uint64_t index) const {
    Philox4x32 rng(key, index);
    Draw d;
    Subject& s = d.subject;
    s.values.reserve(cfg_.categorical.size() + cfg_.continuous.size());
    for (const auto& g : cfg_.categorical) s.values.push_back(static_cast<double>(rng.categorical(g.probs)));
    for (const auto& g : cfg_.continuous) s.values.push_back(std::exp(rng.normal(g.meanlog, g.sdlog)));
    s.arm = rng.bernoulli(logistic(assign_(s))) ? Arm::RCT : Arm::OC;

    const double e_death = -std::log(rng.uniform());
    const double e_switch = -std::log(rng.uniform());
    const double u_prog = rng.uniform();
    const double u_cens = rng.uniform();

    const double prog_rate = cfg_.progression_rate * std::exp(progression_(s));
    d.progression_time = prog_rate > 0.0 ? -std::log(u_prog) / prog_rate : std::numeric_limits<double>::infinity();

    const double base_switch = s.arm == Arm::RCT ? cfg_.switch_rate_rct : cfg_.switch_rate_oc;
    const double r_pre = base_switch * std::exp(switching_(s));
    const double r_post = r_pre * std::exp(cfg_.switch_progression_effect);
    const double P = d.progression_time;
    if (r_pre > 0.0 && e_switch < r_pre * P)
      d.switch_time = e_switch / r_pre;
    else if (r_post > 0.0 && std::isfinite(P))
      d.switch_time = P + (e_switch - r_pre * P) / r_post;
    else
      d.switch_time = std::numeric_limits<double>::infinity();

    const double lp = outcome_(s);
    auto noswitch = [&](Arm a) {
      const double base = lp + (a == Arm::RCT ? cfg_.theta : 0.0);
      std::vector<Piece> pieces;
      if (std::isfinite(P)) pieces.push_back({P, base});
      pieces.push_back({std::numeric_limits<double>::infinity(), base + (std::isfinite(P) ? cfg_.progression_effect : 0.0)});
      return invert_weibull(e_death, cfg_.weibull_shape, cfg_.weibull_scale, pieces);
    };
    d.t0_rct = noswitch(Arm::RCT);
    d.t0_oc = noswitch(Arm::OC);

    {
      const double base = lp + (s.arm == Arm::RCT ? cfg_.theta : 0.0);
      const double S = d.switch_time;
      std::vector<Piece> pieces;
      const double first = std::min(P, S), second = std::max(P, S);
      auto mult_after = [&](double t) {
        return base + (P <= t && std::isfinite(P) ? cfg_.progression_effect : 0.0) +
               (S <= t && std::isfinite(S) ? cfg_.switch_effect : 0.0);
      };
      if (std::isfinite(first)) pieces.push_back({first, base});
      if (std::isfinite(second) && second > first) pieces.push_back({second, mult_after(first)});
      pieces.push_back({std::numeric_limits<double>::infinity(),
                        std::isfinite(second) ? mult_after(second) : (std::isfinite(first) ? mult_after(first) : base)});
      d.t_observed_arm = invert_weibull(e_death, cfg_.weibull_shape, cfg_.weibull_scale, pieces);
    }
    d.censor_time = cfg_.max_followup - cfg_.accrual * u_cens;
    return d;
  }

 private:
  const SimConfig& cfg_;
  Cohort schema_;
  detail::TermEvaluator assign_, outcome_, progression_, switching_;
};

}  // namespace detail

/// Simulates n_per_arm subjects per arm with observed switching and their
/// hidden no-switch potential outcomes. Candidate i uses Philox stream i, so
/// the output is fixed by (config, seed).
inline SimulatedCohort generate_cohort(const SimConfig& cfg) {
  cfg.validate();
  detail::Generator gen(cfg);
  const std::uint64_t key = mix_seed(cfg.seed, 0x5151);
  std::vector<Subject> arms[2];
  std::vector<TruthRecord> truth_arms[2];
  const std::size_t n = cfg.n_per_arm;
  std::uint64_t index = 0;
  const std::uint64_t cap = 1000ull * n + 1000000ull;
  while (arms[0].size() < n || arms[1].size() < n) {
    if (index >= cap) throw ConfigError("simulation: assignment model almost never produces one of the arms");
    detail::Draw d = gen.draw(key, index);
    const int a = d.subject.arm == Arm::RCT ? 0 : 1;
    if (arms[a].size() < n) {
      Subject& s = d.subject;
      s.id = (a == 0 ? "R" : "O") + std::to_string(arms[a].size() + 1);
      const double end = std::min(d.t_observed_arm, d.censor_time);
      s.followup_time = end;
      s.event = d.t_observed_arm <= d.censor_time;
      if (d.switch_time < end) s.switch_time = d.switch_time;
      if (d.progression_time < end) s.progression_time = d.progression_time;
      truth_arms[a].push_back({s.id, s.arm, a == 0 ? d.t0_rct : d.t0_oc, d.t0_rct, d.t0_oc});
      arms[a].push_back(std::move(s));
    }
    ++index;
  }
  std::vector<Subject> subjects = std::move(arms[0]);
  subjects.insert(subjects.end(), std::make_move_iterator(arms[1].begin()), std::make_move_iterator(arms[1].end()));
  std::vector<TruthRecord> truth = std::move(truth_arms[0]);
  truth.insert(truth.end(), truth_arms[1].begin(), truth_arms[1].end());
  return {Cohort(cfg.covariate_specs(), std::move(subjects)), std::move(truth)};
}

struct CounterfactualTruth {
  double hazard_ratio = 1.0;  // RCT vs OC, no switching, trial covariate mixture
  double log_hr = 0.0;
  std::size_t n = 0;
  KmCurve km_rct;
  KmCurve km_oc;
};

/// Marginal no-switch hazard ratio in the trial (ATT) covariate mixture:
/// both potential outcomes of `n_large` trial-arm subjects, followed to
/// `horizon`, analysed with an unweighted Cox model.
inline CounterfactualTruth counterfactual_truth(const std::vector<TruthRecord>& trial_truth, double horizon) {
  SurvivalData sd;
  std::uint32_t id = 0;
  for (const auto& t : trial_truth) {
    if (t.arm != Arm::RCT) continue;
    sd.push(0.0, std::min(t.noswitch_time_rct, horizon), t.noswitch_time_rct <= horizon, 1.0, Arm::RCT, id);
    sd.push(0.0, std::min(t.noswitch_time_oc, horizon), t.noswitch_time_oc <= horizon, 1.0, Arm::OC, id);
    ++id;
  }
  CoxOptions opt;
  opt.robust = false;
  opt.tol = 1e-6;
  CounterfactualTruth out;
  out.n = id;
  const CoxFit fit = fit_arm_cox(sd, opt);
  out.log_hr = fit.beta(0);
  out.hazard_ratio = std::exp(out.log_hr);
  out.km_rct = weighted_km(sd.only(Arm::RCT));
  out.km_oc = weighted_km(sd.only(Arm::OC));
  return out;
}

/// Simulates `n_large` trial-arm subjects from `cfg` and returns the truth.
inline CounterfactualTruth counterfactual_truth(const SimConfig& cfg, std::size_t n_large, double horizon) {
  SimConfig big = cfg;
  big.validate();
  detail::Generator gen(big);
  const std::uint64_t key = mix_seed(cfg.seed ^ 0x7275746875ull, 0x5151);
  std::vector<TruthRecord> truth;
  truth.reserve(n_large);
  for (std::uint64_t i = 0; truth.size() < n_large; ++i) {
    if (i > 1000ull * n_large + 1000000ull) throw ConfigError("simulation: trial arm is almost never assigned");
    const auto d = gen.draw(key, i);
    if (d.subject.arm == Arm::RCT) truth.push_back({"", Arm::RCT, d.t0_rct, d.t0_rct, d.t0_oc});
  }
  return counterfactual_truth(truth, horizon);
}

/// Reads a simulation config (TOML, or JSON with a leading '{'). Keys left
/// out keep their defaults; a covariate or coefficient list given in the file
/// replaces the default list as a whole.
inline SimConfig parse_sim_config(std::string_view text) {
  const std::size_t first = text.find_first_not_of(" \t\r\n");
  nlohmann::json doc;
  if (first != std::string_view::npos && text[first] == '{') {
    try {
      doc = nlohmann::json::parse(text.substr(first));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(std::string("simulation config: invalid JSON: ") + e.what());
    }
  } else {
    doc = toml::parse(text);
  }
  SimConfig c = SimConfig::defaults();

  auto fail = [](const std::string& what) -> void { throw ConfigError("simulation config: " + what); };
  auto check_keys = [&](const nlohmann::json& obj, const std::string& path, std::initializer_list<const char*> keys) {
    if (!obj.is_object()) fail("'" + path + "' must be a table");
    for (auto it = obj.begin(); it != obj.end(); ++it)
      if (std::find_if(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; }) == keys.end())
        fail("unknown key '" + (path.empty() ? it.key() : path + "." + it.key()) + "'");
  };
  auto num = [&](const nlohmann::json& obj, const char* key, double& out) {
    if (!obj.contains(key)) return;
    if (!obj[key].is_number()) fail(std::string("'") + key + "' must be a number");
    out = obj[key].get<double>();
  };
  auto coefs = [&](const nlohmann::json& obj, Coefficients& out) {
    if (!obj.contains("coefficients")) return;
    const auto& t = obj["coefficients"];
    if (!t.is_object()) fail("'coefficients' must be a table of term = value");
    out.clear();
    for (auto it = t.begin(); it != t.end(); ++it) {
      if (!it->is_number()) fail("coefficient '" + it.key() + "' must be a number");
      out[it.key()] = it->get<double>();
    }
  };

  check_keys(doc, "", {"n_per_arm", "seed", "max_followup", "accrual", "theta", "switch_effect", "outcome",
                       "progression", "switching", "assignment", "categorical", "continuous"});
  if (doc.contains("n_per_arm")) {
    if (!doc["n_per_arm"].is_number_integer() || doc["n_per_arm"].get<long long>() < 0)
      fail("'n_per_arm' must be a non-negative integer");
    c.n_per_arm = doc["n_per_arm"].get<std::size_t>();
  }
  if (doc.contains("seed")) {
    if (!doc["seed"].is_number_integer() || doc["seed"].get<long long>() < 0) fail("'seed' must be a non-negative integer");
    c.seed = doc["seed"].get<std::uint64_t>();
  }
  num(doc, "max_followup", c.max_followup);
  num(doc, "accrual", c.accrual);
  num(doc, "theta", c.theta);
  num(doc, "switch_effect", c.switch_effect);
  if (doc.contains("outcome")) {
    const auto& o = doc["outcome"];
    check_keys(o, "outcome", {"weibull_shape", "weibull_scale", "progression_effect", "coefficients"});
    num(o, "weibull_shape", c.weibull_shape);
    num(o, "weibull_scale", c.weibull_scale);
    num(o, "progression_effect", c.progression_effect);
    coefs(o, c.outcome);
  }
  if (doc.contains("progression")) {
    const auto& o = doc["progression"];
    check_keys(o, "progression", {"rate", "coefficients"});
    num(o, "rate", c.progression_rate);
    coefs(o, c.progression);
  }
  if (doc.contains("switching")) {
    const auto& o = doc["switching"];
    check_keys(o, "switching", {"rate_rct", "rate_oc", "progression_effect", "coefficients"});
    num(o, "rate_rct", c.switch_rate_rct);
    num(o, "rate_oc", c.switch_rate_oc);
    num(o, "progression_effect", c.switch_progression_effect);
    coefs(o, c.switching);
  }
  if (doc.contains("assignment")) {
    check_keys(doc["assignment"], "assignment", {"coefficients"});
    coefs(doc["assignment"], c.assignment);
  }
  if (doc.contains("categorical")) {
    c.categorical.clear();
    for (const auto& g : doc["categorical"]) {
      check_keys(g, "categorical", {"name", "levels", "probs"});
      CategoricalGenerator cg;
      try {
        cg.name = g.at("name").get<std::string>();
        cg.levels = g.at("levels").get<std::vector<std::string>>();
        cg.probs = g.at("probs").get<std::vector<double>>();
      } catch (const nlohmann::json::exception&) {
        fail("categorical covariates need name, levels (strings) and probs (numbers)");
      }
      c.categorical.push_back(std::move(cg));
    }
  }
  if (doc.contains("continuous")) {
    c.continuous.clear();
    for (const auto& g : doc["continuous"]) {
      check_keys(g, "continuous", {"name", "meanlog", "sdlog", "transform"});
      ContinuousGenerator cg;
      try {
        cg.name = g.at("name").get<std::string>();
      } catch (const nlohmann::json::exception&) {
        fail("continuous covariates need a name");
      }
      num(g, "meanlog", cg.meanlog);
      num(g, "sdlog", cg.sdlog);
      if (g.contains("transform")) {
        const auto t = g["transform"].is_string() ? g["transform"].get<std::string>() : std::string("?");
        if (t == "log")
          cg.transform = Transform::Log;
        else if (t != "none")
          fail("unknown transform '" + t + "'");
      }
      c.continuous.push_back(std::move(cg));
    }
  }
  c.validate();
  return c;
}

/// id, arm, noswitch_event_months, noswitch_event_months_rct, noswitch_event_months_oc
inline void write_truth_csv(std::ostream& out, const std::vector<TruthRecord>& truth) {
  csv::Writer w(out);
  w.row({"id", "arm", "noswitch_event_months", "noswitch_event_months_rct", "noswitch_event_months_oc"});
  for (const auto& t : truth)
    w.row({t.id, std::string(to_string(t.arm)), csv::format_number(t.noswitch_time), csv::format_number(t.noswitch_time_rct),
           csv::format_number(t.noswitch_time_oc)});
}

}  // namespace ectrial
