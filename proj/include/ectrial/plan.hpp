#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ectrial/cohort.hpp"
#include "ectrial/emulation.hpp"
#include "ectrial/errors.hpp"
#include "ectrial/ipcw.hpp"
#include "ectrial/toml.hpp"

namespace ectrial {

enum class Strategy { Hypothetical, TreatmentPolicy };

inline std::string_view to_string(Strategy s) {
  return s == Strategy::Hypothetical ? "hypothetical" : "treatment_policy";
}

enum class SummaryMeasure { HazardRatio, KmCurves, MedianSurvival, LogrankP };

inline std::string_view to_string(SummaryMeasure m) {
  switch (m) {
    case SummaryMeasure::HazardRatio: return "hazard_ratio";
    case SummaryMeasure::KmCurves: return "km_curves";
    case SummaryMeasure::MedianSurvival: return "median_survival";
    case SummaryMeasure::LogrankP: return "logrank_p";
  }
  return "";
}

/// Refit: every replicate re-estimates all weights. FixedWeights: weights
/// stay at their full-sample values and only the outcome model is refitted.
enum class BootstrapMode { Refit, FixedWeights };

inline std::string_view to_string(BootstrapMode m) { return m == BootstrapMode::Refit ? "refit" : "fixed_weights"; }

struct IntercurrentEvent {
  std::string kind;  // only "subsequent_therapy"
  Strategy strategy = Strategy::Hypothetical;
};

struct IpcwSpec {
  std::vector<std::string> numerator;
  std::vector<std::string> denominator;
  std::vector<std::string> time_varying;  // only "progression"
  std::map<Arm, double> cap_percentiles{{Arm::OC, 0.99}, {Arm::RCT, 0.98}};
  TrimMode trim_mode = TrimMode::Cap;
};

/// Validated analysis configuration: the five estimand attributes plus the
/// assignment and follow-up fields of the emulated trial.
struct EstimandSpec {
  std::string name;

  std::vector<EligibilityRule> population;
  std::map<Arm, std::string> arm_labels;
  std::vector<std::string> regimens;
  std::string endpoint = "overall_survival";
  std::vector<IntercurrentEvent> intercurrent_events;
  std::vector<SummaryMeasure> summary;

  std::vector<CovariateSpec> covariates;  // roles derived from the lists below
  std::vector<std::string> ps_covariates;
  std::map<std::string, Transform> transforms;
  double extreme_weight_threshold = 10.0;

  std::optional<IpcwSpec> ipcw;
  std::optional<double> truncation_months;
  double grid_step = 1.0;

  std::vector<std::string> balance;
  int bootstrap_replicates = 500;
  BootstrapMode bootstrap_mode = BootstrapMode::Refit;
  double max_missing_fraction = 0.30;

  nlohmann::json source;  // the parsed document, echoed into reports

  Strategy strategy() const { return intercurrent_events.front().strategy; }
  bool wants(SummaryMeasure m) const { return std::find(summary.begin(), summary.end(), m) != summary.end(); }
};

namespace detail {

/// Object view that remembers which keys were read so leftovers can be rejected.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError("config: '" + path_ + "' must be a table");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const nlohmann::json* find(const std::string& key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const nlohmann::json& require(const std::string& key) {
    const auto* v = find(key);
    if (!v) throw ConfigError("config: '" + path_ + "' is missing '" + key + "'");
    return *v;
  }

  std::string string(const std::string& key, std::optional<std::string> fallback = std::nullopt) {
    const auto* v = find(key);
    if (!v) {
      if (fallback) return *fallback;
      throw ConfigError("config: '" + path_ + "' is missing '" + key + "'");
    }
    if (!v->is_string()) throw ConfigError("config: '" + path_ + "." + key + "' must be a string");
    return v->get<std::string>();
  }

  std::optional<double> number(const std::string& key) {
    const auto* v = find(key);
    if (!v) return std::nullopt;
    if (!v->is_number()) throw ConfigError("config: '" + path_ + "." + key + "' must be a number");
    return v->get<double>();
  }

  std::optional<bool> boolean(const std::string& key) {
    const auto* v = find(key);
    if (!v) return std::nullopt;
    if (!v->is_boolean()) throw ConfigError("config: '" + path_ + "." + key + "' must be true or false");
    return v->get<bool>();
  }

  std::vector<std::string> strings(const std::string& key, bool required = false) {
    const auto* v = find(key);
    if (!v) {
      if (required) throw ConfigError("config: '" + path_ + "' is missing '" + key + "'");
      return {};
    }
    if (!v->is_array()) throw ConfigError("config: '" + path_ + "." + key + "' must be a list of strings");
    std::vector<std::string> out;
    for (const auto& e : *v) {
      if (!e.is_string()) throw ConfigError("config: '" + path_ + "." + key + "' must be a list of strings");
      out.push_back(e.get<std::string>());
    }
    return out;
  }

  const std::string& path() const { return path_; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw ConfigError("config: unknown key '" + path_ + "." + it.key() + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> used_;
};

inline Arm arm_from(const std::string& s, const std::string& where) {
  auto a = parse_arm(s);
  if (!a) throw ConfigError("config: '" + where + "': unknown arm '" + s + "' (expected RCT or OC)");
  return *a;
}

inline std::map<Arm, double> arm_numbers(const nlohmann::json& j, const std::string& where) {
  Section s(j, where);
  std::map<Arm, double> out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const Arm a = arm_from(it.key(), where);
    const auto v = s.number(it.key());
    out[a] = *v;
  }
  return out;
}

inline EligibilityRule parse_rule(const nlohmann::json& j, const std::string& path) {
  Section s(j, path);
  EligibilityRule r;
  r.name = s.string("name");
  const std::string type = s.string("type");
  if (type == "always") {
    r.type = EligibilityRule::Type::Always;
  } else if (type == "field_in_set") {
    r.type = EligibilityRule::Type::FieldInSet;
    r.field = s.string("field");
    r.values = s.strings("values", true);
  } else if (type == "field_comparison") {
    r.type = EligibilityRule::Type::FieldComparison;
    r.field = s.string("field");
  } else if (type == "field_range") {
    r.type = EligibilityRule::Type::FieldRange;
    r.field = s.string("field");
    const auto lo = s.number("lo"), hi = s.number("hi");
    if (!lo || !hi) throw ConfigError("config: '" + path + "' needs lo and hi");
    if (*lo > *hi) throw ConfigError("config: '" + path + "': lo > hi");
    r.lo = *lo;
    r.hi = *hi;
  } else if (type == "windowed_observation") {
    r.type = EligibilityRule::Type::WindowedObservation;
    r.kind = s.string("kind");
    const auto* w = s.find("window");
    if (!w || !w->is_array() || w->size() != 2 || !(*w)[0].is_number_integer() || !(*w)[1].is_number_integer())
      throw ConfigError("config: '" + path + ".window' must be [lo_days, hi_days]");
    r.window = {(*w)[0].get<int>(), (*w)[1].get<int>()};
    if (r.window.lo > r.window.hi) throw ConfigError("config: '" + path + ".window': lo > hi");
    r.values = s.strings("values");
  } else {
    throw ConfigError("config: '" + path + "': unknown rule type '" + type + "'");
  }
  if (r.type == EligibilityRule::Type::FieldComparison ||
      (r.type == EligibilityRule::Type::WindowedObservation && r.values.empty())) {
    const std::string op = s.string("op");
    const auto c = parse_comparison(op);
    if (!c) throw ConfigError("config: '" + path + "': unknown comparison '" + op + "'");
    r.op = *c;
    const auto v = s.number("value");
    if (!v) throw ConfigError("config: '" + path + "' is missing 'value'");
    r.value = *v;
  }
  r.allow_missing = s.boolean("allow_missing").value_or(false);
  for (const auto& a : s.strings("arms")) r.arms.push_back(arm_from(a, path + ".arms"));
  s.finish();
  return r;
}

inline CovariateSpec parse_covariate(const nlohmann::json& j, const std::string& path) {
  Section s(j, path);
  const std::string name = s.string("name");
  const std::string kind = s.string("kind");
  CovariateSpec c;
  if (kind == "categorical") {
    c = CovariateSpec::categorical(name, s.strings("levels", true), {}, s.string("reference", std::string{}));
  } else if (kind == "continuous") {
    c = CovariateSpec::continuous(name);
    const std::string t = s.string("transform", std::string("none"));
    if (t == "log")
      c.transform = Transform::Log;
    else if (t != "none")
      throw ConfigError("config: '" + path + "': unknown transform '" + t + "'");
  } else {
    throw ConfigError("config: '" + path + "': kind must be categorical or continuous");
  }
  const std::string missing = s.string("missing", std::string("default"));
  if (missing == "impute_median") {
    if (c.categorical()) throw ConfigError("config: '" + path + "': median imputation of a categorical covariate");
    c.missing_policy = MissingPolicy::ImputeMedian;
  } else if (missing == "impute_mode") {
    c.missing_policy = MissingPolicy::ImputeMode;
  } else if (missing != "default") {
    throw ConfigError("config: '" + path + "': unknown missing policy '" + missing + "'");
  }
  s.finish();
  c.validate();
  return c;
}

inline void add_role(std::vector<CovariateSpec>& specs, const std::vector<std::string>& names, Role role,
                     const std::string& where) {
  for (const auto& n : names) {
    auto it = std::find_if(specs.begin(), specs.end(), [&](const CovariateSpec& c) { return c.name == n; });
    if (it == specs.end()) throw ConfigError("config: '" + where + "' names undeclared covariate '" + n + "'");
    it->roles.add(role);
  }
}

}  // namespace detail

/// Reads a TOML or JSON (leading '{') configuration into a validated spec.
inline EstimandSpec parse_estimand_config(std::string_view text) {
  std::size_t first = text.find_first_not_of(" \t\r\n");
  if (text.substr(0, 3) == "\xEF\xBB\xBF") first = text.find_first_not_of(" \t\r\n", 3);
  nlohmann::json doc;
  if (first != std::string_view::npos && text[first] == '{') {
    try {
      doc = nlohmann::json::parse(text.substr(first));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
  } else {
    doc = toml::parse(text);
  }

  using detail::Section;
  Section root(doc, "config");
  EstimandSpec spec;
  spec.source = doc;
  spec.name = root.string("name", std::string("analysis"));

  static const std::pair<const char*, const char*> kAttributes[] = {
      {"population", "population"},
      {"treatment", "treatment"},
      {"endpoint", "endpoint (variable)"},
      {"intercurrent_events", "intercurrent event handling"},
      {"summary", "population-level summary"},
      {"assignment", "treatment assignment"},
      {"followup", "follow-up"},
      {"covariates", "covariate declarations"},
  };
  for (const auto& [key, label] : kAttributes)
    if (!root.has(key)) throw ConfigError(std::string("missing estimand attribute: ") + label);

  {
    Section pop(root.require("population"), "population");
    if (const auto* rules = pop.find("rules")) {
      if (!rules->is_array()) throw ConfigError("config: 'population.rules' must be an array of tables");
      for (std::size_t i = 0; i < rules->size(); ++i)
        spec.population.push_back(detail::parse_rule((*rules)[i], "population.rules[" + std::to_string(i) + "]"));
    }
    pop.finish();
    if (spec.population.empty()) throw ConfigError("config: 'population' must declare at least one rule");
  }
  {
    Section tr(root.require("treatment"), "treatment");
    if (const auto* arms = tr.find("arms")) {
      Section a(*arms, "treatment.arms");
      for (auto it = arms->begin(); it != arms->end(); ++it)
        spec.arm_labels[detail::arm_from(it.key(), "treatment.arms")] = a.string(it.key());
    }
    spec.regimens = tr.strings("regimens");
    tr.finish();
  }
  {
    Section ep(root.require("endpoint"), "endpoint");
    spec.endpoint = ep.string("kind");
    if (spec.endpoint != "overall_survival")
      throw ConfigError("config: endpoint kind '" + spec.endpoint + "' is not supported (only overall_survival)");
    ep.finish();
  }
  {
    const auto& ies = root.require("intercurrent_events");
    if (!ies.is_array() || ies.empty())
      throw ConfigError("config: 'intercurrent_events' must list at least one event");
    std::set<std::string> kinds;
    for (std::size_t i = 0; i < ies.size(); ++i) {
      Section e(ies[i], "intercurrent_events[" + std::to_string(i) + "]");
      IntercurrentEvent ie;
      ie.kind = e.string("kind");
      if (ie.kind != "subsequent_therapy")
        throw ConfigError("config: intercurrent event kind '" + ie.kind + "' is not supported (only subsequent_therapy)");
      const std::string st = e.string("strategy");
      if (st == "hypothetical")
        ie.strategy = Strategy::Hypothetical;
      else if (st == "treatment_policy")
        ie.strategy = Strategy::TreatmentPolicy;
      else
        throw ConfigError("config: unknown strategy '" + st + "'");
      e.finish();
      if (!kinds.insert(ie.kind).second)
        throw ConfigError("config: intercurrent event '" + ie.kind + "' has more than one strategy");
      spec.intercurrent_events.push_back(ie);
    }
  }
  {
    Section su(root.require("summary"), "summary");
    for (const auto& m : su.strings("measures", true)) {
      SummaryMeasure sm;
      if (m == "hazard_ratio")
        sm = SummaryMeasure::HazardRatio;
      else if (m == "km_curves")
        sm = SummaryMeasure::KmCurves;
      else if (m == "median_survival")
        sm = SummaryMeasure::MedianSurvival;
      else if (m == "logrank_p")
        sm = SummaryMeasure::LogrankP;
      else
        throw ConfigError("config: unknown summary measure '" + m + "'");
      if (!spec.wants(sm)) spec.summary.push_back(sm);
    }
    su.finish();
    if (spec.summary.empty()) throw ConfigError("config: 'summary.measures' is empty");
  }
  {
    const auto& covs = root.require("covariates");
    if (!covs.is_array()) throw ConfigError("config: 'covariates' must be an array of tables");
    std::set<std::string> names;
    for (std::size_t i = 0; i < covs.size(); ++i) {
      auto c = detail::parse_covariate(covs[i], "covariates[" + std::to_string(i) + "]");
      if (!names.insert(c.name).second) throw ConfigError("config: covariate '" + c.name + "' declared twice");
      spec.covariates.push_back(std::move(c));
    }
  }
  {
    Section as(root.require("assignment"), "assignment");
    spec.ps_covariates = as.strings("covariates", true);
    if (spec.ps_covariates.empty()) throw ConfigError("config: 'assignment.covariates' is empty");
    detail::add_role(spec.covariates, spec.ps_covariates, Role::PsModel, "assignment.covariates");
    if (const auto* t = as.find("transforms")) {
      detail::Section ts(*t, "assignment.transforms");
      for (auto it = t->begin(); it != t->end(); ++it) {
        const std::string v = ts.string(it.key());
        if (v != "log" && v != "none") throw ConfigError("config: unknown transform '" + v + "'");
        spec.transforms[it.key()] = v == "log" ? Transform::Log : Transform::None;
        detail::add_role(spec.covariates, {it.key()}, Role::PsModel, "assignment.transforms");
      }
    }
    spec.extreme_weight_threshold = as.number("extreme_weight_threshold").value_or(10.0);
    if (!(spec.extreme_weight_threshold > 0.0)) throw ConfigError("config: extreme_weight_threshold must be > 0");
    as.finish();
  }
  if (const auto* ip = root.find("ipcw")) {
    Section s(*ip, "ipcw");
    IpcwSpec ipcw;
    ipcw.numerator = s.strings("numerator");
    ipcw.denominator = s.strings("denominator");
    ipcw.time_varying = s.strings("time_varying");
    for (const auto& tv : ipcw.time_varying)
      if (tv != "progression") throw ConfigError("config: unknown time-varying covariate '" + tv + "' (only progression)");
    if (const auto* caps = s.find("cap_percentiles")) {
      for (const auto& [arm, p] : detail::arm_numbers(*caps, "ipcw.cap_percentiles")) {
        if (!(p > 0.0 && p <= 1.0)) throw ConfigError("config: cap percentiles must be in (0, 1]");
        ipcw.cap_percentiles[arm] = p;
      }
    }
    const std::string mode = s.string("trim_mode", std::string("cap"));
    if (mode == "cap")
      ipcw.trim_mode = TrimMode::Cap;
    else if (mode == "remove")
      ipcw.trim_mode = TrimMode::Remove;
    else
      throw ConfigError("config: unknown trim_mode '" + mode + "'");
    s.finish();
    detail::add_role(spec.covariates, ipcw.numerator, Role::IpcwNumerator, "ipcw.numerator");
    detail::add_role(spec.covariates, ipcw.denominator, Role::IpcwDenominator, "ipcw.denominator");
    detail::add_role(spec.covariates, ipcw.denominator, Role::SwitchModel, "ipcw.denominator");
    spec.ipcw = std::move(ipcw);
  }
  {
    Section fu(root.require("followup"), "followup");
    spec.truncation_months = fu.number("truncation_months");
    if (spec.truncation_months && !(*spec.truncation_months > 0.0))
      throw ConfigError("config: truncation_months must be > 0");
    spec.grid_step = fu.number("grid_step").value_or(1.0);
    if (!(spec.grid_step > 0.0)) throw ConfigError("config: grid_step must be > 0");
    fu.finish();
  }
  if (const auto* d = root.find("diagnostics")) {
    Section s(*d, "diagnostics");
    spec.balance = s.strings("balance");
    s.finish();
  }
  if (spec.balance.empty()) spec.balance = spec.ps_covariates;
  detail::add_role(spec.covariates, spec.balance, Role::Balance, "diagnostics.balance");
  if (const auto* b = root.find("bootstrap")) {
    Section s(*b, "bootstrap");
    const auto* r = s.find("replicates");
    if (r) {
      if (!r->is_number_integer() || r->get<long long>() < 0)
        throw ConfigError("config: 'bootstrap.replicates' must be a non-negative integer");
      spec.bootstrap_replicates = r->get<int>();
    }
    const std::string mode = s.string("mode", std::string("refit"));
    if (mode == "fixed_weights")
      spec.bootstrap_mode = BootstrapMode::FixedWeights;
    else if (mode != "refit")
      throw ConfigError("config: 'bootstrap.mode' must be \"refit\" or \"fixed_weights\", got '" + mode + "'");
    s.finish();
  }
  if (const auto* im = root.find("imputation")) {
    Section s(*im, "imputation");
    spec.max_missing_fraction = s.number("max_missing_fraction").value_or(0.30);
    if (!(spec.max_missing_fraction >= 0.0 && spec.max_missing_fraction <= 1.0))
      throw ConfigError("config: max_missing_fraction must be in [0, 1]");
    s.finish();
  }
  root.finish();

  // Strategy and IPCW roles must agree.
  if (spec.strategy() == Strategy::Hypothetical) {
    if (!spec.ipcw || spec.ipcw->denominator.empty())
      throw ConfigError("config: hypothetical strategy needs a non-empty 'ipcw.denominator' covariate list");
  } else if (spec.ipcw) {
    throw ConfigError("config: treatment_policy strategy must not declare an 'ipcw' section");
  }
  return spec;
}

// ---------------------------------------------------------------------------

enum class Stage {
  Eligibility,
  Imputation,
  Propensity,
  ExtremeWeightExclusion,
  ArtificialCensoring,
  CensoringModels,
  StabilizedWeights,
  TruncateAndTrim,
  SurvivalEstimation,
  Diagnostics,
  Bootstrap,
  Report,
};

inline constexpr Stage kAllStages[] = {
    Stage::Eligibility,         Stage::Imputation,      Stage::Propensity,        Stage::ExtremeWeightExclusion,
    Stage::ArtificialCensoring, Stage::CensoringModels, Stage::StabilizedWeights, Stage::TruncateAndTrim,
    Stage::SurvivalEstimation,  Stage::Diagnostics,     Stage::Bootstrap,         Stage::Report,
};

inline std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::Eligibility: return "eligibility";
    case Stage::Imputation: return "imputation";
    case Stage::Propensity: return "propensity";
    case Stage::ExtremeWeightExclusion: return "extreme_weight_exclusion";
    case Stage::ArtificialCensoring: return "artificial_censoring";
    case Stage::CensoringModels: return "censoring_models";
    case Stage::StabilizedWeights: return "stabilized_weights";
    case Stage::TruncateAndTrim: return "truncate_and_trim";
    case Stage::SurvivalEstimation: return "survival_estimation";
    case Stage::Diagnostics: return "diagnostics";
    case Stage::Bootstrap: return "bootstrap";
    case Stage::Report: return "report";
  }
  return "";
}

enum class AnalysisKind { Primary, Sensitivity, Supplemental };

inline std::string_view to_string(AnalysisKind a) {
  switch (a) {
    case AnalysisKind::Primary: return "primary";
    case AnalysisKind::Sensitivity: return "sensitivity";
    case AnalysisKind::Supplemental: return "supplemental";
  }
  return "";
}

struct Plan {
  AnalysisKind analysis = AnalysisKind::Primary;
  std::vector<Stage> stages;
  EstimandSpec spec;

  bool has(Stage s) const { return std::find(stages.begin(), stages.end(), s) != stages.end(); }

  nlohmann::json to_json() const {
    nlohmann::json stage_names = nlohmann::json::array();
    for (Stage s : stages) stage_names.push_back(std::string(to_string(s)));
    return {{"analysis", std::string(to_string(analysis))},
            {"stages", stage_names},
            {"strategy", std::string(to_string(spec.strategy()))},
            {"config", spec.source}};
  }
};

/// Hypothetical strategy adds the artificial-censoring/IPCW block; follow-up
/// truncation is what separates the primary from the sensitivity analysis.
/// Follow-up truncation itself is applied during survival estimation for
/// every analysis.
inline Plan compile_plan(const EstimandSpec& spec) {
  Plan p;
  p.spec = spec;
  p.stages = {Stage::Eligibility, Stage::Imputation, Stage::Propensity, Stage::ExtremeWeightExclusion};
  if (spec.strategy() == Strategy::Hypothetical) {
    p.stages.insert(p.stages.end(), {Stage::ArtificialCensoring, Stage::CensoringModels, Stage::StabilizedWeights,
                                     Stage::TruncateAndTrim});
    p.analysis = spec.truncation_months ? AnalysisKind::Primary : AnalysisKind::Sensitivity;
  } else {
    p.analysis = AnalysisKind::Supplemental;
  }
  p.stages.insert(p.stages.end(), {Stage::SurvivalEstimation, Stage::Diagnostics, Stage::Bootstrap, Stage::Report});
  return p;
}

}  // namespace ectrial
