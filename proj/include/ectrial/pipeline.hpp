#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ectrial/cohort.hpp"
#include "ectrial/diagnostics.hpp"
#include "ectrial/emulation.hpp"
#include "ectrial/errors.hpp"
#include "ectrial/ipcw.hpp"
#include "ectrial/plan.hpp"
#include "ectrial/propensity.hpp"
#include "ectrial/survival.hpp"

namespace ectrial {

inline constexpr const char* kVersion = "1.0.0";
inline constexpr int kReportSchemaVersion = 1;

struct RunOptions {
  std::uint64_t seed = 0;
  int threads = 1;
  std::optional<int> bootstrap_replicates;  // overrides the config
};

/// Everything between the propensity model and the outcome rows. This is the
/// part a bootstrap replicate re-runs.
struct WeightingResult {
  Cohort analysed;  // after extreme-weight exclusion
  LogisticFit ps_fit;
  IptwWeights iptw;
  std::vector<double> subject_iptw;  // indexed like `analysed`
  std::size_t switches = 0;
  std::map<Arm, CensoringFit> censoring;
  std::vector<Arm> arms_without_switches;
  std::size_t beyond_support = 0;
  std::vector<std::string> tv_names;
  WeightSeries series;  // after truncation and trimming
  SurvivalData data;
};

namespace detail {

template <class F>
auto in_stage(Stage stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(std::string(to_string(stage)), e.what());
  }
}

inline std::vector<TimeVarying> time_varying_of(const EstimandSpec& spec) {
  std::vector<TimeVarying> tv;
  if (spec.ipcw)
    for (const auto& name : spec.ipcw->time_varying)
      if (name == "progression") tv.push_back(TimeVarying::progression());
  return tv;
}

}  // namespace detail

/// Propensity, exclusion and (for the hypothetical strategy) artificial
/// censoring, censoring models, stabilized weights and truncation/trimming.
inline WeightingResult run_weighting(const Plan& plan, const Cohort& cohort) {
  const EstimandSpec& spec = plan.spec;
  WeightingResult r;
  detail::in_stage(Stage::Propensity, [&] {
    r.ps_fit = fit_propensity(cohort, spec.transforms);
    r.iptw = att_weights(r.ps_fit, cohort);
  });
  detail::in_stage(Stage::ExtremeWeightExclusion, [&] {
    r.iptw = exclude_extreme_weights(r.iptw, spec.extreme_weight_threshold);
    auto [kept, w] = retained(cohort, r.iptw);
    r.analysed = std::move(kept);
    r.subject_iptw = std::move(w);
  });

  const GridSpec grid{spec.grid_step};
  if (plan.has(Stage::ArtificialCensoring)) {
    const IpcwSpec& ip = *spec.ipcw;
    const auto tv = detail::time_varying_of(spec);
    ArtificialCensoring ac;
    CountingProcess cp_outcome, cp_censoring;
    detail::in_stage(Stage::ArtificialCensoring, [&] {
      ac = artificial_censor(r.analysed);
      r.switches = ac.switches;
      cp_outcome = to_counting_process(ac.outcome, grid, tv);
      cp_censoring = to_counting_process(ac.censoring, grid, tv);
      r.tv_names = cp_outcome.tv_names;
    });
    std::vector<double> sw(cp_outcome.intervals.size(), 1.0);
    detail::in_stage(Stage::CensoringModels, [&] {
      for (Arm arm : kArms) {
        std::size_t n = 0, events = 0;
        for (const auto& s : ac.censoring.subjects())
          if (s.arm == arm) {
            ++n;
            events += s.event;
          }
        if (n == 0) throw EstimationError("arm " + std::string(to_string(arm)) + " is empty");
        if (events == 0) {
          r.arms_without_switches.push_back(arm);
          continue;
        }
        r.censoring.emplace(arm, fit_censoring_model(ac.censoring, cp_censoring, arm, ip.denominator, ip.numerator));
      }
    });
    detail::in_stage(Stage::StabilizedWeights, [&] {
      for (const auto& [arm, fit] : r.censoring) {
        const auto w = stabilized_weights(fit, ac.censoring, cp_censoring);
        r.beyond_support += w.beyond_support;
        for (std::size_t k = 0; k < sw.size(); ++k)
          if (ac.censoring[cp_censoring.intervals[k].subject].arm == arm) sw[k] = w.sw[k];
      }
    });
    detail::in_stage(Stage::TruncateAndTrim, [&] {
      const auto series = make_weight_series(ac.outcome, cp_outcome, r.subject_iptw, sw);
      r.series = truncate_and_trim(series, spec.truncation_months, ip.cap_percentiles, ip.trim_mode);
    });
  } else {
    detail::in_stage(Stage::SurvivalEstimation, [&] {
      const auto cp = to_counting_process(r.analysed, grid, {});
      r.series = truncate_and_trim(make_weight_series(r.analysed, cp, r.subject_iptw), spec.truncation_months, {});
    });
  }
  r.data = to_survival_data(r.series);
  return r;
}

/// Hazard ratio (RCT vs OC) of one weighting result.
inline CoxFit outcome_cox(const WeightingResult& w, bool robust = true) {
  CoxOptions opt;
  opt.robust = robust;
  return fit_arm_cox(w.data, opt);
}

struct ArmSummary {
  KmCurve km;
  MedianSurvival median;
  std::size_t subjects = 0;
  double events = 0.0;
};

struct HazardRatioSummary {
  double hr = 1.0;
  double log_hr = 0.0;
  double robust_se = 0.0;
  double wald_lo = 0.0, wald_hi = 0.0;
  std::optional<BootstrapCi> bootstrap;
};

struct AnalysisReport {
  Plan plan;
  RunOptions options;
  AttritionTable attrition;
  ImputationReport imputation;
  WeightingResult weighting;
  std::vector<WeightDiagnosticRow> weight_diagnostics;
  std::vector<std::vector<BalanceRow>> balance;
  std::map<Arm, ArmSummary> arms;
  LogRankResult logrank;
  HazardRatioSummary hazard_ratio;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
};

namespace detail {

inline nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

inline nlohmann::json optional_number(const std::optional<double>& v) {
  return v && std::isfinite(*v) ? nlohmann::json(*v) : nlohmann::json();
}

inline nlohmann::json cox_model_json(const CensoringModel& m) {
  nlohmann::json terms = nlohmann::json::array();
  for (std::size_t j = 0; j < m.terms.size(); ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    terms.push_back({{"term", m.terms[j].name},
                     {"estimate", m.cox.beta(jj)},
                     {"std_error", number_or_null(std::sqrt(m.cox.cov(jj, jj)))}});
  }
  return {{"terms", terms}, {"dropped_constant_terms", m.dropped}, {"converged", m.cox.converged}};
}

}  // namespace detail

inline nlohmann::json AnalysisReport::to_json() const {
  using nlohmann::json;
  using detail::number_or_null;
  using detail::optional_number;
  const EstimandSpec& spec = plan.spec;
  json j;
  j["schema_version"] = kReportSchemaVersion;
  j["version"] = std::string("ectrial ") + kVersion;
  j["seed"] = options.seed;
  j["plan"] = plan.to_json();

  json rows = json::array();
  for (const auto& r : attrition.rows) rows.push_back({{"criterion", r.rule}, {"remaining", r.remaining}});
  j["attrition"] = {{"input_count", attrition.input_count}, {"rows", rows}};

  json imp = json::array();
  for (const auto& r : imputation.rows) {
    json row = {{"covariate", r.covariate},
                {"missing_fraction", r.missing_fraction},
                {"action", std::string(to_string(r.action))}};
    if (r.fill_value) row["fill"] = r.fill_label;
    if (!r.note.empty()) row["note"] = r.note;
    imp.push_back(row);
  }
  j["imputation"] = {{"max_missing_fraction", imputation.threshold}, {"covariates", imp}};

  {
    const LogisticFit& f = weighting.ps_fit;
    json terms = json::array();
    for (std::size_t t = 0; t < f.names.size(); ++t)
      terms.push_back({{"term", f.names[t]},
                       {"estimate", f.coef(static_cast<Eigen::Index>(t))},
                       {"std_error", number_or_null(f.std_error(t))},
                       {"p_value", number_or_null(f.p_value(t))}});
    j["propensity"] = {{"terms", terms},
                       {"converged", f.converged},
                       {"iterations", f.iterations},
                       {"ridge_adjusted", f.ridge_adjusted},
                       {"extreme_weight_threshold", weighting.iptw.threshold},
                       {"excluded_count", weighting.iptw.excluded_ids.size()},
                       {"excluded_fraction_of_oc", weighting.iptw.excluded_fraction()},
                       {"excluded_ids", weighting.iptw.excluded_ids}};
  }

  if (plan.has(Stage::CensoringModels)) {
    json models = json::object();
    for (const auto& [arm, fit] : weighting.censoring)
      models[std::string(to_string(arm))] = {{"switch_events", fit.switch_events},
                                             {"denominator", detail::cox_model_json(fit.denominator)},
                                             {"numerator", detail::cox_model_json(fit.numerator)}};
    json caps = json::object(), cap_values = json::object();
    for (const auto& [arm, p] : weighting.series.cap_percentile) caps[std::string(to_string(arm))] = p;
    for (const auto& [arm, v] : weighting.series.cap_value) cap_values[std::string(to_string(arm))] = v;
    json diag = json::array();
    for (const auto& r : weight_diagnostics)
      diag.push_back({{"arm", std::string(to_string(r.arm))},
                      {"time", r.time},
                      {"n_at_risk", r.n_at_risk},
                      {"mean_sw", r.mean_sw},
                      {"p01", r.p01},
                      {"p99", r.p99},
                      {"max", r.max}});
    json unswitched = json::array();
    for (Arm a : weighting.arms_without_switches) unswitched.push_back(std::string(to_string(a)));
    j["ipcw"] = {{"switches", weighting.switches},
                 {"censoring_models", models},
                 {"arms_without_switches", unswitched},
                 {"trim_mode", spec.ipcw->trim_mode == TrimMode::Cap ? "cap" : "remove"},
                 {"cap_percentiles", caps},
                 {"cap_values", cap_values},
                 {"capped_intervals", weighting.series.capped},
                 {"removed_intervals", weighting.series.removed},
                 {"intervals_beyond_model_support", weighting.beyond_support},
                 {"weight_diagnostics", diag}};
  }

  j["followup"] = {{"truncation_months", optional_number(spec.truncation_months)}, {"grid_step", spec.grid_step}};

  json bal = json::array();
  for (const auto& stage : balance)
    for (const auto& r : stage)
      bal.push_back({{"stage", r.stage},
                     {"covariate", r.covariate},
                     {"smd_unweighted", number_or_null(r.smd_unweighted)},
                     {"smd_weighted", number_or_null(r.smd_weighted)},
                     {"balanced", r.balanced}});
  j["balance"] = bal;

  json counts = json::object();
  for (const auto& [arm, s] : arms)
    counts[std::string(to_string(arm))] = {{"subjects", s.subjects}, {"weighted_events", s.events}};
  j["analysed"] = counts;

  if (spec.wants(SummaryMeasure::KmCurves)) {
    json km = json::object();
    for (const auto& [arm, s] : arms) {
      json pts = json::array();
      for (std::size_t k = 0; k < s.km.time.size(); ++k)
        pts.push_back({{"time", s.km.time[k]},
                       {"survival", s.km.survival[k]},
                       {"lo", number_or_null(s.km.lower[k])},
                       {"hi", number_or_null(s.km.upper[k])},
                       {"n_at_risk_weighted", s.km.n_at_risk[k]}});
      km[std::string(to_string(arm))] = pts;
    }
    j["km_curves"] = km;
  }
  if (spec.wants(SummaryMeasure::MedianSurvival)) {
    json med = json::object();
    for (const auto& [arm, s] : arms)
      med[std::string(to_string(arm))] = {{"median", optional_number(s.median.median)},
                                          {"lo", optional_number(s.median.lower)},
                                          {"hi", optional_number(s.median.upper)}};
    j["median_survival"] = med;
  }
  if (spec.wants(SummaryMeasure::LogrankP))
    j["logrank"] = {{"statistic", number_or_null(logrank.statistic)}, {"p_value", number_or_null(logrank.p_value)}};
  if (spec.wants(SummaryMeasure::HazardRatio)) {
    json hr = {{"hr", hazard_ratio.hr},
               {"log_hr", hazard_ratio.log_hr},
               {"robust_se", number_or_null(hazard_ratio.robust_se)},
               {"wald_lo", number_or_null(hazard_ratio.wald_lo)},
               {"wald_hi", number_or_null(hazard_ratio.wald_hi)},
               {"comparison", "RCT vs OC"}};
    if (hazard_ratio.bootstrap) {
      const auto& b = *hazard_ratio.bootstrap;
      hr["bootstrap"] = {{"replicates", b.replicates},
                         {"failures", b.failures},
                         {"lo", b.lo},
                         {"hi", b.hi},
                         {"mode", std::string(to_string(spec.bootstrap_mode))},
                         {"method", spec.bootstrap_mode == BootstrapMode::Refit
                                        ? "percentile, stratified by arm, full pipeline refit"
                                        : "percentile, stratified by arm, weights held fixed"}};
    }
    j["hazard_ratio"] = hr;
  }
  j["warnings"] = warnings;
  return j;
}

/// Runs every stage of `plan` on a validated cohort.
inline AnalysisReport run_plan(const Plan& plan, const Cohort& cohort, std::span<const RawObservation> observations,
                               const RunOptions& options) {
  const EstimandSpec& spec = plan.spec;
  AnalysisReport rep;
  rep.plan = plan;
  rep.options = options;

  Cohort eligible = detail::in_stage(Stage::Eligibility, [&] {
    auto res = apply_eligibility(cohort, observations, spec.population);
    rep.attrition = res.attrition;
    return res.cohort;
  });
  Cohort imputed = detail::in_stage(Stage::Imputation, [&] {
    auto res = impute_missing(eligible, spec.max_missing_fraction);
    rep.imputation = res.report;
    for (const auto& row : res.report.rows)
      if (row.action == ImputationAction::Dropped)
        rep.warnings.push_back("imputation: covariate '" + row.covariate + "' is " +
                               csv::format_number(100.0 * row.missing_fraction) + "% missing and was dropped from all models");
    return res.cohort;
  });

  rep.weighting = run_weighting(plan, imputed);
  const WeightingResult& w = rep.weighting;
  if (!w.iptw.excluded_ids.empty())
    rep.warnings.push_back("propensity: excluded " + std::to_string(w.iptw.excluded_ids.size()) +
                           " OC subjects with ATT weight above " + csv::format_number(spec.extreme_weight_threshold));
  if (w.ps_fit.ridge_adjusted) rep.warnings.push_back("propensity: ridge penalty applied");
  for (Arm a : w.arms_without_switches)
    rep.warnings.push_back("ipcw: no switch events in arm " + std::string(to_string(a)) +
                           "; its censoring weights are 1");
  if (w.series.capped > 0)
    rep.warnings.push_back("ipcw: capped " + std::to_string(w.series.capped) + " interval weights at the arm percentile");
  if (w.series.removed > 0)
    rep.warnings.push_back("ipcw: removed " + std::to_string(w.series.removed) + " intervals above the arm percentile");
  if (w.beyond_support > 0)
    rep.warnings.push_back("ipcw: " + std::to_string(w.beyond_support) +
                           " interval weights evaluated beyond the censoring-model follow-up");

  detail::in_stage(Stage::SurvivalEstimation, [&] {
    for (Arm arm : kArms) {
      ArmSummary s;
      const auto d = w.data.only(arm);
      s.km = weighted_km(d);
      s.median = median_survival(s.km);
      for (const auto& subj : w.analysed.subjects()) s.subjects += subj.arm == arm;
      for (std::size_t i = 0; i < d.size(); ++i) s.events += d.event[i] * d.weight[i];
      rep.arms.emplace(arm, std::move(s));
    }
    rep.logrank = weighted_logrank(w.data);
    const CoxFit fit = outcome_cox(w);
    auto& hr = rep.hazard_ratio;
    hr.log_hr = fit.beta(0);
    hr.hr = std::exp(hr.log_hr);
    hr.robust_se = std::sqrt(fit.robust_cov(0, 0));
    hr.wald_lo = std::exp(hr.log_hr - detail::normal_quantile_975() * hr.robust_se);
    hr.wald_hi = std::exp(hr.log_hr + detail::normal_quantile_975() * hr.robust_se);
  });

  detail::in_stage(Stage::Diagnostics, [&] {
    rep.balance.push_back(balance_table(w.analysed, w.subject_iptw, "iptw"));
    if (plan.has(Stage::CensoringModels)) {
      double horizon = 0.0;
      for (const auto& iv : w.series.intervals) horizon = std::max(horizon, iv.stop);
      if (spec.truncation_months) horizon = *spec.truncation_months;
      rep.weight_diagnostics = weight_diagnostics(w.series, GridSpec{spec.grid_step}, horizon);
      rep.balance.push_back(
          balance_table_over_time(w.analysed, w.series, w.tv_names, GridSpec{spec.grid_step}, horizon, "iptw_ipcw"));
    }
    for (const auto& r : rep.balance.back())
      if (!r.balanced)
        rep.warnings.push_back("balance: " + r.covariate + " has weighted SMD " + csv::format_number(r.smd_weighted) +
                               " at stage " + r.stage);
  });

  const int replicates = options.bootstrap_replicates.value_or(spec.bootstrap_replicates);
  if (replicates > 0 && spec.wants(SummaryMeasure::HazardRatio)) {
    detail::in_stage(Stage::Bootstrap, [&] {
      BootstrapOptions bo;
      bo.replicates = replicates;
      bo.seed = options.seed;
      bo.threads = options.threads;
      if (spec.bootstrap_mode == BootstrapMode::FixedWeights) {
        rep.hazard_ratio.bootstrap = bootstrap_hr_fixed_weights(w.data, rep.hazard_ratio.hr, bo);
      } else {
        auto replicate = [&plan](const Cohort& c) {
          const auto rw = run_weighting(plan, c);
          CoxOptions opt;
          opt.robust = false;
          return std::exp(fit_arm_cox(rw.data, opt).beta(0));
        };
        rep.hazard_ratio.bootstrap = bootstrap_hr(imputed, replicate, rep.hazard_ratio.hr, bo);
      }
      if (rep.hazard_ratio.bootstrap->failures > 0)
        rep.warnings.push_back("bootstrap: " + std::to_string(rep.hazard_ratio.bootstrap->failures) + " of " +
                               std::to_string(replicates) + " replicates failed and were dropped");
    });
  }
  return rep;
}

}  // namespace ectrial
