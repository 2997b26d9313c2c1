#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ectrial/cohort.hpp"
#include "ectrial/cox.hpp"
#include "ectrial/csv.hpp"
#include "ectrial/design.hpp"
#include "ectrial/errors.hpp"
#include "ectrial/survival.hpp"

namespace ectrial {

/// Outcome cohort censored at switch, plus the censoring-model cohort in
/// which switch is the event. Both share follow-up times subject by subject.
struct ArtificialCensoring {
  Cohort outcome;
  Cohort censoring;
  std::size_t switches = 0;
};

inline ArtificialCensoring artificial_censor(const Cohort& cohort) {
  std::vector<Subject> outcome, censoring;
  outcome.reserve(cohort.size());
  censoring.reserve(cohort.size());
  std::size_t switches = 0;
  for (const Subject& s : cohort.subjects()) {
    Subject o = s;
    Subject c = s;
    if (s.switch_time) {
      ++switches;
      o.followup_time = *s.switch_time;
      o.event = false;
      if (o.progression_time && *o.progression_time > o.followup_time) o.progression_time.reset();
      c.followup_time = o.followup_time;
      c.progression_time = o.progression_time;
      c.event = true;
    } else {
      c.event = false;
    }
    outcome.push_back(std::move(o));
    censoring.push_back(std::move(c));
  }
  return {cohort.with_subjects(std::move(outcome)), cohort.with_subjects(std::move(censoring)), switches};
}

/// One Cox model for the switch hazard with its design.
struct CensoringModel {
  std::vector<DesignTerm> terms;  // terms with a coefficient in `cox`
  std::vector<std::string> dropped;  // constant within the arm, coefficient 0
  CoxFit cox;

  double linear_predictor(const Subject& s, std::uint32_t tv_mask) const {
    double lp = 0.0;
    for (std::size_t j = 0; j < terms.size(); ++j) lp += cox.beta(static_cast<Eigen::Index>(j)) * term_value(terms[j], s, tv_mask);
    return lp;
  }
};

struct CensoringFit {
  Arm arm = Arm::RCT;
  CensoringModel denominator;  // baseline + time-varying covariates
  CensoringModel numerator;    // baseline subset only
  std::size_t switch_events = 0;
};

namespace detail {

inline CensoringModel fit_switch_model(const Cohort& cohort, const CountingProcess& cp, Arm arm,
                                       std::span<const std::size_t> covariates, bool time_varying,
                                       const CoxOptions& opt) {
  std::vector<std::string> tv = time_varying ? cp.tv_names : std::vector<std::string>{};
  auto all_terms = make_terms(cohort, covariates, false, {}, tv);

  std::vector<const RiskInterval*> rows;
  for (const auto& iv : cp.intervals)
    if (cohort[iv.subject].arm == arm) rows.push_back(&iv);

  // Drop terms that are constant within this arm's rows.
  CensoringModel model;
  for (const auto& term : all_terms) {
    bool varies = false;
    double first = 0.0;
    for (std::size_t r = 0; r < rows.size() && !varies; ++r) {
      const double v = term_value(term, cohort[rows[r]->subject], rows[r]->tv_mask);
      if (r == 0)
        first = v;
      else if (v != first)
        varies = true;
    }
    if (varies)
      model.terms.push_back(term);
    else
      model.dropped.push_back(term.name);
  }

  CoxData d;
  d.reserve(rows.size());
  d.x.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(model.terms.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const RiskInterval& iv = *rows[r];
    d.start.push_back(iv.start);
    d.stop.push_back(iv.stop);
    d.event.push_back(iv.event_at_stop ? 1 : 0);
    d.weight.push_back(1.0);
    d.cluster.push_back(iv.subject);
    for (std::size_t j = 0; j < model.terms.size(); ++j)
      d.x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = term_value(model.terms[j], cohort[iv.subject], iv.tv_mask);
  }
  d.names = term_names(model.terms);
  CoxOptions o = opt;
  o.robust = false;
  model.cox = fit_weighted_cox(d, o);
  return model;
}

}  // namespace detail

/// Fits the denominator (baseline + time-varying) and numerator (baseline
/// subset) switch-hazard models on one arm. `cp` must be built from the
/// censoring cohort, so event_at_stop marks a switch.
inline CensoringFit fit_censoring_model(const Cohort& censoring, const CountingProcess& cp, Arm arm,
                                        std::span<const std::string> denominator,
                                        std::span<const std::string> numerator, const CoxOptions& opt = {}) {
  auto resolve = [&](std::span<const std::string> names) {
    std::vector<std::size_t> idx;
    for (const auto& n : names) {
      auto i = censoring.spec_index(n);
      if (!i) throw ConfigError("censoring model: undeclared covariate '" + n + "'");
      idx.push_back(*i);
    }
    return idx;
  };
  const auto den = resolve(denominator);
  const auto num = resolve(numerator);

  CensoringFit fit;
  fit.arm = arm;
  bool any = false;
  for (const auto& s : censoring.subjects()) {
    if (s.arm != arm) continue;
    any = true;
    fit.switch_events += s.event;
  }
  if (!any) throw EstimationError("censoring model: arm " + std::string(to_string(arm)) + " is empty");
  if (fit.switch_events == 0)
    throw EstimationError("censoring model: no switch events in arm " + std::string(to_string(arm)) +
                          "; censoring weights are undefined");
  fit.denominator = detail::fit_switch_model(censoring, cp, arm, den, true, opt);
  fit.numerator = detail::fit_switch_model(censoring, cp, arm, num, false, opt);
  return fit;
}

/// Convenience overload building the counting process itself.
inline CensoringFit fit_censoring_model(const Cohort& censoring, Arm arm, std::span<const std::string> denominator,
                                        std::span<const std::string> numerator, GridSpec grid,
                                        std::span<const TimeVarying> time_varying, const CoxOptions& opt = {}) {
  const auto cp = to_counting_process(censoring, grid, time_varying);
  return fit_censoring_model(censoring, cp, arm, denominator, numerator, opt);
}

struct PathSegment {
  double start = 0.0;
  double stop = 0.0;
  std::uint32_t tv_mask = 0;
};

struct UncensoredProbability {
  double value = 1.0;
  bool beyond_support = false;
};

/// P(no switch by t | covariate path): exp(-sum of Breslow increments times
/// exp(lp) in force at each increment). Past the end of the path the last
/// segment's covariates are carried forward.
inline UncensoredProbability uncensored_probability(const CensoringModel& model, const Subject& s,
                                                    std::span<const PathSegment> path, double t) {
  if (!(t >= 0.0)) throw std::invalid_argument("uncensored_probability: t must be >= 0");
  const BaselineHazard& base = model.cox.baseline;
  double h = 0.0;
  double covered = 0.0;
  std::uint32_t last_mask = 0;
  for (const auto& seg : path) {
    if (seg.start >= t) break;
    const double hi = std::min(seg.stop, t);
    h += std::exp(model.linear_predictor(s, seg.tv_mask)) * (base.at(hi) - base.at(seg.start));
    covered = hi;
    last_mask = seg.tv_mask;
  }
  if (covered < t) h += std::exp(model.linear_predictor(s, last_mask)) * (base.at(t) - base.at(covered));
  return {std::exp(-h), t > base.support_end};
}

struct StabilizedWeights {
  std::vector<double> sw;  // one per interval of cp; 1 outside the arm
  std::size_t beyond_support = 0;
};

/// sw = P(no switch by stop | numerator covariates) /
///      P(no switch by stop | denominator covariates and path),
/// evaluated at each interval's stop for subjects of `fit.arm`.
inline StabilizedWeights stabilized_weights(const CensoringFit& fit, const Cohort& cohort, const CountingProcess& cp,
                                            double positivity_floor = 1e-12) {
  StabilizedWeights out;
  out.sw.assign(cp.intervals.size(), 1.0);
  const BaselineHazard& bn = fit.numerator.cox.baseline;
  const BaselineHazard& bd = fit.denominator.cox.baseline;
  std::uint32_t current = std::numeric_limits<std::uint32_t>::max();
  double hn = 0.0, hd = 0.0, lp_num = 0.0;
  for (std::size_t k = 0; k < cp.intervals.size(); ++k) {
    const RiskInterval& iv = cp.intervals[k];
    const Subject& s = cohort[iv.subject];
    if (s.arm != fit.arm) continue;
    if (iv.subject != current) {
      current = iv.subject;
      hn = hd = 0.0;
      lp_num = fit.numerator.linear_predictor(s, 0);
    }
    hn += std::exp(lp_num) * (bn.at(iv.stop) - bn.at(iv.start));
    hd += std::exp(fit.denominator.linear_predictor(s, iv.tv_mask)) * (bd.at(iv.stop) - bd.at(iv.start));
    if (std::exp(-hd) < positivity_floor)
      throw PositivityError("subject '" + s.id + "' at t=" + csv::format_number(iv.stop) +
                            ": probability of remaining unswitched is below " + csv::format_number(positivity_floor));
    if (iv.stop > bd.support_end || iv.stop > bn.support_end) ++out.beyond_support;
    out.sw[k] = std::exp(hd - hn);
  }
  return out;
}

// ---------------------------------------------------------------------------

enum class TrimMode { Cap, Remove };

/// Per-interval weights of the outcome analysis.
struct WeightSeries {
  std::vector<RiskInterval> intervals;  // event_at_stop = death
  std::vector<Arm> arm;
  std::vector<double> iptw;
  std::vector<double> ipcw;
  std::vector<double> combined;
  std::optional<double> truncation_time;
  std::map<Arm, double> cap_percentile;
  std::map<Arm, double> cap_value;
  std::size_t capped = 0;
  std::size_t removed = 0;

  std::size_t size() const { return intervals.size(); }
};

/// `subject_iptw` is indexed like the cohort; `ipcw` like cp.intervals
/// (empty means all ones).
inline WeightSeries make_weight_series(const Cohort& cohort, const CountingProcess& cp,
                                       std::span<const double> subject_iptw, std::span<const double> ipcw = {}) {
  WeightSeries w;
  const std::size_t n = cp.intervals.size();
  w.intervals = cp.intervals;
  w.arm.reserve(n);
  w.iptw.reserve(n);
  w.ipcw.reserve(n);
  w.combined.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto& iv = cp.intervals[k];
    const double a = subject_iptw[iv.subject];
    const double c = ipcw.empty() ? 1.0 : ipcw[k];
    w.arm.push_back(cohort[iv.subject].arm);
    w.iptw.push_back(a);
    w.ipcw.push_back(c);
    w.combined.push_back(a * c);
    w.intervals[k].weight = a * c;
  }
  return w;
}

/// Nearest-rank percentile: the ceil(p N)-th smallest value.
inline double nearest_rank(std::vector<double> values, double p) {
  if (values.empty()) throw std::invalid_argument("percentile of empty sample");
  std::sort(values.begin(), values.end());
  const double r = std::ceil(p * static_cast<double>(values.size()) - 1e-9);
  const auto rank = static_cast<std::size_t>(std::clamp(r, 1.0, static_cast<double>(values.size())));
  return values[rank - 1];
}

/// Administratively censors follow-up at `truncation` (if set), then caps (or
/// removes) IPCW values above each arm's nearest-rank percentile, computed
/// over that arm's interval-level weights.
inline WeightSeries truncate_and_trim(const WeightSeries& in, std::optional<double> truncation,
                                      const std::map<Arm, double>& percentiles, TrimMode mode = TrimMode::Cap) {
  for (const auto& [arm, p] : percentiles)
    if (!(p > 0.0 && p <= 1.0)) throw ConfigError("cap percentile must be in (0, 1]");
  WeightSeries out;
  out.truncation_time = truncation;
  out.cap_percentile = percentiles;
  for (std::size_t k = 0; k < in.size(); ++k) {
    RiskInterval iv = in.intervals[k];
    if (truncation) {
      if (iv.start >= *truncation) continue;
      if (iv.stop > *truncation) {
        iv.stop = *truncation;
        iv.event_at_stop = false;
      }
    }
    out.intervals.push_back(iv);
    out.arm.push_back(in.arm[k]);
    out.iptw.push_back(in.iptw[k]);
    out.ipcw.push_back(in.ipcw[k]);
    out.combined.push_back(in.combined[k]);
  }

  for (const auto& [arm, p] : percentiles) {
    std::vector<double> vals;
    for (std::size_t k = 0; k < out.size(); ++k)
      if (out.arm[k] == arm) vals.push_back(out.ipcw[k]);
    if (vals.empty()) continue;
    out.cap_value[arm] = nearest_rank(vals, p);
  }

  WeightSeries trimmed;
  trimmed.truncation_time = out.truncation_time;
  trimmed.cap_percentile = out.cap_percentile;
  trimmed.cap_value = out.cap_value;
  for (std::size_t k = 0; k < out.size(); ++k) {
    double c = out.ipcw[k];
    auto cap = out.cap_value.find(out.arm[k]);
    if (cap != out.cap_value.end() && c > cap->second) {
      if (mode == TrimMode::Remove) {
        ++trimmed.removed;
        continue;
      }
      c = cap->second;
      ++trimmed.capped;
    }
    RiskInterval iv = out.intervals[k];
    iv.weight = out.iptw[k] * c;
    trimmed.intervals.push_back(iv);
    trimmed.arm.push_back(out.arm[k]);
    trimmed.iptw.push_back(out.iptw[k]);
    trimmed.ipcw.push_back(c);
    trimmed.combined.push_back(iv.weight);
  }
  return trimmed;
}

/// Outcome rows with combined weights. Consecutive intervals of one subject
/// with identical weight are merged (the outcome model has no time-varying
/// covariates), so equal weights give identical rows whatever the splitting.
inline SurvivalData to_survival_data(const WeightSeries& w) {
  SurvivalData s;
  for (std::size_t k = 0; k < w.size(); ++k) {
    const RiskInterval& iv = w.intervals[k];
    const std::size_t last = s.size();
    if (last > 0 && s.subject[last - 1] == iv.subject && s.stop[last - 1] == iv.start && !s.event[last - 1] &&
        s.weight[last - 1] == w.combined[k]) {
      s.stop[last - 1] = iv.stop;
      s.event[last - 1] = iv.event_at_stop ? 1 : 0;
      continue;
    }
    s.push(iv.start, iv.stop, iv.event_at_stop, w.combined[k], w.arm[k], iv.subject);
  }
  return s;
}

struct WeightDiagnosticRow {
  Arm arm;
  double time;
  std::size_t n_at_risk;
  double mean_sw;
  double p01;
  double p99;
  double max;
};

/// Stabilized-weight summary at each grid time (intervals with start < t <= stop).
inline std::vector<WeightDiagnosticRow> weight_diagnostics(const WeightSeries& w, GridSpec grid, double horizon) {
  std::vector<WeightDiagnosticRow> rows;
  for (Arm arm : kArms) {
    for (std::size_t g = 1;; ++g) {
      const double t = static_cast<double>(g) * grid.step;
      if (t > horizon + 1e-12) break;
      std::vector<double> vals;
      for (std::size_t k = 0; k < w.size(); ++k)
        if (w.arm[k] == arm && w.intervals[k].start < t && t <= w.intervals[k].stop) vals.push_back(w.ipcw[k]);
      if (vals.empty()) continue;
      double sum = 0.0;
      for (double v : vals) sum += v;
      rows.push_back({arm, t, vals.size(), sum / static_cast<double>(vals.size()), nearest_rank(vals, 0.01),
                      nearest_rank(vals, 0.99), *std::max_element(vals.begin(), vals.end())});
    }
  }
  return rows;
}

inline void write_weight_diagnostics_csv(std::ostream& out, const std::vector<WeightDiagnosticRow>& rows) {
  csv::Writer w(out);
  w.row({"arm", "time", "n_at_risk", "mean_sw", "p01", "p99", "max"});
  for (const auto& r : rows)
    w.row({std::string(to_string(r.arm)), csv::format_number(r.time), std::to_string(r.n_at_risk),
           csv::format_number(r.mean_sw), csv::format_number(r.p01), csv::format_number(r.p99),
           csv::format_number(r.max)});
}

}  // namespace ectrial
