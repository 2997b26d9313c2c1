#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "ectrial/cohort.hpp"
#include "ectrial/cox.hpp"
#include "ectrial/csv.hpp"
#include "ectrial/errors.hpp"
#include "ectrial/rng.hpp"

namespace ectrial {

/// Weighted (start, stop] rows for outcome analyses.
struct SurvivalData {
  std::vector<double> start;
  std::vector<double> stop;
  std::vector<double> weight;
  std::vector<std::uint8_t> event;
  std::vector<Arm> arm;
  std::vector<std::uint32_t> subject;

  std::size_t size() const { return stop.size(); }

  void push(double start_, double stop_, bool event_, double weight_, Arm arm_, std::uint32_t subject_) {
    start.push_back(start_);
    stop.push_back(stop_);
    event.push_back(event_ ? 1 : 0);
    weight.push_back(weight_);
    arm.push_back(arm_);
    subject.push_back(subject_);
  }

  SurvivalData only(Arm a) const {
    SurvivalData out;
    for (std::size_t i = 0; i < size(); ++i)
      if (arm[i] == a) out.push(start[i], stop[i], event[i], weight[i], arm[i], subject[i]);
    return out;
  }
};

struct KmCurve {
  std::vector<double> time;
  std::vector<double> survival;
  std::vector<double> greenwood_var;
  std::vector<double> n_at_risk;
  std::vector<double> n_events;
  std::vector<double> lower;
  std::vector<double> upper;
  std::optional<double> median;
  std::optional<double> median_lower;
  std::optional<double> median_upper;

  /// Right-continuous step function, 1 before the first event time.
  double at(double t) const {
    auto it = std::upper_bound(time.begin(), time.end(), t);
    if (it == time.begin()) return 1.0;
    return survival[static_cast<std::size_t>(it - time.begin()) - 1];
  }
};

namespace detail {

/// Weighted risk-set and event mass at each distinct event time, ascending.
struct RiskTable {
  std::vector<double> time, n, d, n_rct, d_rct;
};

inline RiskTable risk_table(const SurvivalData& s) {
  const std::size_t n = s.size();
  std::vector<std::uint32_t> by_stop(n), by_start(n);
  std::iota(by_stop.begin(), by_stop.end(), 0u);
  by_start = by_stop;
  std::sort(by_stop.begin(), by_stop.end(), [&](auto a, auto b) { return s.stop[a] != s.stop[b] ? s.stop[a] > s.stop[b] : a < b; });
  std::sort(by_start.begin(), by_start.end(), [&](auto a, auto b) { return s.start[a] != s.start[b] ? s.start[a] > s.start[b] : a < b; });
  std::vector<double> times;
  for (auto i : by_stop)
    if (s.event[i] && s.weight[i] > 0.0 && (times.empty() || times.back() != s.stop[i])) times.push_back(s.stop[i]);

  RiskTable rt;
  double at_risk = 0.0, at_risk_rct = 0.0;
  std::size_t a = 0, b = 0;
  for (double t : times) {
    double d = 0.0, d_rct = 0.0;
    for (; a < n && s.stop[by_stop[a]] >= t; ++a) {
      const auto i = by_stop[a];
      at_risk += s.weight[i];
      if (s.arm[i] == Arm::RCT) at_risk_rct += s.weight[i];
      if (s.event[i] && s.stop[i] == t) {
        d += s.weight[i];
        if (s.arm[i] == Arm::RCT) d_rct += s.weight[i];
      }
    }
    for (; b < n && s.start[by_start[b]] >= t; ++b) {
      const auto i = by_start[b];
      at_risk -= s.weight[i];
      if (s.arm[i] == Arm::RCT) at_risk_rct -= s.weight[i];
    }
    rt.time.push_back(t);
    rt.n.push_back(at_risk);
    rt.d.push_back(d);
    rt.n_rct.push_back(at_risk_rct);
    rt.d_rct.push_back(d_rct);
  }
  std::reverse(rt.time.begin(), rt.time.end());
  std::reverse(rt.n.begin(), rt.n.end());
  std::reverse(rt.d.begin(), rt.d.end());
  std::reverse(rt.n_rct.begin(), rt.n_rct.end());
  std::reverse(rt.d_rct.begin(), rt.d_rct.end());
  return rt;
}

inline double normal_quantile_975() { return 1.959963984540054; }

}  // namespace detail

/// Median and its confidence limits from a curve: the smallest time at which
/// the estimate (resp. lower, upper band) is at or below one half.
struct MedianSurvival {
  std::optional<double> median;
  std::optional<double> lower;
  std::optional<double> upper;
};

inline MedianSurvival median_survival(const KmCurve& curve) {
  MedianSurvival m;
  for (std::size_t k = 0; k < curve.time.size(); ++k) {
    if (!m.median && curve.survival[k] <= 0.5) m.median = curve.time[k];
    if (!m.lower && curve.lower[k] <= 0.5) m.lower = curve.time[k];
    if (!m.upper && curve.upper[k] <= 0.5) m.upper = curve.time[k];
  }
  return m;
}

/// Weighted product-limit estimate with Greenwood variance and a log(-log)
/// pointwise band. Pass data for one arm (see SurvivalData::only).
inline KmCurve weighted_km(const SurvivalData& data, double z = detail::normal_quantile_975()) {
  for (double w : data.weight)
    if (!(w > 0.0)) throw std::invalid_argument("weighted_km: weights must be > 0");
  const auto rt = detail::risk_table(data);
  KmCurve c;
  double s = 1.0, g = 0.0;
  for (std::size_t k = 0; k < rt.time.size(); ++k) {
    const double n = rt.n[k], d = rt.d[k];
    s *= (n - d) / n;
    double lo = s, hi = s;
    if (n - d > 0.0 && s > 0.0) {
      g += d / (n * (n - d));
      if (s < 1.0) {
        const double se = std::sqrt(g) / std::abs(std::log(s));
        lo = std::pow(s, std::exp(z * se));
        hi = std::pow(s, std::exp(-z * se));
      }
    } else {
      s = std::max(s, 0.0);
      lo = hi = s;
    }
    c.time.push_back(rt.time[k]);
    c.survival.push_back(s);
    c.greenwood_var.push_back(s > 0.0 ? s * s * g : 0.0);
    c.n_at_risk.push_back(n);
    c.n_events.push_back(d);
    c.lower.push_back(lo);
    c.upper.push_back(hi);
  }
  const auto m = median_survival(c);
  c.median = m.median;
  c.median_lower = m.lower;
  c.median_upper = m.upper;
  return c;
}

struct LogRankResult {
  double statistic = 0.0;
  double p_value = 1.0;
  double observed_minus_expected = 0.0;  // RCT arm
  double variance = 0.0;
};

/// Two-arm weighted log-rank test. Weights are rescaled to mean one over rows
/// before use, so the statistic is invariant to a common weight scale and
/// equals the classical test for unit weights.
inline LogRankResult weighted_logrank(const SurvivalData& data) {
  if (data.size() == 0) throw EstimationError("log-rank: no data");
  SurvivalData s = data;
  const double mean_w = std::accumulate(s.weight.begin(), s.weight.end(), 0.0) / static_cast<double>(s.size());
  for (double& w : s.weight) w /= mean_w;
  const auto rt = detail::risk_table(s);
  if (rt.time.empty()) throw EstimationError("log-rank: zero events");
  LogRankResult r;
  for (std::size_t k = 0; k < rt.time.size(); ++k) {
    const double n = rt.n[k], d = rt.d[k], p1 = rt.n_rct[k] / n;
    r.observed_minus_expected += rt.d_rct[k] - d * p1;
    const double ties = n > 1.0 ? (n - d) / (n - 1.0) : (n - d > 0.0 ? 1.0 : 0.0);
    r.variance += d * p1 * (1.0 - p1) * std::max(ties, 0.0);
  }
  r.statistic = r.variance > 0.0 ? r.observed_minus_expected * r.observed_minus_expected / r.variance : 0.0;
  r.p_value = std::erfc(std::sqrt(r.statistic / 2.0));
  return r;
}

/// Cox model of the outcome on the RCT indicator; HR = exp(beta) compares RCT to OC.
inline CoxFit fit_arm_cox(const SurvivalData& s, const CoxOptions& opt = {}) {
  CoxData d;
  d.reserve(s.size());
  d.x.resize(static_cast<Eigen::Index>(s.size()), 1);
  for (std::size_t i = 0; i < s.size(); ++i) {
    d.start.push_back(s.start[i]);
    d.stop.push_back(s.stop[i]);
    d.event.push_back(s.event[i]);
    d.weight.push_back(s.weight[i]);
    d.cluster.push_back(s.subject[i]);
    d.x(static_cast<Eigen::Index>(i), 0) = s.arm[i] == Arm::RCT ? 1.0 : 0.0;
  }
  d.names = {"arm=RCT"};
  return fit_weighted_cox(d, opt);
}

/// arm, time, survival, lo, hi, n_at_risk_weighted
inline void write_km_csv(std::ostream& out, const std::vector<std::pair<Arm, KmCurve>>& curves) {
  csv::Writer w(out);
  w.row({"arm", "time", "survival", "lo", "hi", "n_at_risk_weighted"});
  for (const auto& [arm, c] : curves) {
    w.row({std::string(to_string(arm)), "0", "1", "1", "1", c.n_at_risk.empty() ? "0" : csv::format_number(c.n_at_risk.front())});
    for (std::size_t k = 0; k < c.time.size(); ++k)
      w.row({std::string(to_string(arm)), csv::format_number(c.time[k]), csv::format_number(c.survival[k]),
             csv::format_number(c.lower[k]), csv::format_number(c.upper[k]), csv::format_number(c.n_at_risk[k])});
  }
}

// ---------------------------------------------------------------------------
// Bootstrap.

struct BootstrapOptions {
  int replicates = 500;
  std::uint64_t seed = 0;
  int threads = 1;
  double max_failure_fraction = 0.05;
  double level = 0.95;
};

struct BootstrapCi {
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  int replicates = 0;
  std::uint64_t seed = 0;
  int failures = 0;
  std::vector<double> replicate_hr;  // successful replicates, by replicate index
};

/// Linear-interpolation (type 7) sample quantile of sorted values.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw std::invalid_argument("quantile of empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

/// Stratified (within-arm) resample of subjects; duplicates get distinct ids.
inline Cohort resample_within_arms(const Cohort& cohort, Philox4x32& rng) {
  std::vector<std::uint32_t> idx[2];
  for (std::uint32_t i = 0; i < cohort.size(); ++i) idx[cohort[i].arm == Arm::RCT ? 0 : 1].push_back(i);
  std::vector<Subject> out;
  out.reserve(cohort.size());
  std::size_t draw = 0;
  for (const auto& pool : idx) {
    for (std::size_t k = 0; k < pool.size(); ++k) {
      Subject s = cohort[pool[rng.below(pool.size())]];
      s.id += "#" + std::to_string(draw++);
      out.push_back(std::move(s));
    }
  }
  return cohort.with_subjects(std::move(out));
}

/// Stratified (within-arm) resample of subjects' outcome rows, keeping each
/// row's weight. Drawn subject k gets subject index k.
inline SurvivalData resample_rows_within_arms(const SurvivalData& data, Philox4x32& rng) {
  std::map<std::uint32_t, std::vector<std::size_t>> rows_of;
  for (std::size_t i = 0; i < data.size(); ++i) rows_of[data.subject[i]].push_back(i);
  std::vector<const std::vector<std::size_t>*> pool[2];
  for (const auto& [subject, rows] : rows_of) pool[data.arm[rows.front()] == Arm::RCT ? 0 : 1].push_back(&rows);
  SurvivalData out;
  std::uint32_t draw = 0;
  for (const auto& p : pool) {
    for (std::size_t k = 0; k < p.size(); ++k, ++draw)
      for (std::size_t i : *p[rng.below(p.size())])
        out.push(data.start[i], data.stop[i], data.event[i], data.weight[i], data.arm[i], draw);
  }
  return out;
}

namespace detail {

/// Runs `replicate(rng)` for r = 0..B-1 with stream r of the seed and reduces
/// by replicate index, so the interval does not depend on the thread count.
template <class F>
BootstrapCi percentile_bootstrap(F&& replicate, double point, const BootstrapOptions& opt) {
  if (opt.replicates < 1) throw ConfigError("bootstrap replicates must be >= 1");
  const auto reps = static_cast<std::size_t>(opt.replicates);
  std::vector<std::optional<double>> hr(reps);
  std::atomic<std::size_t> next{0};
  const std::uint64_t key = mix_seed(opt.seed, 0xB007);

  auto worker = [&] {
    for (std::size_t r = next++; r < reps; r = next++) {
      Philox4x32 rng(key, r);
      try {
        const double v = replicate(rng);
        if (std::isfinite(v)) hr[r] = v;
      } catch (const Error&) {
      } catch (const std::invalid_argument&) {
      }
    }
  };
  const int threads = std::max(1, std::min<int>(opt.threads, opt.replicates));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  BootstrapCi ci;
  ci.point = point;
  ci.replicates = opt.replicates;
  ci.seed = opt.seed;
  for (const auto& v : hr) {
    if (v)
      ci.replicate_hr.push_back(*v);
    else
      ++ci.failures;
  }
  if (static_cast<double>(ci.failures) > opt.max_failure_fraction * static_cast<double>(opt.replicates) ||
      ci.replicate_hr.empty())
    throw EstimationError("bootstrap: " + std::to_string(ci.failures) + " of " + std::to_string(opt.replicates) +
                          " replicates failed; the estimand is likely not identifiable at this sample size");
  std::vector<double> sorted = ci.replicate_hr;
  std::sort(sorted.begin(), sorted.end());
  const double alpha = (1.0 - opt.level) / 2.0;
  ci.lo = quantile_sorted(sorted, alpha);
  ci.hi = quantile_sorted(sorted, 1.0 - alpha);
  return ci;
}

}  // namespace detail

/// Percentile bootstrap for a hazard ratio. `pipeline` maps a cohort to an
/// HR and must be deterministic; a throwing replicate counts as a failure.
inline BootstrapCi bootstrap_hr(const Cohort& cohort, const std::function<double(const Cohort&)>& pipeline,
                                double point, const BootstrapOptions& opt) {
  return detail::percentile_bootstrap([&](Philox4x32& rng) { return pipeline(resample_within_arms(cohort, rng)); },
                                      point, opt);
}

/// Naive bootstrap that keeps every subject's estimated weights fixed and
/// only refits the weighted Cox model on resampled outcome rows.
inline BootstrapCi bootstrap_hr_fixed_weights(const SurvivalData& data, double point, const BootstrapOptions& opt) {
  CoxOptions cox;
  cox.robust = false;
  return detail::percentile_bootstrap(
      [&](Philox4x32& rng) { return fit_arm_cox(resample_rows_within_arms(data, rng), cox).hazard_ratio(); }, point,
      opt);
}

}  // namespace ectrial
