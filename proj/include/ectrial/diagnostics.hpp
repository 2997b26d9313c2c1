#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ectrial/cohort.hpp"
#include "ectrial/csv.hpp"
#include "ectrial/ipcw.hpp"

namespace ectrial {

inline constexpr double kBalanceThreshold = 0.10;

/// Covariate values of one arm with per-subject weights (missing values skipped).
struct WeightedSample {
  std::vector<std::optional<double>> values;
  std::vector<double> weights;

  void push(std::optional<double> v, double w) {
    values.push_back(v);
    weights.push_back(w);
  }
};

namespace detail {

inline bool is_unknown_level(std::string_view level) {
  std::string s(level);
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s == "unknown";
}

inline std::pair<double, double> weighted_moments(const WeightedSample& s) {
  double sw = 0.0, m = 0.0;
  for (std::size_t i = 0; i < s.values.size(); ++i)
    if (s.values[i]) {
      sw += s.weights[i];
      m += s.weights[i] * *s.values[i];
    }
  if (!(sw > 0.0)) throw std::invalid_argument("smd: arm has no observed values");
  m /= sw;
  double v = 0.0;
  for (std::size_t i = 0; i < s.values.size(); ++i)
    if (s.values[i]) v += s.weights[i] * (*s.values[i] - m) * (*s.values[i] - m);
  return {m, v / sw};
}

inline std::vector<double> weighted_proportions(const WeightedSample& s, const CovariateSpec& spec) {
  std::vector<double> p(spec.levels.size(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < s.values.size(); ++i) {
    if (!s.values[i]) continue;
    const auto k = static_cast<std::size_t>(*s.values[i]);
    if (is_unknown_level(spec.levels[k])) continue;
    p[k] += s.weights[i];
    total += s.weights[i];
  }
  if (!(total > 0.0)) throw std::invalid_argument("smd: arm has no known-level values");
  for (double& x : p) x /= total;
  return p;
}

}  // namespace detail

/// Multi-category SMD from level proportions: sqrt(d' S^-1 d) over all but
/// one level, S the average of the two multinomial covariances. Levels
/// absent from both arms are dropped; K = 2 reduces to the binary formula.
inline double smd_from_proportions(std::span<const double> p1, std::span<const double> p2) {
  std::vector<std::size_t> keep;
  for (std::size_t k = 0; k < p1.size(); ++k)
    if (p1[k] > 0.0 || p2[k] > 0.0) keep.push_back(k);
  if (keep.size() < 2) return 0.0;
  const auto m = static_cast<Eigen::Index>(keep.size() - 1);
  Eigen::VectorXd d(m);
  Eigen::MatrixXd s(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const std::size_t a = keep[static_cast<std::size_t>(i) + 1];
    d(i) = p1[a] - p2[a];
    for (Eigen::Index j = 0; j < m; ++j) {
      const std::size_t b = keep[static_cast<std::size_t>(j) + 1];
      const double delta = a == b ? 1.0 : 0.0;
      s(i, j) = 0.5 * (p1[a] * (delta - p1[b]) + p2[a] * (delta - p2[b]));
    }
  }
  if (d.isZero(0.0)) return 0.0;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(s);
  double q;
  if (ldlt.info() == Eigen::Success && ldlt.isPositive() && ldlt.vectorD().minCoeff() > 1e-300)
    q = d.dot(ldlt.solve(d));
  else
    q = d.dot(s.completeOrthogonalDecomposition().pseudoInverse() * d);
  return std::sqrt(std::max(q, 0.0));
}

/// Standardized mean difference between two weighted samples of one covariate.
inline double smd(const WeightedSample& a, const WeightedSample& b, const CovariateSpec& spec) {
  if (spec.categorical()) {
    const auto p1 = detail::weighted_proportions(a, spec);
    const auto p2 = detail::weighted_proportions(b, spec);
    return smd_from_proportions(p1, p2);
  }
  const auto [m1, v1] = detail::weighted_moments(a);
  const auto [m2, v2] = detail::weighted_moments(b);
  const double diff = std::abs(m1 - m2);
  if (diff == 0.0) return 0.0;
  const double pooled = std::sqrt(0.5 * (v1 + v2));
  return pooled > 0.0 ? diff / pooled : std::numeric_limits<double>::infinity();
}

struct BalanceRow {
  std::string stage;
  std::string covariate;
  double smd_unweighted = 0.0;
  double smd_weighted = 0.0;
  bool balanced = false;
};

/// One row per covariate with role Balance, comparing RCT and OC subjects.
inline std::vector<BalanceRow> balance_table(const Cohort& cohort, std::span<const double> weights,
                                             const std::string& stage) {
  std::vector<BalanceRow> rows;
  for (std::size_t j : cohort.with_role(Role::Balance)) {
    const auto& spec = cohort.specs()[j];
    WeightedSample w[2], u[2];
    for (std::size_t i = 0; i < cohort.size(); ++i) {
      const int a = cohort[i].arm == Arm::RCT ? 0 : 1;
      w[a].push(cohort[i].values[j], weights[i]);
      u[a].push(cohort[i].values[j], 1.0);
    }
    BalanceRow r{stage, spec.name, smd(u[0], u[1], spec), smd(w[0], w[1], spec), false};
    r.balanced = r.smd_weighted < kBalanceThreshold;
    rows.push_back(r);
  }
  return rows;
}

/// Balance on the interval-expanded data: every subject at risk at each grid
/// time up to `horizon` contributes one row with its combined weight. Baseline
/// covariates with role Balance plus the time-varying indicators are compared.
inline std::vector<BalanceRow> balance_table_over_time(const Cohort& cohort, const WeightSeries& series,
                                                       std::span<const std::string> tv_names, GridSpec grid,
                                                       double horizon, const std::string& stage) {
  std::vector<std::size_t> at;  // interval index per (grid time, subject) row
  for (std::size_t g = 1;; ++g) {
    const double t = static_cast<double>(g) * grid.step;
    if (t > horizon + 1e-12) break;
    for (std::size_t k = 0; k < series.size(); ++k)
      if (series.intervals[k].start < t && t <= series.intervals[k].stop) at.push_back(k);
  }
  std::vector<BalanceRow> rows;
  auto add_row = [&](const CovariateSpec& spec, auto value_of) {
    WeightedSample w[2], u[2];
    for (std::size_t k : at) {
      const int a = series.arm[k] == Arm::RCT ? 0 : 1;
      const auto v = value_of(k);
      w[a].push(v, series.combined[k]);
      u[a].push(v, 1.0);
    }
    if (w[0].values.empty() || w[1].values.empty()) return;
    BalanceRow r{stage, spec.name, smd(u[0], u[1], spec), smd(w[0], w[1], spec), false};
    r.balanced = r.smd_weighted < kBalanceThreshold;
    rows.push_back(r);
  };
  for (std::size_t j : cohort.with_role(Role::Balance))
    add_row(cohort.specs()[j], [&](std::size_t k) { return cohort[series.intervals[k].subject].values[j]; });
  for (std::size_t t = 0; t < tv_names.size(); ++t) {
    const auto spec = CovariateSpec::categorical(tv_names[t], {"0", "1"});
    add_row(spec, [&](std::size_t k) -> std::optional<double> { return series.intervals[k].indicator(t) ? 1.0 : 0.0; });
  }
  return rows;
}

/// stage, covariate, smd. The unweighted values are emitted once, from the
/// first stage's rows.
inline void write_love_plot_csv(std::ostream& out, const std::vector<std::vector<BalanceRow>>& stages) {
  csv::Writer w(out);
  w.row({"stage", "covariate", "smd"});
  if (!stages.empty())
    for (const auto& r : stages.front()) w.row({"unweighted", r.covariate, csv::format_number(r.smd_unweighted)});
  for (const auto& rows : stages)
    for (const auto& r : rows) w.row({r.stage, r.covariate, csv::format_number(r.smd_weighted)});
}

}  // namespace ectrial
