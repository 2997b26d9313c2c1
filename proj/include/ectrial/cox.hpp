#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ectrial/errors.hpp"

namespace ectrial {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Counting-process input for a Cox model: row i is at risk on (start, stop]
/// with covariates x.row(i) and case weight weight[i]. `cluster` groups rows
/// of one subject for the robust variance.
struct CoxData {
  std::vector<double> start;
  std::vector<double> stop;
  std::vector<std::uint8_t> event;
  std::vector<double> weight;
  std::vector<std::uint32_t> cluster;
  RowMatrix x;
  std::vector<std::string> names;

  std::size_t size() const { return stop.size(); }
  Eigen::Index dim() const { return x.cols(); }

  void reserve(std::size_t n) {
    start.reserve(n);
    stop.reserve(n);
    event.reserve(n);
    weight.reserve(n);
    cluster.reserve(n);
  }
};

struct CoxOptions {
  int max_iter = 50;
  double tol = 1e-9;  // on the max-norm of the score, per unit of mean weight
  bool robust = true;
};

/// Breslow cumulative baseline hazard (covariates at zero), a right-continuous
/// step function with jumps at event times.
struct BaselineHazard {
  std::vector<double> time;
  std::vector<double> cumhaz;
  double support_end = 0.0;  // largest follow-up time in the fitting data

  double at(double t) const {
    auto it = std::upper_bound(time.begin(), time.end(), t);
    if (it == time.begin()) return 0.0;
    return cumhaz[static_cast<std::size_t>(it - time.begin()) - 1];
  }
};

struct CoxFit {
  std::vector<std::string> names;
  Eigen::VectorXd beta;
  Eigen::MatrixXd cov;         // inverse information
  Eigen::MatrixXd robust_cov;  // cluster sandwich
  BaselineHazard baseline;
  double loglik = 0.0;
  int iterations = 0;
  bool converged = false;
  double score_norm = 0.0;
  std::vector<double> loglik_trace;

  double hazard_ratio(Eigen::Index j = 0) const { return std::exp(beta(j)); }
};

struct CoxEvaluation {
  double loglik = 0.0;
  Eigen::VectorXd score;
  Eigen::MatrixXd information;
};

namespace detail {

/// Sort orders and event-time layout shared by every Newton iteration.
struct CoxLayout {
  std::vector<std::uint32_t> by_stop;   // stop descending
  std::vector<std::uint32_t> by_start;  // start descending
  std::vector<double> event_times;      // descending, distinct, positive event weight
  Eigen::VectorXd center;
  Eigen::VectorXd sd;
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> xc;  // centered covariates
  double total_weight = 0.0;

  explicit CoxLayout(const CoxData& d) {
    const auto n = static_cast<std::uint32_t>(d.size());
    by_stop.resize(n);
    std::iota(by_stop.begin(), by_stop.end(), 0u);
    by_start = by_stop;
    std::sort(by_stop.begin(), by_stop.end(), [&](std::uint32_t a, std::uint32_t b) {
      return d.stop[a] != d.stop[b] ? d.stop[a] > d.stop[b] : a < b;
    });
    std::sort(by_start.begin(), by_start.end(), [&](std::uint32_t a, std::uint32_t b) {
      return d.start[a] != d.start[b] ? d.start[a] > d.start[b] : a < b;
    });
    for (std::uint32_t i : by_stop)
      if (d.event[i] && d.weight[i] > 0.0 && (event_times.empty() || event_times.back() != d.stop[i]))
        event_times.push_back(d.stop[i]);

    const Eigen::Index p = d.dim();
    center = Eigen::VectorXd::Zero(p);
    Eigen::VectorXd sq = Eigen::VectorXd::Zero(p);
    for (std::uint32_t i = 0; i < n; ++i) {
      total_weight += d.weight[i];
      center += d.weight[i] * d.x.row(i).transpose();
    }
    if (total_weight > 0.0) center /= total_weight;
    xc = d.x.rowwise() - center.transpose();
    for (std::uint32_t i = 0; i < n; ++i) sq += d.weight[i] * xc.row(i).transpose().cwiseAbs2();
    sd = total_weight > 0.0 ? (sq / total_weight).cwiseSqrt().eval() : sq;
  }
};

/// Per event time quantities kept after the final evaluation.
struct EventTerms {
  std::vector<double> time;  // descending
  std::vector<double> d;     // weighted event count
  std::vector<double> s0;    // weighted risk-set sum of exp(centered lp)
  std::vector<Eigen::VectorXd> xbar;
};

inline CoxEvaluation evaluate(const CoxData& d, const CoxLayout& lay, const Eigen::VectorXd& beta,
                              EventTerms* keep = nullptr) {
  const Eigen::Index p = d.dim();
  const std::size_t n = d.size();
  const Eigen::VectorXd eta_all = lay.xc * beta;
  std::vector<double> risk(n);
  for (std::size_t i = 0; i < n; ++i) risk[i] = d.weight[i] * std::exp(eta_all(static_cast<Eigen::Index>(i)));

  CoxEvaluation ev;
  ev.score = Eigen::VectorXd::Zero(p);
  ev.information = Eigen::MatrixXd::Zero(p, p);
  double s0 = 0.0;
  Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
  Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(p, p);  // lower triangle only
  Eigen::VectorXd wx(p);
  auto add = [&](std::uint32_t i, double sign) {
    const double r = sign * risk[i];
    const double* x = lay.xc.row(i).data();
    s0 += r;
    for (Eigen::Index j = 0; j < p; ++j) {
      const double rx = r * x[j];
      s1(j) += rx;
      for (Eigen::Index k = j; k < p; ++k) s2(k, j) += rx * x[k];
    }
  };
  std::size_t a = 0, b = 0;
  for (double t : lay.event_times) {
    double dw = 0.0, weta = 0.0;
    wx.setZero();
    for (; a < n && d.stop[lay.by_stop[a]] >= t; ++a) {
      const std::uint32_t i = lay.by_stop[a];
      add(i, 1.0);
      if (d.event[i] && d.stop[i] == t) {
        dw += d.weight[i];
        weta += d.weight[i] * eta_all(i);
        wx.noalias() += d.weight[i] * lay.xc.row(i).transpose();
      }
    }
    for (; b < n && d.start[lay.by_start[b]] >= t; ++b) add(lay.by_start[b], -1.0);
    const Eigen::VectorXd xbar = s1 / s0;
    ev.loglik += weta - dw * std::log(s0);
    ev.score.noalias() += wx - dw * xbar;
    ev.information.noalias() += dw * (s2 / s0 - xbar * xbar.transpose());
    if (keep) {
      keep->time.push_back(t);
      keep->d.push_back(dw);
      keep->s0.push_back(s0);
      keep->xbar.push_back(xbar);
    }
  }
  Eigen::MatrixXd full = ev.information.selfadjointView<Eigen::Lower>();
  ev.information = std::move(full);
  return ev;
}

}  // namespace detail

/// Weighted Breslow partial log-likelihood, score and observed information.
inline CoxEvaluation cox_partial_likelihood(const CoxData& data, const Eigen::VectorXd& beta) {
  detail::CoxLayout lay(data);
  return detail::evaluate(data, lay, beta);
}

/// Weighted Cox proportional hazards fit on counting-process data with
/// Breslow ties, Newton-Raphson with step halving, cluster-robust sandwich
/// variance and the Breslow baseline hazard.
inline CoxFit fit_weighted_cox(const CoxData& data, const CoxOptions& opt = {}) {
  const Eigen::Index p = data.dim();
  const std::size_t n = data.size();
  if (data.start.size() != n || data.event.size() != n || data.weight.size() != n ||
      static_cast<std::size_t>(data.x.rows()) != n)
    throw std::invalid_argument("fit_weighted_cox: ragged input");
  for (std::size_t i = 0; i < n; ++i) {
    if (!(data.stop[i] > data.start[i])) throw std::invalid_argument("fit_weighted_cox: interval with stop <= start");
    if (!(data.weight[i] >= 0.0) || !std::isfinite(data.weight[i]))
      throw std::invalid_argument("fit_weighted_cox: weights must be finite and >= 0");
  }

  detail::CoxLayout lay(data);
  if (lay.event_times.empty()) throw EstimationError("Cox model: no events");
  auto name_of = [&](Eigen::Index j) {
    return static_cast<std::size_t>(j) < data.names.size() ? data.names[j] : "x" + std::to_string(j);
  };
  for (Eigen::Index j = 0; j < p; ++j)
    if (!(lay.sd(j) > 0.0)) throw RankDeficiencyError("Cox model: covariate '" + name_of(j) + "' is constant");

  auto check_monotone = [&](const Eigen::VectorXd& beta) {
    for (Eigen::Index j = 0; j < p; ++j)
      if (std::abs(beta(j)) * lay.sd(j) > 10.0)
        throw MonotoneLikelihoodError("Cox model: partial likelihood is monotone in '" + name_of(j) +
                                      "' (coefficient diverging)");
  };

  // Scaling every weight by c scales the score by c; so does the tolerance.
  const double tol = opt.tol * (lay.total_weight > 0.0 ? lay.total_weight / static_cast<double>(n) : 1.0);

  CoxFit fit;
  fit.names = data.names;
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  CoxEvaluation ev = detail::evaluate(data, lay, beta);
  fit.loglik_trace.push_back(ev.loglik);

  for (fit.iterations = 0; fit.iterations < opt.max_iter; ++fit.iterations) {
    if (p == 0 || ev.score.lpNorm<Eigen::Infinity>() < tol) break;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(ev.information);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || ldlt.vectorD().minCoeff() <= 0.0) {
      check_monotone(beta + ev.score);
      throw MonotoneLikelihoodError("Cox model: information matrix is singular (monotone likelihood or "
                                    "covariate constant within risk sets)");
    }
    const Eigen::VectorXd step = ldlt.solve(ev.score);
    double scale = 1.0;
    int halvings = 0;
    CoxEvaluation next;
    Eigen::VectorXd candidate;
    const double slack = 1e-10 * (1.0 + std::abs(ev.loglik));
    for (; halvings < 30; ++halvings, scale *= 0.5) {
      candidate = beta + scale * step;
      next = detail::evaluate(data, lay, candidate);
      if (std::isfinite(next.loglik) && next.loglik >= ev.loglik - slack) break;
    }
    if (halvings == 30) break;
    beta = candidate;
    ev = std::move(next);
    fit.loglik_trace.push_back(ev.loglik);
    check_monotone(beta);
  }

  fit.beta = beta;
  fit.loglik = ev.loglik;
  fit.score_norm = p ? ev.score.lpNorm<Eigen::Infinity>() : 0.0;
  fit.converged = fit.score_norm < tol;
  if (!fit.converged) {
    std::string trace;
    for (double ll : fit.loglik_trace) trace += " " + std::to_string(ll);
    throw ConvergenceError("Cox model: no convergence after " + std::to_string(fit.iterations) +
                           " iterations (score max-norm " + std::to_string(fit.score_norm) + "); loglik trace:" +
                           trace);
  }

  detail::EventTerms terms;
  ev = detail::evaluate(data, lay, beta, &terms);
  if (p > 0) {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(ev.information);
    fit.cov = ldlt.solve(Eigen::MatrixXd::Identity(p, p));
    for (Eigen::Index j = 0; j < p; ++j)
      if (std::abs(beta(j)) * lay.sd(j) > 3.0 && std::sqrt(std::max(fit.cov(j, j), 0.0)) * lay.sd(j) > 30.0)
        throw MonotoneLikelihoodError("Cox model: coefficient for '" + name_of(j) + "' appears infinite");
  } else {
    fit.cov = Eigen::MatrixXd(0, 0);
  }

  // Breslow baseline at x = 0 (undo centering).
  const double shift = std::exp(-lay.center.dot(beta));
  const std::size_t k = terms.time.size();
  std::vector<double> haz(k);
  for (std::size_t e = 0; e < k; ++e) haz[e] = terms.d[e] / terms.s0[e];
  fit.baseline.time.assign(terms.time.rbegin(), terms.time.rend());
  fit.baseline.cumhaz.resize(k);
  double cum = 0.0;
  for (std::size_t e = 0; e < k; ++e) {
    cum += haz[k - 1 - e] * shift;
    fit.baseline.cumhaz[e] = cum;
  }
  fit.baseline.support_end = *std::max_element(data.stop.begin(), data.stop.end());

  if (opt.robust && p > 0) {
    // Score residuals: dN part minus compensator over (start, stop].
    std::vector<double> times(fit.baseline.time);  // ascending
    std::vector<double> hcum(k + 1, 0.0);
    std::vector<Eigen::VectorXd> gcum(k + 1, Eigen::VectorXd::Zero(p));
    for (std::size_t e = 0; e < k; ++e) {
      const std::size_t src = k - 1 - e;
      hcum[e + 1] = hcum[e] + haz[src];
      gcum[e + 1] = gcum[e] + haz[src] * terms.xbar[src];
    }
    auto pos = [&](double t) { return static_cast<std::size_t>(std::upper_bound(times.begin(), times.end(), t) - times.begin()); };

    std::uint32_t clusters = 0;
    for (auto c : data.cluster) clusters = std::max(clusters, c + 1);
    const bool have_clusters = data.cluster.size() == n;
    if (!have_clusters) clusters = static_cast<std::uint32_t>(n);
    Eigen::MatrixXd u = Eigen::MatrixXd::Zero(p, clusters);
    Eigen::VectorXd xc(p);
    for (std::size_t i = 0; i < n; ++i) {
      xc = data.x.row(static_cast<Eigen::Index>(i)).transpose() - lay.center;
      const double r = std::exp(xc.dot(beta));
      const std::size_t lo = pos(data.start[i]), hi = pos(data.stop[i]);
      Eigen::VectorXd ri = -r * (xc * (hcum[hi] - hcum[lo]) - (gcum[hi] - gcum[lo]));
      if (data.event[i] && hi > 0 && times[hi - 1] == data.stop[i]) ri += xc - terms.xbar[k - hi];
      u.col(have_clusters ? data.cluster[i] : static_cast<std::uint32_t>(i)) += data.weight[i] * ri;
    }
    const Eigen::MatrixXd meat = u * u.transpose();
    fit.robust_cov = fit.cov * meat * fit.cov;
  } else {
    fit.robust_cov = fit.cov;
  }
  return fit;
}

}  // namespace ectrial
