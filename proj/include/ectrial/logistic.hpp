#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ectrial/csv.hpp"
#include "ectrial/design.hpp"
#include "ectrial/errors.hpp"

namespace ectrial {

struct LogisticOptions {
  int max_iter = 100;
  double tol = 1e-8;   // on the score max-norm, or on the Newton step relative to |beta|
  double ridge = 0.0;  // L2 penalty on non-intercept terms
};

struct LogisticFit {
  std::vector<std::string> names;
  Eigen::VectorXd coef;
  Eigen::MatrixXd cov;
  int iterations = 0;
  bool converged = false;
  double gradient_norm = 0.0;
  double loglik = 0.0;
  bool ridge_adjusted = false;

  // Set when the fit came from a cohort; used to evaluate new subjects.
  std::vector<DesignTerm> terms;
  std::vector<CovariateSpec> specs;

  double std_error(std::size_t j) const { return std::sqrt(cov(j, j)); }

  double p_value(std::size_t j) const {
    const double se = std_error(j);
    if (!(se > 0.0)) return std::numeric_limits<double>::quiet_NaN();
    return std::erfc(std::abs(coef(j) / se) / std::sqrt(2.0));
  }

  std::optional<std::size_t> index_of(std::string_view name) const {
    for (std::size_t j = 0; j < names.size(); ++j)
      if (names[j] == name) return j;
    return std::nullopt;
  }
};

inline double logistic(double eta) {
  if (eta >= 0.0) return 1.0 / (1.0 + std::exp(-eta));
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

namespace detail {

// log(1 + exp(eta)) without overflow
inline double log1pexp(double eta) { return eta > 0.0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta)); }

inline constexpr double kSeparationEta = 25.0;

}  // namespace detail

/// Binomial maximum likelihood by Newton-Raphson (IRLS) with step halving.
/// `x` must carry its own intercept column; column 0 is treated as the
/// intercept for the ridge penalty when `intercept_first` is set.
inline LogisticFit fit_logistic(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, std::vector<std::string> names,
                                const LogisticOptions& opt = {}, bool intercept_first = true) {
  const Eigen::Index n = x.rows();
  const Eigen::Index p = x.cols();
  if (y.size() != n || static_cast<Eigen::Index>(names.size()) != p)
    throw std::invalid_argument("fit_logistic: dimension mismatch");
  if (n == 0) throw EstimationError("logistic model: no observations");

  const double ysum = y.sum();
  if (opt.ridge == 0.0 && (ysum == 0.0 || ysum == static_cast<double>(n)))
    throw SeparationError("logistic model: outcome is constant (all " + std::string(ysum == 0.0 ? "0" : "1") +
                          "); the MLE does not exist. Consider ridge > 0");

  if (opt.ridge == 0.0) {
    auto bad = collinear_columns(x);
    if (!bad.empty()) {
      std::string list;
      for (auto j : bad) list += (list.empty() ? "" : ", ") + names[j];
      throw RankDeficiencyError("logistic model: design is rank deficient; collinear terms: " + list);
    }
  }

  Eigen::VectorXd penalty = Eigen::VectorXd::Constant(p, opt.ridge);
  if (intercept_first && p > 0) penalty(0) = 0.0;

  auto objective = [&](const Eigen::VectorXd& b) {
    const Eigen::VectorXd eta = x * b;
    double ll = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) ll += y(i) * eta(i) - detail::log1pexp(eta(i));
    return ll - 0.5 * (penalty.array() * b.array().square()).sum();
  };

  LogisticFit fit;
  fit.names = std::move(names);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  double ll = objective(beta);
  Eigen::VectorXd grad(p);
  Eigen::MatrixXd info(p, p);

  auto derivatives = [&](const Eigen::VectorXd& b) {
    const Eigen::VectorXd eta = x * b;
    Eigen::VectorXd resid(n), w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double mu = logistic(eta(i));
      resid(i) = y(i) - mu;
      w(i) = mu * (1.0 - mu);
    }
    grad = x.transpose() * resid - (penalty.array() * b.array()).matrix();
    info = x.transpose() * w.asDiagonal() * x;
    info.diagonal() += penalty;
    return eta.cwiseAbs().maxCoeff();
  };

  double max_eta = derivatives(beta);
  bool stalled = false;
  bool small_step = false;
  for (fit.iterations = 0; fit.iterations < opt.max_iter; ++fit.iterations) {
    if (grad.lpNorm<Eigen::Infinity>() < opt.tol || small_step) break;
    Eigen::LLT<Eigen::MatrixXd> llt(info);
    if (llt.info() != Eigen::Success) {
      if (opt.ridge == 0.0 && max_eta > detail::kSeparationEta)
        throw SeparationError("logistic model: fitted probabilities reached 0 or 1 (separation). Consider ridge > 0");
      throw RankDeficiencyError("logistic model: information matrix is not positive definite");
    }
    const Eigen::VectorXd step = llt.solve(grad);
    double scale = 1.0;
    Eigen::VectorXd next;
    double next_ll = -std::numeric_limits<double>::infinity();
    int halvings = 0;
    for (; halvings < 30; ++halvings, scale *= 0.5) {
      next = beta + scale * step;
      next_ll = objective(next);
      if (std::isfinite(next_ll) && next_ll >= ll - 1e-12 * (1.0 + std::abs(ll))) break;
    }
    if (halvings == 30) {
      stalled = true;
      break;
    }
    small_step = step.lpNorm<Eigen::Infinity>() < opt.tol * (1.0 + beta.lpNorm<Eigen::Infinity>());
    beta = next;
    ll = next_ll;
    max_eta = derivatives(beta);
  }

  fit.coef = beta;
  fit.loglik = ll;
  fit.gradient_norm = grad.lpNorm<Eigen::Infinity>();
  fit.converged = fit.gradient_norm < opt.tol || small_step;
  fit.ridge_adjusted = opt.ridge > 0.0;

  if (opt.ridge == 0.0 && max_eta > detail::kSeparationEta)
    throw SeparationError("logistic model: coefficients diverge (complete or quasi-complete separation). "
                          "Consider ridge > 0");
  if (!fit.converged && !stalled)
    throw ConvergenceError("logistic model: no convergence after " + std::to_string(opt.max_iter) +
                           " iterations (score max-norm " + csv::format_number(fit.gradient_norm) + ")");

  Eigen::LLT<Eigen::MatrixXd> llt(info);
  if (llt.info() != Eigen::Success) throw RankDeficiencyError("logistic model: singular information at optimum");
  fit.cov = llt.solve(Eigen::MatrixXd::Identity(p, p));
  return fit;
}

}  // namespace ectrial
