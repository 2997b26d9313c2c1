#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "ectrial/cohort.hpp"
#include "ectrial/csv.hpp"
#include "ectrial/design.hpp"
#include "ectrial/logistic.hpp"

namespace ectrial {

/// Propensity model for "subject is in the RCT arm" over the covariates with
/// role PsModel. Categorical covariates are reference coded.
inline LogisticFit fit_propensity(const Cohort& cohort, const std::map<std::string, Transform>& transforms = {},
                                  const LogisticOptions& opt = {}) {
  const auto covs = cohort.with_role(Role::PsModel);
  auto terms = make_terms(cohort, covs, /*intercept=*/true, transforms);
  const Eigen::MatrixXd x = subject_matrix(cohort, terms);
  Eigen::VectorXd y(static_cast<Eigen::Index>(cohort.size()));
  for (std::size_t i = 0; i < cohort.size(); ++i) y(static_cast<Eigen::Index>(i)) = cohort[i].arm == Arm::RCT ? 1.0 : 0.0;
  LogisticFit fit = fit_logistic(x, y, term_names(terms), opt);
  fit.terms = std::move(terms);
  fit.specs = cohort.specs();
  return fit;
}

/// A fit with fixed, externally supplied coefficients (e.g. a published table).
/// Terms absent from `coefficients` get 0.
inline LogisticFit logistic_from_coefficients(const Cohort& schema, const std::map<std::string, double>& coefficients,
                                              const std::map<std::string, Transform>& transforms = {}) {
  LogisticFit fit;
  fit.terms = make_terms(schema, schema.with_role(Role::PsModel), true, transforms);
  fit.names = term_names(fit.terms);
  fit.specs = schema.specs();
  fit.coef = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(fit.terms.size()));
  for (const auto& [name, value] : coefficients) {
    auto j = fit.index_of(name);
    if (!j) throw ConfigError("unknown propensity term '" + name + "'");
    fit.coef(static_cast<Eigen::Index>(*j)) = value;
  }
  const auto p = static_cast<Eigen::Index>(fit.terms.size());
  fit.cov = Eigen::MatrixXd::Zero(p, p);
  fit.converged = true;
  return fit;
}

inline double linear_predictor(const LogisticFit& fit, const Subject& s) {
  double lp = 0.0;
  for (std::size_t j = 0; j < fit.terms.size(); ++j) lp += fit.coef(static_cast<Eigen::Index>(j)) * term_value(fit.terms[j], s);
  return lp;
}

inline double predict_ps(const LogisticFit& fit, const Subject& s) { return logistic(linear_predictor(fit, s)); }

/// Predicts from named raw values; unknown covariates or levels are errors.
inline double predict_ps(const LogisticFit& fit, const std::map<std::string, RawValue>& baseline) {
  SubjectRecord rec;
  rec.id = "<predict>";
  rec.followup_time = 1.0;
  rec.baseline = baseline;
  Cohort one = validate_cohort(std::span<const SubjectRecord>(&rec, 1), fit.specs);
  return predict_ps(fit, one[0]);
}

/// ATT weights: 1 for trial subjects, the propensity odds for comparators.
struct IptwWeights {
  std::vector<std::string> ids;
  std::vector<Arm> arm;
  std::vector<double> ps;
  std::vector<double> weight;
  std::vector<bool> excluded;
  std::vector<std::string> excluded_ids;
  double threshold = std::numeric_limits<double>::infinity();

  std::size_t oc_count() const {
    std::size_t n = 0;
    for (Arm a : arm) n += a == Arm::OC;
    return n;
  }

  /// Excluded share of the OC arm.
  double excluded_fraction() const {
    const std::size_t n = oc_count();
    return n ? static_cast<double>(excluded_ids.size()) / static_cast<double>(n) : 0.0;
  }
};

inline double att_weight(double ps) { return ps / (1.0 - ps); }

inline IptwWeights att_weights(const LogisticFit& fit, const Cohort& cohort) {
  IptwWeights w;
  w.ids.reserve(cohort.size());
  for (const auto& s : cohort.subjects()) {
    const double ps = predict_ps(fit, s);
    double weight = 1.0;
    if (s.arm == Arm::OC) {
      weight = att_weight(ps);
      if (!std::isfinite(weight) || ps >= 1.0)
        throw PositivityError("subject '" + s.id + "': propensity score is numerically 1; ATT weight is infinite");
    }
    w.ids.push_back(s.id);
    w.arm.push_back(s.arm);
    w.ps.push_back(ps);
    w.weight.push_back(weight);
    w.excluded.push_back(false);
  }
  return w;
}

/// Moves OC subjects with weight strictly above `threshold` to the excluded set.
inline IptwWeights exclude_extreme_weights(IptwWeights w, double threshold = 10.0) {
  if (!(threshold > 0.0)) throw ConfigError("extreme-weight threshold must be > 0");
  w.threshold = threshold;
  for (std::size_t i = 0; i < w.weight.size(); ++i) {
    if (w.arm[i] == Arm::OC && !w.excluded[i] && w.weight[i] > threshold) {
      w.excluded[i] = true;
      w.excluded_ids.push_back(w.ids[i]);
    }
  }
  return w;
}

/// Cohort and weights restricted to retained subjects, in original order.
inline std::pair<Cohort, std::vector<double>> retained(const Cohort& cohort, const IptwWeights& w) {
  std::vector<Subject> keep;
  std::vector<double> weights;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    if (w.excluded[i]) continue;
    keep.push_back(cohort[i]);
    weights.push_back(w.weight[i]);
  }
  return {cohort.with_subjects(std::move(keep)), std::move(weights)};
}

/// term, estimate, std_error, p_value
inline void write_fit_summary_csv(std::ostream& out, const LogisticFit& fit) {
  csv::Writer w(out);
  w.row({"term", "estimate", "std_error", "p_value"});
  for (std::size_t j = 0; j < fit.names.size(); ++j)
    w.row({fit.names[j], csv::format_number(fit.coef(static_cast<Eigen::Index>(j))), csv::format_number(fit.std_error(j)),
           csv::format_number(fit.p_value(j))});
}

}  // namespace ectrial
