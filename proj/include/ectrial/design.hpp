#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ectrial/cohort.hpp"
#include "ectrial/errors.hpp"

namespace ectrial {

/// One column of a model matrix.
struct DesignTerm {
  enum class Type { Intercept, Continuous, Dummy, TimeVarying };

  Type type = Type::Intercept;
  std::string name;
  std::size_t source = 0;  // covariate index, or time-varying index
  std::size_t level = 0;   // Dummy only
  Transform transform = Transform::None;
};

inline std::string term_label(const CovariateSpec& spec, std::size_t level, Transform t) {
  if (spec.categorical()) return spec.name + "=" + spec.levels[level];
  return t == Transform::Log ? "log(" + spec.name + ")" : spec.name;
}

/// Reference-coded terms for the given covariates. Reference levels are dropped.
inline std::vector<DesignTerm> make_terms(const Cohort& cohort, std::span<const std::size_t> covariates,
                                          bool intercept, const std::map<std::string, Transform>& transforms = {},
                                          std::span<const std::string> tv_names = {}) {
  std::vector<DesignTerm> terms;
  if (intercept) terms.push_back({DesignTerm::Type::Intercept, "Intercept", 0, 0, Transform::None});
  for (std::size_t c : covariates) {
    const CovariateSpec& spec = cohort.specs()[c];
    if (spec.categorical()) {
      const std::size_t ref = spec.reference_index();
      for (std::size_t k = 0; k < spec.levels.size(); ++k)
        if (k != ref) terms.push_back({DesignTerm::Type::Dummy, term_label(spec, k, Transform::None), c, k, Transform::None});
    } else {
      Transform t = spec.transform;
      if (auto it = transforms.find(spec.name); it != transforms.end()) t = it->second;
      terms.push_back({DesignTerm::Type::Continuous, term_label(spec, 0, t), c, 0, t});
    }
  }
  for (std::size_t k = 0; k < tv_names.size(); ++k)
    terms.push_back({DesignTerm::Type::TimeVarying, tv_names[k], k, 0, Transform::None});
  return terms;
}

/// Value of a term for one subject; `tv_mask` supplies time-varying indicators.
inline double term_value(const DesignTerm& term, const Subject& s, std::uint32_t tv_mask = 0) {
  switch (term.type) {
    case DesignTerm::Type::Intercept:
      return 1.0;
    case DesignTerm::Type::TimeVarying:
      return static_cast<double>((tv_mask >> term.source) & 1u);
    case DesignTerm::Type::Dummy: {
      const auto& v = s.values[term.source];
      if (!v) throw ValidationError(s.id, term.name, "missing covariate value in model");
      return static_cast<std::size_t>(*v) == term.level ? 1.0 : 0.0;
    }
    case DesignTerm::Type::Continuous: {
      const auto& v = s.values[term.source];
      if (!v) throw ValidationError(s.id, term.name, "missing covariate value in model");
      if (term.transform == Transform::Log) {
        if (!(*v > 0.0)) throw ValidationError(s.id, term.name, "log transform of non-positive value");
        return std::log(*v);
      }
      return *v;
    }
  }
  return 0.0;
}

inline Eigen::MatrixXd subject_matrix(const Cohort& cohort, std::span<const DesignTerm> terms) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(cohort.size()), static_cast<Eigen::Index>(terms.size()));
  for (std::size_t i = 0; i < cohort.size(); ++i)
    for (std::size_t j = 0; j < terms.size(); ++j)
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = term_value(terms[j], cohort[i]);
  return x;
}

inline std::vector<std::string> term_names(std::span<const DesignTerm> terms) {
  std::vector<std::string> out;
  for (const auto& t : terms) out.push_back(t.name);
  return out;
}

/// Columns that do not increase the rank of the columns before them.
inline std::vector<std::size_t> collinear_columns(const Eigen::MatrixXd& x, double rel_tol = 1e-9) {
  std::vector<std::size_t> out;
  if (x.cols() == 0) return out;
  Eigen::MatrixXd gram = x.transpose() * x;
  const double scale = std::max(1.0, gram.diagonal().maxCoeff());
  std::vector<Eigen::Index> kept;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    std::vector<Eigen::Index> trial = kept;
    trial.push_back(j);
    Eigen::MatrixXd sub(trial.size(), trial.size());
    for (std::size_t a = 0; a < trial.size(); ++a)
      for (std::size_t b = 0; b < trial.size(); ++b) sub(a, b) = gram(trial[a], trial[b]);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sub, Eigen::EigenvaluesOnly);
    if (eig.eigenvalues().minCoeff() > rel_tol * scale)
      kept.push_back(j);
    else
      out.push_back(static_cast<std::size_t>(j));
  }
  return out;
}

}  // namespace ectrial
