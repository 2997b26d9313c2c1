#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace ectrial {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input data violates a Subject or cohort invariant.
class ValidationError : public Error {
 public:
  ValidationError(std::string subject_id, std::string field, const std::string& what)
      : Error("subject '" + subject_id + "', field '" + field + "': " + what),
        subject_id_(std::move(subject_id)),
        field_(std::move(field)) {}

  const std::string& subject_id() const noexcept { return subject_id_; }
  const std::string& field() const noexcept { return field_; }

 private:
  std::string subject_id_;
  std::string field_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Logistic MLE does not exist (complete or quasi-complete separation).
class SeparationError : public Error {
 public:
  using Error::Error;
};

class RankDeficiencyError : public Error {
 public:
  using Error::Error;
};

/// Cox partial likelihood is monotone in some coefficient.
class MonotoneLikelihoodError : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public Error {
 public:
  using Error::Error;
};

/// A weight is infinite or a censoring probability underflowed.
class PositivityError : public Error {
 public:
  using Error::Error;
};

class EstimationError : public Error {
 public:
  using Error::Error;
};

/// Wraps any error raised while executing a named pipeline stage.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("stage '" + stage + "': " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace ectrial
