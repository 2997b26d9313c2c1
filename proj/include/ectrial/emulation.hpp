#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "ectrial/cohort.hpp"
#include "ectrial/csv.hpp"
#include "ectrial/errors.hpp"

namespace ectrial {

using ObservationValue = std::variant<double, std::string>;

/// A dated measurement relative to the index date.
struct RawObservation {
  std::string subject_id;
  std::string kind;
  ObservationValue value;
  int offset_days = 0;
};

struct DayWindow {
  int lo = 0;
  int hi = 0;
};

enum class TieRule { ClosestThenWorst };

namespace detail {

inline bool worse(const ObservationValue& a, const ObservationValue& b) {
  if (a.index() != b.index()) return a.index() < b.index();  // numbers rank above text
  if (const double* x = std::get_if<double>(&a)) return *x > std::get<double>(b);
  return std::get<std::string>(a) > std::get<std::string>(b);
}

}  // namespace detail

/// In-window observation of `kind` closest to the index date; among equally
/// close observations the largest (worst) value wins.
inline std::optional<ObservationValue> select_windowed_observation(std::span<const RawObservation> observations,
                                                                   std::string_view kind, DayWindow window,
                                                                   TieRule = TieRule::ClosestThenWorst) {
  if (window.lo > window.hi) throw std::invalid_argument("window lower bound exceeds upper bound");
  const RawObservation* best = nullptr;
  for (const auto& o : observations) {
    if (o.kind != kind || o.offset_days < window.lo || o.offset_days > window.hi) continue;
    if (!best) {
      best = &o;
      continue;
    }
    const int d = std::abs(o.offset_days), db = std::abs(best->offset_days);
    if (d < db || (d == db && detail::worse(o.value, best->value))) best = &o;
  }
  if (!best) return std::nullopt;
  return best->value;
}

enum class Comparison { Less, LessEqual, Greater, GreaterEqual, Equal, NotEqual };

inline std::optional<Comparison> parse_comparison(std::string_view op) {
  if (op == "<") return Comparison::Less;
  if (op == "<=") return Comparison::LessEqual;
  if (op == ">") return Comparison::Greater;
  if (op == ">=") return Comparison::GreaterEqual;
  if (op == "==") return Comparison::Equal;
  if (op == "!=") return Comparison::NotEqual;
  return std::nullopt;
}

inline bool compare(double lhs, Comparison op, double rhs) {
  switch (op) {
    case Comparison::Less: return lhs < rhs;
    case Comparison::LessEqual: return lhs <= rhs;
    case Comparison::Greater: return lhs > rhs;
    case Comparison::GreaterEqual: return lhs >= rhs;
    case Comparison::Equal: return lhs == rhs;
    case Comparison::NotEqual: return lhs != rhs;
  }
  return false;
}

/// Declarative eligibility predicate.
///
/// Fields resolve to a declared covariate or one of the built-in subject
/// fields `arm`, `followup_months`, `event`, `switch_months`,
/// `progression_months`. A windowed-observation rule selects one observation
/// of `kind` with select_windowed_observation and tests it against
/// `values` (set membership) or `op`/`value`.
struct EligibilityRule {
  enum class Type { Always, FieldInSet, FieldComparison, FieldRange, WindowedObservation };

  std::string name;
  Type type = Type::Always;
  std::string field;                // field rules
  std::vector<std::string> values;  // FieldInSet / WindowedObservation set test
  Comparison op = Comparison::Equal;
  double value = 0.0;
  double lo = 0.0, hi = 0.0;  // FieldRange, inclusive
  std::string kind;           // WindowedObservation
  DayWindow window;
  bool allow_missing = false;
  std::vector<Arm> arms;  // empty: applies to both arms

  static EligibilityRule always(std::string name) {
    EligibilityRule r;
    r.name = std::move(name);
    return r;
  }
};

struct AttritionRow {
  std::string rule;
  std::size_t remaining = 0;
};

/// Remaining subject counts after each rule, over the arms the rules target.
struct AttritionTable {
  std::size_t input_count = 0;
  std::vector<AttritionRow> rows;
};

struct EligibilityResult {
  Cohort cohort;
  AttritionTable attrition;
};

namespace detail {

struct FieldValue {
  std::optional<double> number;
  std::optional<std::string> text;
  bool missing() const { return !number && !text; }
};

inline FieldValue field_value(const Cohort& cohort, const Subject& s, const std::string& field) {
  if (field == "arm") return {std::nullopt, std::string(to_string(s.arm))};
  if (field == "followup_months") return {s.followup_time, std::nullopt};
  if (field == "event") return {s.event ? 1.0 : 0.0, std::nullopt};
  if (field == "switch_months") return {s.switch_time, std::nullopt};
  if (field == "progression_months") return {s.progression_time, std::nullopt};
  const auto j = cohort.spec_index(field);
  if (!j) throw ConfigError("eligibility rule references undeclared covariate '" + field + "'");
  const auto& v = s.values[*j];
  if (!v) return {};
  const auto& spec = cohort.specs()[*j];
  if (spec.categorical()) return {std::nullopt, spec.levels[static_cast<std::size_t>(*v)]};
  return {*v, std::nullopt};
}

inline bool is_builtin(const std::string& f) {
  return f == "arm" || f == "followup_months" || f == "event" || f == "switch_months" || f == "progression_months";
}

inline bool in_set(const std::vector<std::string>& set, const FieldValue& v) {
  for (const auto& item : set) {
    if (v.text && *v.text == item) return true;
    if (v.number) {
      auto x = csv::parse_number(item);
      if (x && *x == *v.number) return true;
    }
  }
  return false;
}

}  // namespace detail

inline bool passes(const EligibilityRule& rule, const Cohort& cohort, const Subject& s,
                   std::span<const RawObservation> subject_observations) {
  using T = EligibilityRule::Type;
  switch (rule.type) {
    case T::Always:
      return true;
    case T::FieldInSet: {
      const auto v = detail::field_value(cohort, s, rule.field);
      if (v.missing()) return rule.allow_missing;
      return detail::in_set(rule.values, v);
    }
    case T::FieldComparison: {
      const auto v = detail::field_value(cohort, s, rule.field);
      if (v.missing()) return rule.allow_missing;
      if (!v.number) throw ConfigError("rule '" + rule.name + "': comparison on non-numeric field '" + rule.field + "'");
      return compare(*v.number, rule.op, rule.value);
    }
    case T::FieldRange: {
      const auto v = detail::field_value(cohort, s, rule.field);
      if (v.missing()) return rule.allow_missing;
      if (!v.number) throw ConfigError("rule '" + rule.name + "': range test on non-numeric field '" + rule.field + "'");
      return *v.number >= rule.lo && *v.number <= rule.hi;
    }
    case T::WindowedObservation: {
      const auto obs = select_windowed_observation(subject_observations, rule.kind, rule.window);
      if (!obs) return rule.allow_missing;
      detail::FieldValue v;
      if (const double* x = std::get_if<double>(&*obs))
        v.number = *x;
      else
        v.text = std::get<std::string>(*obs);
      if (!rule.values.empty()) return detail::in_set(rule.values, v);
      if (!v.number) throw ConfigError("rule '" + rule.name + "': comparison on non-numeric observation");
      return compare(*v.number, rule.op, rule.value);
    }
  }
  return false;
}

/// Applies rules in order, recording the remaining count after each.
inline EligibilityResult apply_eligibility(const Cohort& cohort, std::span<const RawObservation> observations,
                                           std::span<const EligibilityRule> rules) {
  if (rules.empty()) throw ConfigError("eligibility: rule list is empty");
  std::set<std::string> kinds, names;
  for (const auto& o : observations) kinds.insert(o.kind);
  for (const auto& r : rules) {
    if (!names.insert(r.name).second) throw ConfigError("eligibility: duplicate rule name '" + r.name + "'");
    if (r.type == EligibilityRule::Type::WindowedObservation && !kinds.count(r.kind))
      throw ConfigError("eligibility rule '" + r.name + "' references undeclared observation kind '" + r.kind + "'");
    if (r.type != EligibilityRule::Type::Always && r.type != EligibilityRule::Type::WindowedObservation &&
        !detail::is_builtin(r.field) && !cohort.spec_index(r.field))
      throw ConfigError("eligibility rule '" + r.name + "' references undeclared covariate '" + r.field + "'");
  }

  std::unordered_map<std::string, std::vector<RawObservation>> by_subject;
  for (const auto& o : observations) by_subject[o.subject_id].push_back(o);
  static const std::vector<RawObservation> none;

  auto targeted = [](const EligibilityRule& r, Arm a) {
    return r.arms.empty() || std::find(r.arms.begin(), r.arms.end(), a) != r.arms.end();
  };
  std::set<Arm> counted;
  for (const auto& r : rules) {
    if (r.arms.empty()) counted = {Arm::RCT, Arm::OC};
    for (Arm a : r.arms) counted.insert(a);
  }

  std::vector<bool> alive(cohort.size(), true);
  EligibilityResult result;
  for (const auto& s : cohort.subjects()) result.attrition.input_count += counted.count(s.arm);
  for (const auto& rule : rules) {
    std::size_t remaining = 0;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
      if (!alive[i]) continue;
      const Subject& s = cohort[i];
      if (targeted(rule, s.arm)) {
        auto it = by_subject.find(s.id);
        const auto& obs = it == by_subject.end() ? none : it->second;
        if (!passes(rule, cohort, s, obs)) alive[i] = false;
      }
      if (alive[i] && counted.count(s.arm)) ++remaining;
    }
    result.attrition.rows.push_back({rule.name, remaining});
  }
  std::vector<Subject> kept;
  for (std::size_t i = 0; i < cohort.size(); ++i)
    if (alive[i]) kept.push_back(cohort[i]);
  result.cohort = cohort.with_subjects(std::move(kept));
  return result;
}

inline void write_attrition_csv(std::ostream& out, const AttritionTable& t) {
  csv::Writer w(out);
  w.row({"criterion", "remaining"});
  w.row({"Total patients in the cohort", std::to_string(t.input_count)});
  for (const auto& r : t.rows) w.row({r.rule, std::to_string(r.remaining)});
}

/// Observations CSV: subject_id, kind, value, offset_days.
inline std::vector<RawObservation> observations_from_table(const csv::Table& t) {
  const char* cols[] = {"subject_id", "kind", "value", "offset_days"};
  for (std::size_t i = 0; i < 4; ++i)
    if (i >= t.header.size() || t.header[i] != cols[i])
      throw csv::ParseError(1, std::string("expected column '") + cols[i] + "'");
  std::vector<RawObservation> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    if (row[1].empty()) throw csv::ParseError(r + 2, "observation kind is empty");
    auto off = csv::parse_number(row[3]);
    if (!off || std::floor(*off) != *off) throw csv::ParseError(r + 2, "offset_days must be an integer");
    RawObservation o{row[0], row[1], std::string(row[2]), static_cast<int>(*off)};
    if (auto v = csv::parse_number(row[2])) o.value = *v;
    out.push_back(std::move(o));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Missing data.

enum class ImputationAction { None, ImputedMedian, ImputedMode, Dropped };

inline std::string_view to_string(ImputationAction a) {
  switch (a) {
    case ImputationAction::None: return "none";
    case ImputationAction::ImputedMedian: return "imputed_median";
    case ImputationAction::ImputedMode: return "imputed_mode";
    case ImputationAction::Dropped: return "dropped";
  }
  return "";
}

struct ImputationRow {
  std::string covariate;
  double missing_fraction = 0.0;
  ImputationAction action = ImputationAction::None;
  std::optional<double> fill_value;  // number or level index
  std::string fill_label;
  std::string note;
};

struct ImputationReport {
  double threshold = 0.30;
  std::vector<ImputationRow> rows;
};

struct ImputationResult {
  Cohort cohort;
  ImputationReport report;
};

/// Median with the midpoint rule for even counts.
inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Covariates missing in more than `threshold` of the pooled cohort lose all
/// model roles; the rest are filled with the pooled median (continuous) or
/// mode (categorical). Observed values are never modified.
inline ImputationResult impute_missing(const Cohort& cohort, double threshold = 0.30) {
  ImputationResult res;
  res.report.threshold = threshold;
  std::vector<CovariateSpec> specs = cohort.specs();
  std::vector<Subject> subjects = cohort.subjects();
  const double n = static_cast<double>(cohort.size());

  for (std::size_t j = 0; j < specs.size(); ++j) {
    CovariateSpec& spec = specs[j];
    ImputationRow row;
    row.covariate = spec.name;
    std::size_t missing = 0;
    for (const auto& s : subjects) missing += !s.values[j].has_value();
    row.missing_fraction = n > 0 ? static_cast<double>(missing) / n : 0.0;
    if (missing == 0) {
      res.report.rows.push_back(row);
      continue;
    }
    if (row.missing_fraction > threshold) {
      row.action = ImputationAction::Dropped;
      spec.roles.clear();
      res.report.rows.push_back(row);
      continue;
    }
    const bool use_mode = spec.missing_policy == MissingPolicy::ImputeMode ||
                          (spec.missing_policy == MissingPolicy::DropIfOverThreshold && spec.categorical());
    double fill = 0.0;
    if (use_mode) {
      std::map<double, std::size_t> counts;
      for (const auto& s : subjects)
        if (s.values[j]) ++counts[*s.values[j]];
      std::size_t best = 0;
      std::size_t ties = 0;
      // Ascending key order is declared level order for categoricals.
      for (const auto& [value, c] : counts) {
        if (c > best) {
          best = c;
          fill = value;
          ties = 1;
        } else if (c == best) {
          ++ties;
        }
      }
      if (ties > 1) row.note = "mode tie broken by first level in declared order";
      row.action = ImputationAction::ImputedMode;
    } else {
      if (spec.categorical()) throw ConfigError("covariate '" + spec.name + "': median imputation of a categorical");
      std::vector<double> obs;
      for (const auto& s : subjects)
        if (s.values[j]) obs.push_back(*s.values[j]);
      fill = median_of(std::move(obs));
      row.action = ImputationAction::ImputedMedian;
    }
    row.fill_value = fill;
    row.fill_label = spec.categorical() ? spec.levels[static_cast<std::size_t>(fill)] : csv::format_number(fill);
    for (auto& s : subjects)
      if (!s.values[j]) s.values[j] = fill;
    res.report.rows.push_back(row);
  }
  res.cohort = Cohort(std::move(specs), std::move(subjects));
  return res;
}

}  // namespace ectrial
