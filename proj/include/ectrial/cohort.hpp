#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <variant>
#include <vector>

#include "ectrial/csv.hpp"
#include "ectrial/errors.hpp"

namespace ectrial {

enum class Arm : std::uint8_t { RCT, OC };

inline constexpr std::array<Arm, 2> kArms{Arm::RCT, Arm::OC};

inline std::string_view to_string(Arm arm) { return arm == Arm::RCT ? "RCT" : "OC"; }

inline std::optional<Arm> parse_arm(std::string_view s) {
  if (s == "RCT") return Arm::RCT;
  if (s == "OC") return Arm::OC;
  return std::nullopt;
}

enum class CovariateKind : std::uint8_t { Continuous, Categorical };

enum class Role : std::uint8_t {
  PsModel = 1u << 0,
  IpcwNumerator = 1u << 1,
  IpcwDenominator = 1u << 2,
  Balance = 1u << 3,
  SwitchModel = 1u << 4,
};

class RoleSet {
 public:
  constexpr RoleSet() = default;
  constexpr RoleSet(std::initializer_list<Role> roles) {
    for (Role r : roles) add(r);
  }
  constexpr void add(Role r) { bits_ |= static_cast<std::uint8_t>(r); }
  constexpr void remove(Role r) { bits_ &= static_cast<std::uint8_t>(~static_cast<std::uint8_t>(r)); }
  constexpr bool has(Role r) const { return (bits_ & static_cast<std::uint8_t>(r)) != 0; }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr void clear() { bits_ = 0; }
  friend constexpr bool operator==(RoleSet, RoleSet) = default;

 private:
  std::uint8_t bits_ = 0;
};

enum class MissingPolicy : std::uint8_t { ImputeMedian, ImputeMode, DropIfOverThreshold };

enum class Transform : std::uint8_t { None, Log };

/// Declared metadata for one baseline covariate.
struct CovariateSpec {
  std::string name;
  CovariateKind kind = CovariateKind::Continuous;
  std::vector<std::string> levels;  // categorical only
  std::string reference_level;      // categorical only
  RoleSet roles;
  MissingPolicy missing_policy = MissingPolicy::DropIfOverThreshold;
  Transform transform = Transform::None;

  static CovariateSpec continuous(std::string name, RoleSet roles = {}, Transform t = Transform::None) {
    CovariateSpec s;
    s.name = std::move(name);
    s.roles = roles;
    s.transform = t;
    return s;
  }

  /// Reference defaults to the first level.
  static CovariateSpec categorical(std::string name, std::vector<std::string> levels, RoleSet roles = {},
                                   std::string reference = {}) {
    CovariateSpec s;
    s.name = std::move(name);
    s.kind = CovariateKind::Categorical;
    s.reference_level = reference.empty() && !levels.empty() ? levels.front() : std::move(reference);
    s.levels = std::move(levels);
    s.roles = roles;
    return s;
  }

  bool categorical() const { return kind == CovariateKind::Categorical; }

  std::optional<std::size_t> level_index(std::string_view level) const {
    for (std::size_t i = 0; i < levels.size(); ++i)
      if (levels[i] == level) return i;
    return std::nullopt;
  }

  std::size_t reference_index() const { return *level_index(reference_level); }

  void validate() const {
    if (name.empty()) throw ConfigError("covariate with empty name");
    if (!categorical()) return;
    if (levels.size() < 2) throw ConfigError("covariate '" + name + "': categorical needs at least two levels");
    std::set<std::string> seen(levels.begin(), levels.end());
    if (seen.size() != levels.size()) throw ConfigError("covariate '" + name + "': duplicate levels");
    if (!level_index(reference_level))
      throw ConfigError("covariate '" + name + "': reference level '" + reference_level + "' is not a level");
  }
};

using RawValue = std::variant<std::monostate, double, std::string>;

/// One patient as supplied by the caller, covariates keyed by name.
struct SubjectRecord {
  std::string id;
  Arm arm = Arm::RCT;
  double followup_time = 0.0;
  bool event = false;
  std::optional<double> switch_time;
  std::optional<double> progression_time;
  std::map<std::string, RawValue> baseline;
};

/// One validated patient. Covariate values are stored in CovariateSpec order;
/// categorical values hold the level index.
struct Subject {
  std::string id;
  Arm arm = Arm::RCT;
  double followup_time = 0.0;
  bool event = false;
  std::optional<double> switch_time;
  std::optional<double> progression_time;
  std::vector<std::optional<double>> values;
};

struct ArmCounts {
  std::size_t rct = 0;
  std::size_t oc = 0;
  friend bool operator==(const ArmCounts&, const ArmCounts&) = default;
};

/// Immutable two-arm cohort together with its covariate declarations.
class Cohort {
 public:
  Cohort() = default;
  Cohort(std::vector<CovariateSpec> specs, std::vector<Subject> subjects)
      : specs_(std::move(specs)), subjects_(std::move(subjects)) {}

  const std::vector<CovariateSpec>& specs() const noexcept { return specs_; }
  const std::vector<Subject>& subjects() const noexcept { return subjects_; }
  std::size_t size() const noexcept { return subjects_.size(); }
  bool empty() const noexcept { return subjects_.empty(); }
  const Subject& operator[](std::size_t i) const { return subjects_[i]; }

  ArmCounts arm_counts() const {
    ArmCounts c;
    for (const auto& s : subjects_) (s.arm == Arm::RCT ? c.rct : c.oc)++;
    return c;
  }

  std::optional<std::size_t> spec_index(std::string_view name) const {
    for (std::size_t i = 0; i < specs_.size(); ++i)
      if (specs_[i].name == name) return i;
    return std::nullopt;
  }

  const CovariateSpec& spec(std::string_view name) const {
    auto i = spec_index(name);
    if (!i) throw ConfigError("undeclared covariate '" + std::string(name) + "'");
    return specs_[*i];
  }

  /// Indices of covariates carrying the role, in declaration order.
  std::vector<std::size_t> with_role(Role role) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < specs_.size(); ++i)
      if (specs_[i].roles.has(role)) out.push_back(i);
    return out;
  }

  Cohort with_subjects(std::vector<Subject> subjects) const { return Cohort(specs_, std::move(subjects)); }
  Cohort with_specs(std::vector<CovariateSpec> specs) const { return Cohort(std::move(specs), subjects_); }

  template <class Pred>
  Cohort filter(Pred&& keep) const {
    std::vector<Subject> out;
    for (const auto& s : subjects_)
      if (keep(s)) out.push_back(s);
    return with_subjects(std::move(out));
  }

 private:
  std::vector<CovariateSpec> specs_;
  std::vector<Subject> subjects_;
};

namespace detail {

inline void check_time(const std::string& id, const char* field, double t) {
  if (!std::isfinite(t) || t < 0.0) throw ValidationError(id, field, "time must be finite and >= 0");
}

}  // namespace detail

/// Checks every Subject invariant and codes covariates against `specs`.
inline Cohort validate_cohort(std::span<const SubjectRecord> records, std::vector<CovariateSpec> specs) {
  {
    std::set<std::string> names;
    for (const auto& s : specs) {
      s.validate();
      if (!names.insert(s.name).second) throw ConfigError("covariate '" + s.name + "' declared twice");
    }
  }
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < specs.size(); ++i) index.emplace(specs[i].name, i);

  std::unordered_set<std::string> ids;
  std::vector<Subject> subjects;
  subjects.reserve(records.size());
  for (const auto& r : records) {
    if (r.id.empty()) throw ValidationError(r.id, "id", "empty identifier");
    if (!ids.insert(r.id).second) throw ValidationError(r.id, "id", "duplicate id");
    detail::check_time(r.id, "followup_months", r.followup_time);
    if (r.followup_time == 0.0) throw ValidationError(r.id, "followup_months", "zero-length follow-up");
    if (r.switch_time) {
      detail::check_time(r.id, "switch_months", *r.switch_time);
      if (*r.switch_time > r.followup_time)
        throw ValidationError(r.id, "switch_months", "switch time exceeds follow-up");
    }
    if (r.progression_time) {
      detail::check_time(r.id, "progression_months", *r.progression_time);
      if (*r.progression_time > r.followup_time)
        throw ValidationError(r.id, "progression_months", "progression time exceeds follow-up");
    }

    Subject s{r.id, r.arm, r.followup_time, r.event, r.switch_time, r.progression_time, {}};
    s.values.assign(specs.size(), std::nullopt);
    for (const auto& [name, value] : r.baseline) {
      auto it = index.find(name);
      if (it == index.end()) throw ValidationError(r.id, name, "undeclared covariate");
      const CovariateSpec& spec = specs[it->second];
      if (std::holds_alternative<std::monostate>(value)) continue;
      if (spec.categorical()) {
        const std::string* level = std::get_if<std::string>(&value);
        std::optional<std::size_t> k = level ? spec.level_index(*level) : std::nullopt;
        if (!k) throw ValidationError(r.id, name, "undeclared categorical level");
        s.values[it->second] = static_cast<double>(*k);
      } else {
        const double* x = std::get_if<double>(&value);
        if (!x || !std::isfinite(*x)) throw ValidationError(r.id, name, "continuous value must be a finite number");
        s.values[it->second] = *x;
      }
    }
    subjects.push_back(std::move(s));
  }
  return Cohort(std::move(specs), std::move(subjects));
}

inline std::vector<SubjectRecord> to_records(const Cohort& cohort) {
  std::vector<SubjectRecord> out;
  out.reserve(cohort.size());
  for (const auto& s : cohort.subjects()) {
    SubjectRecord r{s.id, s.arm, s.followup_time, s.event, s.switch_time, s.progression_time, {}};
    for (std::size_t j = 0; j < cohort.specs().size(); ++j) {
      const auto& spec = cohort.specs()[j];
      if (!s.values[j]) {
        r.baseline[spec.name] = std::monostate{};
      } else if (spec.categorical()) {
        r.baseline[spec.name] = spec.levels[static_cast<std::size_t>(*s.values[j])];
      } else {
        r.baseline[spec.name] = *s.values[j];
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cohort CSV: id, arm, followup_months, event, switch_months,
// progression_months, <covariates...>. Empty string means missing.

inline constexpr std::array<std::string_view, 6> kCohortColumns{
    "id", "arm", "followup_months", "event", "switch_months", "progression_months"};

inline Cohort cohort_from_table(const csv::Table& table, std::vector<CovariateSpec> specs) {
  for (std::size_t i = 0; i < kCohortColumns.size(); ++i)
    if (i >= table.header.size() || table.header[i] != kCohortColumns[i])
      throw csv::ParseError(1, "expected column '" + std::string(kCohortColumns[i]) + "' at position " +
                                   std::to_string(i + 1));

  std::vector<SubjectRecord> records;
  records.reserve(table.rows.size());
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const std::size_t line = r + 2;
    SubjectRecord rec;
    rec.id = row[0];
    auto arm = parse_arm(row[1]);
    if (!arm) throw csv::ParseError(line, "arm must be RCT or OC, got '" + row[1] + "'");
    rec.arm = *arm;
    auto fu = csv::parse_number(row[2]);
    if (!fu) throw csv::ParseError(line, "followup_months is not a number");
    rec.followup_time = *fu;
    if (row[3] == "1" || row[3] == "true")
      rec.event = true;
    else if (row[3] == "0" || row[3] == "false")
      rec.event = false;
    else
      throw csv::ParseError(line, "event must be 0/1");
    auto opt_time = [&](const std::string& cell, const char* name) -> std::optional<double> {
      if (cell.empty()) return std::nullopt;
      auto v = csv::parse_number(cell);
      if (!v) throw csv::ParseError(line, std::string(name) + " is not a number");
      return v;
    };
    rec.switch_time = opt_time(row[4], "switch_months");
    rec.progression_time = opt_time(row[5], "progression_months");
    for (std::size_t c = kCohortColumns.size(); c < table.header.size(); ++c) {
      const std::string& name = table.header[c];
      const std::string& cell = row[c];
      const CovariateSpec* spec = nullptr;
      for (const auto& s : specs)
        if (s.name == name) spec = &s;
      if (!spec) throw ValidationError(rec.id, name, "undeclared covariate");
      if (cell.empty()) {
        rec.baseline[name] = std::monostate{};
      } else if (spec->categorical()) {
        rec.baseline[name] = cell;
      } else {
        auto v = csv::parse_number(cell);
        if (!v) throw csv::ParseError(line, "column '" + name + "' is not a number");
        rec.baseline[name] = *v;
      }
    }
    records.push_back(std::move(rec));
  }
  return validate_cohort(records, std::move(specs));
}

inline void write_cohort_csv(std::ostream& out, const Cohort& cohort) {
  csv::Writer w(out);
  std::vector<std::string> header(kCohortColumns.begin(), kCohortColumns.end());
  for (const auto& s : cohort.specs()) header.push_back(s.name);
  w.row(header);
  auto opt = [](const std::optional<double>& v) { return v ? csv::format_number(*v) : std::string(); };
  for (const auto& s : cohort.subjects()) {
    std::vector<std::string> row{s.id, std::string(to_string(s.arm)), csv::format_number(s.followup_time),
                                 s.event ? "1" : "0", opt(s.switch_time), opt(s.progression_time)};
    for (std::size_t j = 0; j < cohort.specs().size(); ++j) {
      const auto& spec = cohort.specs()[j];
      if (!s.values[j])
        row.emplace_back();
      else if (spec.categorical())
        row.push_back(spec.levels[static_cast<std::size_t>(*s.values[j])]);
      else
        row.push_back(csv::format_number(*s.values[j]));
    }
    w.row(row);
  }
}

/// Re-expresses a cohort under another set of declarations, matching
/// covariates and categorical levels by name. Every target covariate must
/// exist in the source; source covariates not in the target are dropped.
inline Cohort adopt_specs(const Cohort& cohort, std::vector<CovariateSpec> specs) {
  std::vector<std::size_t> source(specs.size());
  std::vector<std::vector<double>> level_map(specs.size());
  for (std::size_t j = 0; j < specs.size(); ++j) {
    specs[j].validate();
    const auto i = cohort.spec_index(specs[j].name);
    if (!i) throw ConfigError("covariate '" + specs[j].name + "' is not in the cohort");
    const CovariateSpec& from = cohort.specs()[*i];
    if (from.kind != specs[j].kind) throw ConfigError("covariate '" + specs[j].name + "' changes kind");
    source[j] = *i;
    for (const auto& level : from.levels) {
      const auto k = specs[j].level_index(level);
      if (!k) throw ConfigError("covariate '" + specs[j].name + "': level '" + level + "' is not declared");
      level_map[j].push_back(static_cast<double>(*k));
    }
  }
  std::vector<Subject> subjects;
  subjects.reserve(cohort.size());
  for (const Subject& s : cohort.subjects()) {
    Subject t = s;
    t.values.assign(specs.size(), std::nullopt);
    for (std::size_t j = 0; j < specs.size(); ++j) {
      const auto& v = s.values[source[j]];
      if (!v) continue;
      t.values[j] = specs[j].categorical() ? level_map[j][static_cast<std::size_t>(*v)] : *v;
    }
    subjects.push_back(std::move(t));
  }
  return Cohort(std::move(specs), std::move(subjects));
}

// ---------------------------------------------------------------------------
// Counting-process representation.

/// One (start, stop] piece of a subject's follow-up. Time-varying indicators
/// are packed into `tv_mask` (bit k is the k-th declared time-varying covariate).
struct RiskInterval {
  std::uint32_t subject = 0;  // index into the cohort
  double start = 0.0;
  double stop = 0.0;
  bool event_at_stop = false;
  std::uint32_t tv_mask = 0;
  double weight = 1.0;

  bool indicator(std::size_t k) const { return (tv_mask >> k) & 1u; }
};

/// A time-varying 0/1 covariate: 0 before onset, 1 after it.
struct TimeVarying {
  std::string name;
  std::function<std::optional<double>(const Subject&)> onset;

  static TimeVarying progression() {
    return {"progression", [](const Subject& s) { return s.progression_time; }};
  }
};

struct GridSpec {
  double step = 1.0;
};

struct CountingProcess {
  std::vector<std::string> tv_names;
  std::vector<RiskInterval> intervals;  // grouped by subject, increasing time
};

/// Splits each subject's follow-up at every grid point and every onset time.
/// A subject with zero follow-up contributes no intervals.
inline CountingProcess to_counting_process(const Cohort& cohort, GridSpec grid,
                                           std::span<const TimeVarying> time_varying) {
  if (!(grid.step > 0.0)) throw ConfigError("grid step must be > 0");
  if (time_varying.size() > 32) throw ConfigError("at most 32 time-varying covariates");
  CountingProcess cp;
  for (const auto& tv : time_varying) cp.tv_names.push_back(tv.name);

  std::vector<double> cuts;
  std::vector<std::optional<double>> onsets(time_varying.size());
  for (std::size_t si = 0; si < cohort.size(); ++si) {
    const Subject& s = cohort[si];
    const double end = s.followup_time;
    cuts.clear();
    for (std::size_t k = 0; k < time_varying.size(); ++k) {
      onsets[k] = time_varying[k].onset(s);
      if (onsets[k]) {
        const double t = *onsets[k];
        if (!(t >= 0.0 && t <= end))
          throw ValidationError(s.id, time_varying[k].name, "onset time outside [0, follow-up]");
        if (t > 0.0 && t < end) cuts.push_back(t);
      }
    }
    if (end <= 0.0) continue;
    for (std::size_t g = 1;; ++g) {
      const double t = static_cast<double>(g) * grid.step;
      if (!(t < end)) break;
      cuts.push_back(t);
    }
    cuts.push_back(end);
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

    double start = 0.0;
    for (double stop : cuts) {
      RiskInterval iv;
      iv.subject = static_cast<std::uint32_t>(si);
      iv.start = start;
      iv.stop = stop;
      iv.event_at_stop = s.event && stop == end;
      for (std::size_t k = 0; k < onsets.size(); ++k)
        if (onsets[k] && *onsets[k] < stop) iv.tv_mask |= 1u << k;
      cp.intervals.push_back(iv);
      start = stop;
    }
  }
  return cp;
}

}  // namespace ectrial
