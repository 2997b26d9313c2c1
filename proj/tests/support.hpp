#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ectrial/cohort.hpp"
#include "ectrial/survival.hpp"

namespace ectrial::test {

inline SubjectRecord record(std::string id, Arm arm, double followup, bool event,
                            std::optional<double> switch_time = std::nullopt,
                            std::optional<double> progression = std::nullopt,
                            std::map<std::string, RawValue> baseline = {}) {
  SubjectRecord r;
  r.id = std::move(id);
  r.arm = arm;
  r.followup_time = followup;
  r.event = event;
  r.switch_time = switch_time;
  r.progression_time = progression;
  r.baseline = std::move(baseline);
  return r;
}

/// Right-censored single-interval rows, one per subject.
inline SurvivalData rows(const std::vector<double>& time, const std::vector<int>& event,
                         const std::vector<Arm>& arm = {}, const std::vector<double>& weight = {}) {
  SurvivalData s;
  for (std::size_t i = 0; i < time.size(); ++i)
    s.push(0.0, time[i], event[i] != 0, weight.empty() ? 1.0 : weight[i], arm.empty() ? Arm::RCT : arm[i],
           static_cast<std::uint32_t>(i));
  return s;
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string config_path(const std::string& name) { return std::string(ECTRIAL_SOURCE_DIR) + "/configs/" + name; }

}  // namespace ectrial::test
