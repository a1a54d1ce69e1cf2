#pragma once

#include <stdexcept>
#include <string>

namespace khop {

// Scenario/config problems: malformed documents, unknown keys, bad values.
struct config_error : std::runtime_error {
  explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

// Initialization gate failures: a disagreement starts outside its funnel,
// or a funnel bank cannot certify the requested target bound.
struct feasibility_error : std::runtime_error {
  explicit feasibility_error(const std::string& what) : std::runtime_error(what) {}
};

// A quantity was requested that the communication assumptions do not make
// available to the reading agent.
struct protocol_error : std::logic_error {
  explicit protocol_error(const std::string& what) : std::logic_error(what) {}
};

// Non-finite value encountered while integrating.
struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace khop
