#pragma once

// Named oracle and invariant checks. `ddit verify` runs them and the
// acceptance suite reuses them.

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ddit/config.hpp"
#include "ddit/model.hpp"

namespace ddit::verify {

struct Outcome {
  bool passed = false;
  std::string detail;
  std::map<std::string, double> values;   // measured quantities
};

struct Check {
  std::string name;
  std::string summary;
  std::function<Outcome()> run;
};

struct Report {
  std::string name;
  Outcome outcome;
  double seconds = 0.0;
};

// Every registered check, in suite order.
const std::vector<Check>& registry();
const Check& find(const std::string& name);

// Runs the named checks (all when `only` is empty). An exception inside a
// check counts as a failure carrying the message.
std::vector<Report> run(std::span<const std::string> only, const std::function<void(const Report&)>& on_done = {});
Report run_one(const Check& check);

// One-block model used by the gradient and variance checks.
DDiTConfig reference_config();
// One-block model over the synthetic world's grid and vocabulary.
RunConfig tiny_world_config();

}  // namespace ddit::verify
