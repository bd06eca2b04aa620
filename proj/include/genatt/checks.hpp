#pragma once

#include <string>
#include <vector>

#include "genatt/data.hpp"
#include "genatt/model.hpp"

namespace genatt {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

// Names of every property check, in execution order.
std::vector<std::string> check_names();

// Runs the self-contained invariant suite on synthetic toy instances. `only`
// restricts to the named checks; `inject_failure` corrupts the analytic
// gradient inside the named gradient check so the harness itself can be
// exercised.
std::vector<CheckResult> run_checks(const std::vector<std::string>& only = {},
                                    const std::string& inject_failure = "");

void write_checks_json(const std::vector<CheckResult>& results,
                       const std::string& path);

// Tiny deterministic corpus + model used by the gradient and theorem checks.
struct ToyInstance {
  InteractionLog log;
  SplitSet split;
  Model model;
  Batch batch;
};
ToyInstance make_toy_instance(Mode mode, int T = 3, std::uint64_t seed = 17);

}  // namespace genatt
