#pragma once

// Self-contained verification suites backing `iiae check ...`.

#include "iiae/objective.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace iiae {

struct PropertyResult {
  std::string name;
  bool passed = false;
  double value = 0.0;
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<PropertyResult> properties;

  bool passed() const;
  std::vector<std::string> failures() const;
};

nlohmann::json to_json(const SuiteReport& r);

struct GradCase {
  std::string label;
  ObjectiveParams params;
};

/// ELBO, IIAE at three lambdas, and the four ablation objectives.
std::vector<GradCase> gradient_cases();

/// Small model sized so every parameter can be perturbed.
ModelConfig gradient_check_model();

/// Max relative error of the analytic objective gradient on one seeded
/// (model, batch, frozen noise) triple.
double objective_gradient_error(const ObjectiveParams& params, std::uint64_t seed, double epsilon = 1e-4);

SuiteReport check_gradients(int seeds = 5, double tolerance = 1e-4);

/// Closed-form KL against Monte-Carlo estimates within 4 standard errors.
SuiteReport check_kl(int distributions = 20, std::size_t samples = 100000, std::uint64_t seed = 0);

SuiteReport check_mi_identity(int systems = 10, double tolerance = 1e-8);

/// Bound directions on perturbed approximations plus the tight case.
SuiteReport check_bounds(int systems = 5, std::size_t mc_samples = 200000, std::uint64_t seed = 0);

}  // namespace iiae
