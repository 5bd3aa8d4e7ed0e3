#pragma once

#include <functional>
#include <string>
#include <vector>

#include "bicanet/gradcheck.hpp"

namespace bicanet {

/// One named finite-difference check on small random inputs.
struct GradientCase {
  std::string name;
  std::function<GradCheckResult()> run;
};

/// Every differentiable primitive, the composite layers, each context block
/// end to end, the backbone, and a sampled check of the whole model.
std::vector<GradientCase> gradient_cases();

/// Runs the cases whose name equals `only` (all of them when empty).
/// Throws std::invalid_argument when nothing matches.
std::vector<GradCheckResult> run_gradient_suite(const std::string& only = "");

}  // namespace bicanet
