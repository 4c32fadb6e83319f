#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dsim::gradcheck {

/// Central-difference checks on random points.
///   kinematics: three chained bicycle steps w.r.t. state and actions
///   rasterizer: soft birdview w.r.t. ego and agent poses (default blend)
///   elbo:       one elbo_step with frozen noise w.r.t. parameters and inputs
struct SuiteResult {
  std::string suite;
  int points = 0;
  double max_error = 0.0;  // max over points of the grad_check relative error
  double tolerance = 0.0;
  bool passed = false;
};

std::vector<std::string> suite_names();
SuiteResult run_suite(const std::string& name, int points, std::uint64_t seed);

}  // namespace dsim::gradcheck
