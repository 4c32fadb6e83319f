#pragma once

#include <span>
#include <vector>

#include "dsim/core.hpp"
#include "dsim/kinematics.hpp"

namespace dsim::fitting {

/// Grid step for the rear-axis search, meters.
inline constexpr double kLrGridStep = 0.01;

struct Recovery {
  std::vector<BicycleAction> actions;  // one per transition, size T-1
  std::vector<AgentState> replayed;    // size T, replayed[0] = gt[0]
};

/// Interleaved action recovery and replay. Each action is computed from the
/// next ground-truth position and the *replayed* previous state.
Recovery recover(std::span<const AgentState> gt, double l_r, double dt);

/// Contiguous valid span of a trajectory. Throws if the valid steps have gaps.
std::vector<AgentState> valid_states(const Trajectory& traj);

std::vector<BicycleAction> recover_actions(const Trajectory& traj, double l_r);

Trajectory replay(const AgentState& start, std::span<const BicycleAction> actions,
                  double l_r, double dt);

/// max_t 2 (1 - cos(psi_t - psi_gt_t)).
double fit_loss(std::span<const double> replayed_psi,
                std::span<const double> gt_psi);

/// {0.01, 0.02, ..., length/2}.
std::vector<double> lr_candidates(double length);

struct GridSearchResult {
  double l_r = 0.0;
  double fit_loss = 0.0;
};

/// Minimizes fit_loss over lr_candidates(length); ties go to the larger l_r.
GridSearchResult grid_search_lr(const Trajectory& traj, double length,
                                int threads = 1);

struct FitResult {
  std::vector<BicycleAction> actions;
  double l_r = 0.0;
  double fit_loss = 0.0;
  Trajectory replayed;
};

FitResult fit(const Trajectory& traj, double length, int threads = 1);

struct HistogramBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
};

/// Equal-width histogram over [lo, hi]; values at hi land in the last bin.
std::vector<HistogramBin> histogram(std::span<const double> values, int bins,
                                    double lo, double hi);

}  // namespace dsim::fitting
