#pragma once

#include <limits>
#include <span>
#include <string_view>
#include <vector>

#include "dsim/autodiff.hpp"
#include "dsim/core.hpp"

namespace dsim {

/// Acceleration at the vehicle center and slip angle between heading and
/// velocity. With l_f = 0 the slip angle acts as the steering command.
struct BicycleAction {
  double alpha = 0.0;
  double beta = 0.0;
};

struct UnconstrainedAction {
  double dx = 0.0;
  double dy = 0.0;
  double dpsi = 0.0;
  double dv = 0.0;
};

struct DisplacementAction {
  double dx = 0.0;
  double dy = 0.0;
};

enum class KinematicMode {
  Bicycle,
  Unconstrained,
  Displacement,
  OrientedUnconstrained,
  OrientedDisplacement,
};

int action_dim(KinematicMode mode);
std::string_view to_string(KinematicMode mode);
KinematicMode parse_kinematic_mode(std::string_view name);

/// Optional limits on bicycle actions. Unlimited by default.
struct ActionClamp {
  double max_abs_alpha = std::numeric_limits<double>::infinity();
  double max_abs_beta = std::numeric_limits<double>::infinity();
};

// Discrete bicycle update. Speed is updated first and the new speed drives
// the position and heading updates.
AgentState bicycle_step(const AgentState& s, BicycleAction a, double l_r,
                        double dt);
AgentState unconstrained_step(const AgentState& s, UnconstrainedAction a);
/// Converts (dx, dy) into the bicycle action that lands exactly on
/// s + (dx, dy), then applies it. Zero displacement uses beta = 0.
AgentState displacement_step(const AgentState& s, DisplacementAction a,
                             double l_r, double dt);
/// Action given in ego axes; (dx, dy) is rotated by R(psi) before stepping.
AgentState oriented_step(const AgentState& s, std::span<const double> action,
                         KinematicMode mode, double l_r, double dt);

BicycleAction displacement_to_bicycle(const AgentState& s, double dx, double dy,
                                      double dt);

struct StateDerivative {
  double dv = 0.0;
  double dx = 0.0;
  double dy = 0.0;
  double dpsi = 0.0;
};

/// Continuous-time bicycle equations of motion.
StateDerivative bicycle_continuous_derivative(const AgentState& s,
                                              BicycleAction a, double l_r);

/// Dispatches on mode; `action` has action_dim(mode) entries.
AgentState apply_action(KinematicMode mode, const AgentState& s,
                        std::span<const double> action, double l_r, double dt);

/// Per-step action moving s to s_next, for the non-bicycle modes; bicycle
/// targets come from fitting::recover_actions.
std::vector<double> delta_action(KinematicMode mode, const AgentState& s,
                                 const AgentState& s_next);

// ---------------------------------------------------------------------------
// Differentiable versions

using StateVar = BasicState<ad::Var>;

StateVar constant_state(ad::Tape& tape, const AgentState& s);
AgentState value_of(const StateVar& s);

StateVar bicycle_step(const StateVar& s, ad::Var alpha, ad::Var beta,
                      double l_r, double dt);
/// `action` is a 1-D Var of action_dim(mode) entries.
StateVar apply_action(KinematicMode mode, const StateVar& s, ad::Var action,
                      double l_r, double dt, const ActionClamp& clamp = {});

}  // namespace dsim
