#include "dsim/kinematics.hpp"

#include <cmath>
#include <string>

namespace dsim {

namespace {

void check_step_params(double l_r, double dt) {
  if (!(dt > 0.0)) throw Error("kinematics: dt must be positive");
  if (!(l_r > 0.0)) throw Error("kinematics: l_r must be positive");
}

void check_action_size(KinematicMode mode, std::size_t n) {
  if (n != static_cast<std::size_t>(action_dim(mode))) {
    throw Error("kinematics: mode " + std::string(to_string(mode)) +
                " expects " + std::to_string(action_dim(mode)) +
                " action entries, got " + std::to_string(n));
  }
}

}  // namespace

int action_dim(KinematicMode mode) {
  switch (mode) {
    case KinematicMode::Bicycle:
    case KinematicMode::Displacement:
    case KinematicMode::OrientedDisplacement:
      return 2;
    case KinematicMode::Unconstrained:
    case KinematicMode::OrientedUnconstrained:
      return 4;
  }
  return 0;
}

std::string_view to_string(KinematicMode mode) {
  switch (mode) {
    case KinematicMode::Bicycle: return "bicycle";
    case KinematicMode::Unconstrained: return "unconstrained";
    case KinematicMode::Displacement: return "displacement";
    case KinematicMode::OrientedUnconstrained: return "oriented-unconstrained";
    case KinematicMode::OrientedDisplacement: return "oriented-displacement";
  }
  return "?";
}

KinematicMode parse_kinematic_mode(std::string_view name) {
  for (auto m : {KinematicMode::Bicycle, KinematicMode::Unconstrained,
                 KinematicMode::Displacement, KinematicMode::OrientedUnconstrained,
                 KinematicMode::OrientedDisplacement}) {
    if (to_string(m) == name) return m;
  }
  throw Error("unknown kinematic mode '" + std::string(name) + "'");
}

AgentState bicycle_step(const AgentState& s, BicycleAction a, double l_r,
                        double dt) {
  check_step_params(l_r, dt);
  AgentState n;
  n.v = s.v + a.alpha * dt;
  n.x = s.x + n.v * std::cos(s.psi + a.beta) * dt;
  n.y = s.y + n.v * std::sin(s.psi + a.beta) * dt;
  n.psi = wrap_angle(s.psi + (n.v / l_r) * std::sin(a.beta) * dt);
  return n;
}

AgentState unconstrained_step(const AgentState& s, UnconstrainedAction a) {
  return {s.x + a.dx, s.y + a.dy, wrap_angle(s.psi + a.dpsi), s.v + a.dv};
}

BicycleAction displacement_to_bicycle(const AgentState& s, double dx, double dy,
                                      double dt) {
  if (!(dt > 0.0)) throw Error("kinematics: dt must be positive");
  const double dist = std::hypot(dx, dy);
  BicycleAction a;
  a.alpha = (dist / dt - s.v) / dt;
  a.beta = dist == 0.0 ? 0.0 : wrap_angle(std::atan2(dy, dx) - s.psi);
  return a;
}

AgentState displacement_step(const AgentState& s, DisplacementAction a,
                             double l_r, double dt) {
  check_step_params(l_r, dt);
  return bicycle_step(s, displacement_to_bicycle(s, a.dx, a.dy, dt), l_r, dt);
}

AgentState oriented_step(const AgentState& s, std::span<const double> action,
                         KinematicMode mode, double l_r, double dt) {
  check_action_size(mode, action.size());
  const Vec2 world = rotate({action[0], action[1]}, s.psi);
  switch (mode) {
    case KinematicMode::OrientedUnconstrained:
      return unconstrained_step(s, {world.x, world.y, action[2], action[3]});
    case KinematicMode::OrientedDisplacement:
      return displacement_step(s, {world.x, world.y}, l_r, dt);
    default:
      throw Error("oriented_step: mode must be an oriented mode");
  }
}

StateDerivative bicycle_continuous_derivative(const AgentState& s,
                                              BicycleAction a, double l_r) {
  if (!(l_r > 0.0)) throw Error("kinematics: l_r must be positive");
  return {a.alpha, s.v * std::cos(s.psi + a.beta),
          s.v * std::sin(s.psi + a.beta), (s.v / l_r) * std::sin(a.beta)};
}

AgentState apply_action(KinematicMode mode, const AgentState& s,
                        std::span<const double> action, double l_r, double dt) {
  check_action_size(mode, action.size());
  switch (mode) {
    case KinematicMode::Bicycle:
      return bicycle_step(s, {action[0], action[1]}, l_r, dt);
    case KinematicMode::Unconstrained:
      return unconstrained_step(s, {action[0], action[1], action[2], action[3]});
    case KinematicMode::Displacement:
      return displacement_step(s, {action[0], action[1]}, l_r, dt);
    case KinematicMode::OrientedUnconstrained:
    case KinematicMode::OrientedDisplacement:
      return oriented_step(s, action, mode, l_r, dt);
  }
  throw Error("apply_action: unknown mode");
}

std::vector<double> delta_action(KinematicMode mode, const AgentState& s,
                                 const AgentState& s_next) {
  const Vec2 d{s_next.x - s.x, s_next.y - s.y};
  const double dpsi = wrap_angle(s_next.psi - s.psi);
  const double dv = s_next.v - s.v;
  switch (mode) {
    case KinematicMode::Unconstrained:
      return {d.x, d.y, dpsi, dv};
    case KinematicMode::Displacement:
      return {d.x, d.y};
    case KinematicMode::OrientedUnconstrained: {
      const Vec2 e = rotate(d, -s.psi);
      return {e.x, e.y, dpsi, dv};
    }
    case KinematicMode::OrientedDisplacement: {
      const Vec2 e = rotate(d, -s.psi);
      return {e.x, e.y};
    }
    case KinematicMode::Bicycle:
      break;
  }
  throw Error("delta_action: bicycle actions come from fitting");
}

// ---------------------------------------------------------------------------

StateVar constant_state(ad::Tape& tape, const AgentState& s) {
  return {tape.scalar(s.x), tape.scalar(s.y), tape.scalar(s.psi),
          tape.scalar(s.v)};
}

AgentState value_of(const StateVar& s) {
  return {s.x.item(), s.y.item(), s.psi.item(), s.v.item()};
}

StateVar bicycle_step(const StateVar& s, ad::Var alpha, ad::Var beta,
                      double l_r, double dt) {
  check_step_params(l_r, dt);
  StateVar n;
  n.v = s.v + alpha * dt;
  const ad::Var course = s.psi + beta;
  n.x = s.x + n.v * ad::cos(course) * dt;
  n.y = s.y + n.v * ad::sin(course) * dt;
  n.psi = ad::wrap_angle(s.psi + n.v * ad::sin(beta) * (dt / l_r));
  return n;
}

namespace {

ad::Var clamp_abs(ad::Var x, double limit) {
  if (!std::isfinite(limit)) return x;
  ad::Tape& tape = *x.tape();
  return ad::minimum(ad::maximum(x, tape.scalar(-limit)), tape.scalar(limit));
}

StateVar displacement_step_var(const StateVar& s, ad::Var dx, ad::Var dy,
                               double l_r, double dt) {
  ad::Tape& tape = *dx.tape();
  const double dist_value = std::hypot(dx.item(), dy.item());
  ad::Var dist = ad::sqrt(ad::square(dx) + ad::square(dy));
  ad::Var alpha = (dist * (1.0 / dt) - s.v) * (1.0 / dt);
  ad::Var beta = dist_value == 0.0
                     ? tape.scalar(0.0)
                     : ad::wrap_angle(ad::atan2(dy, dx) - s.psi);
  return bicycle_step(s, alpha, beta, l_r, dt);
}

}  // namespace

StateVar apply_action(KinematicMode mode, const StateVar& s, ad::Var action,
                      double l_r, double dt, const ActionClamp& clamp) {
  check_action_size(mode, action.size());
  check_step_params(l_r, dt);
  auto a = [&](std::size_t i) { return ad::index(action, i); };
  switch (mode) {
    case KinematicMode::Bicycle:
      return bicycle_step(s, clamp_abs(a(0), clamp.max_abs_alpha),
                          clamp_abs(a(1), clamp.max_abs_beta), l_r, dt);
    case KinematicMode::Unconstrained:
      return {s.x + a(0), s.y + a(1), ad::wrap_angle(s.psi + a(2)), s.v + a(3)};
    case KinematicMode::Displacement:
      return displacement_step_var(s, a(0), a(1), l_r, dt);
    case KinematicMode::OrientedUnconstrained:
    case KinematicMode::OrientedDisplacement: {
      const ad::Var c = ad::cos(s.psi);
      const ad::Var sn = ad::sin(s.psi);
      const ad::Var wx = c * a(0) - sn * a(1);
      const ad::Var wy = sn * a(0) + c * a(1);
      if (mode == KinematicMode::OrientedUnconstrained) {
        return {s.x + wx, s.y + wy, ad::wrap_angle(s.psi + a(2)), s.v + a(3)};
      }
      return displacement_step_var(s, wx, wy, l_r, dt);
    }
  }
  throw Error("apply_action: unknown mode");
}

}  // namespace dsim
