#include "dsim/core.hpp"

#include <sstream>

namespace dsim {

double wrap_angle(double theta) {
  if (!std::isfinite(theta)) {
    throw Error("wrap_angle: non-finite angle");
  }
  double r = std::remainder(theta, kTwoPi);  // [-pi, pi]
  if (r <= -kPi) r += kTwoPi;
  if (r > kPi) r -= kTwoPi;
  return r;
}

AgentState make_state(double x, double y, double psi, double v) {
  AgentState s{x, y, wrap_angle(psi), v};
  if (!is_finite(s)) throw Error("make_state: non-finite state");
  return s;
}

void validate(const AgentAttributes& attrs) {
  if (!(attrs.length > 0.0) || !(attrs.width > 0.0)) {
    throw Error("agent attributes: length and width must be positive");
  }
  if (!(attrs.rear_axis_offset > 0.0) ||
      attrs.rear_axis_offset > attrs.length / 2.0 + 1e-12) {
    std::ostringstream os;
    os << "agent attributes: rear_axis_offset " << attrs.rear_axis_offset
       << " outside (0, length/2 = " << attrs.length / 2.0 << "]";
    throw Error(os.str());
  }
}

bool Trajectory::fully_valid() const { return valid_between(0, states.size()); }

bool Trajectory::valid_between(std::size_t begin, std::size_t end) const {
  if (end > states.size() || end > valid.size()) return false;
  for (std::size_t t = begin; t < end; ++t) {
    if (!valid[t]) return false;
  }
  return true;
}

void validate(const MapData& map) {
  for (std::size_t i = 0; i < map.driveable_polygons.size(); ++i) {
    if (map.driveable_polygons[i].size() < 3) {
      throw Error("map: driveable polygon " + std::to_string(i) +
                  " has fewer than 3 vertices");
    }
  }
  for (std::size_t i = 0; i < map.lane_lines.size(); ++i) {
    if (map.lane_lines[i].points.size() < 2) {
      throw Error("map: lane line " + std::to_string(i) +
                  " has fewer than 2 vertices");
    }
    if (!(map.lane_lines[i].width > 0.0)) {
      throw Error("map: lane line " + std::to_string(i) +
                  " needs a positive width");
    }
  }
}

void validate(const Scene& scene) {
  if (scene.t_obs < 1 || scene.t_obs >= scene.horizon) {
    throw Error("scene " + std::to_string(scene.id) +
                ": need 1 <= t_obs < horizon");
  }
  if (!(scene.dt > 0.0)) throw Error("scene: dt must be positive");
  for (const auto& agent : scene.agents) {
    const auto& traj = agent.trajectory;
    if (traj.states.size() != static_cast<std::size_t>(scene.horizon) ||
        traj.valid.size() != traj.states.size()) {
      throw Error("scene " + std::to_string(scene.id) + ": agent " +
                  std::to_string(agent.id) + " does not have horizon slots");
    }
  }
}

std::vector<std::size_t> fully_valid_agents(const Scene& scene) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < scene.agents.size(); ++i) {
    if (scene.agents[i].trajectory.fully_valid()) out.push_back(i);
  }
  return out;
}

Vec2 to_ego_frame(Vec2 p, const AgentState& ego) {
  return rotate(p - Vec2{ego.x, ego.y}, -ego.psi);
}

Vec2 from_ego_frame(Vec2 p, const AgentState& ego) {
  return rotate(p, ego.psi) + Vec2{ego.x, ego.y};
}

}  // namespace dsim
