#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace dsim {

/// Error type thrown by every module. The C API maps it to DSIM_ERR_* codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Failure while doing valid work (divergence, unwritable output). Maps to
/// DSIM_ERR_RUNTIME rather than DSIM_ERR_USAGE.
class RuntimeError : public Error {
 public:
  using Error::Error;
};

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Canonical angle in (-pi, pi]. Throws on non-finite input.
double wrap_angle(double theta);

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(Vec2 a, Vec2 b) = default;
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }

/// Rotation of a by angle (counter-clockwise).
inline Vec2 rotate(Vec2 a, double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  return {c * a.x - s * a.y, s * a.x + c * a.y};
}

/// Pose + speed of one agent at one timestep, global frame.
/// v is not constrained to be non-negative.
template <typename T>
struct BasicState {
  T x{};
  T y{};
  T psi{};
  T v{};
};

using AgentState = BasicState<double>;

inline bool is_finite(const AgentState& s) {
  return std::isfinite(s.x) && std::isfinite(s.y) && std::isfinite(s.psi) &&
         std::isfinite(s.v);
}

/// Builds a state with psi wrapped into (-pi, pi].
AgentState make_state(double x, double y, double psi, double v);

enum class AgentType { Vehicle, PedestrianBicycle };

struct AgentAttributes {
  double length = 4.5;
  double width = 1.8;
  double rear_axis_offset = 1.5;  // l_r: center to rear axle
  AgentType type = AgentType::Vehicle;
};

/// Throws unless 0 < rear_axis_offset <= length/2 and both sizes positive.
void validate(const AgentAttributes& attrs);

struct Trajectory {
  std::vector<AgentState> states;
  std::vector<bool> valid;
  double dt = 0.1;

  std::size_t size() const { return states.size(); }
  bool is_valid(std::size_t t) const { return t < valid.size() && valid[t]; }
  bool fully_valid() const;
  bool valid_between(std::size_t begin, std::size_t end) const;
};

struct Polyline {
  std::vector<Vec2> points;
  double width = 0.15;
};

struct MapData {
  std::vector<std::vector<Vec2>> driveable_polygons;
  std::vector<Polyline> lane_lines;
};

/// Throws if a polygon has fewer than 3 vertices or a polyline fewer than 2.
void validate(const MapData& map);

struct SceneAgent {
  int id = 0;  // track id, stable across windows
  AgentAttributes attributes;
  Trajectory trajectory;
};

struct Scene {
  int id = 0;
  std::vector<SceneAgent> agents;
  MapData map;
  int t_obs = 10;    // number of observed steps
  int horizon = 40;  // total steps T
  double dt = 0.1;
};

/// Throws unless 1 <= t_obs < horizon and every trajectory has horizon slots.
void validate(const Scene& scene);

/// Indices of agents valid at every step of the scene.
std::vector<std::size_t> fully_valid_agents(const Scene& scene);

/// R(-ego.psi) * (p - ego position).
Vec2 to_ego_frame(Vec2 p, const AgentState& ego);
/// Inverse of to_ego_frame.
Vec2 from_ego_frame(Vec2 p, const AgentState& ego);

}  // namespace dsim
