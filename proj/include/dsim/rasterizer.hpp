#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "dsim/autodiff.hpp"
#include "dsim/core.hpp"
#include "dsim/kinematics.hpp"

namespace dsim::raster {

struct BirdviewConfig {
  int resolution_px = 256;
  double extent_m = 100.0;
  double sigma_blend = 1e-4;  // in normalized device coordinates
  double gamma_blend = 1e-2;
  double eps_bg = 1e-3;
  // Depth used in the blend is eps_bg + layer_spacing * (layer + 1), so every
  // primitive sits above the background score.
  double layer_spacing = 0.07;
  int tile_px = 8;

  double pixel_m() const { return extent_m / resolution_px; }
  void validate() const;
};

/// Toy-scale configuration: 64 px over 64 m.
BirdviewConfig toy_config();

struct Color {
  double r = 0.0;
  double g = 0.0;
  double b = 0.0;
};

namespace palette {
inline constexpr Color kDriveable{0.35, 0.35, 0.35};
inline constexpr Color kLane{1.0, 1.0, 1.0};
inline constexpr Color kOther{0.2, 0.4, 1.0};
inline constexpr Color kEgo{1.0, 0.2, 0.2};
inline constexpr Color kBackground{1.0, 1.0, 1.0};
}  // namespace palette

namespace layer {
inline constexpr double kMap = 0.0;
inline constexpr double kLane = 1.0;
inline constexpr double kOther = 2.0;
inline constexpr double kEgo = 3.0;
}  // namespace layer

struct BoxGeometry {
  Vec2 center;
  double length = 0.0;
  double width = 0.0;
  double angle = 0.0;
};

enum class GeometryKind { Box, Polygon, Polyline };

/// Boxes and polygons are stored as closed vertex rings, polylines as open
/// point lists with a half width.
struct DrawPrimitive {
  GeometryKind kind = GeometryKind::Polygon;
  std::vector<Vec2> vertices;
  double half_width = 0.0;
  Color color;
  double layer = 0.0;

  static DrawPrimitive box(const BoxGeometry& g, Color color, double layer);
  static DrawPrimitive polygon(std::vector<Vec2> ring, Color color, double layer);
  static DrawPrimitive polyline(std::vector<Vec2> points, double width, Color color,
                                double layer);
};

/// Corners of an oriented box, counter-clockwise from front-left.
std::array<Vec2, 4> box_corners(const BoxGeometry& g);

void validate(const DrawPrimitive& p);

/// Exact signed distance in meters, negative inside. Polylines: distance to
/// the centerline minus half width.
double signed_distance(Vec2 p, const DrawPrimitive& prim);

/// C x H x W image, C = 3, values in [0, 1]. Row 0 is the far end in front
/// of the ego (+x), column 0 is its left (+y).
using Birdview = ad::Tensor;

/// Ego-frame center of pixel (row, col).
Vec2 pixel_center(int row, int col, const BirdviewConfig& cfg);

struct AgentView {
  int id = 0;
  AgentAttributes attributes;
  AgentState state;
  bool valid = true;
};

/// Map polygons, lane lines and one box per valid agent in ego coordinates.
/// Other agents are ordered by id; the ego box is last.
std::vector<DrawPrimitive> build_primitives(const MapData& map,
                                            std::span<const AgentView> agents,
                                            std::size_t ego);

/// Same for a recorded scene at step t.
std::vector<DrawPrimitive> scene_to_primitives(const Scene& scene, int t,
                                               std::size_t ego);

/// Soft coverage sigmoid(delta d^2 / sigma) of a point at signed distance
/// sd_m meters, with d measured in normalized device coordinates.
double soft_coverage(double sd_m, const BirdviewConfig& cfg);
/// Depth value entering the blend softmax for a primitive layer.
double blend_depth(double layer, const BirdviewConfig& cfg);

Birdview rasterize_soft(std::span<const DrawPrimitive> prims, const BirdviewConfig& cfg);
Birdview rasterize_hard(std::span<const DrawPrimitive> prims, const BirdviewConfig& cfg);
/// All-background image.
Birdview blank_birdview(const BirdviewConfig& cfg);

/// Differentiable soft rasterization. `vertices` is M x 2 and replaces the
/// vertices of `prims`, concatenated in order.
ad::Var render_soft(std::span<const DrawPrimitive> prims, ad::Var vertices,
                    const BirdviewConfig& cfg);

/// Vertices of `prims` as an M x 2 tensor.
ad::Tensor flatten_vertices(std::span<const DrawPrimitive> prims);

/// Differentiable ego-centered birdview. `states` holds one StateVar per
/// agent (constants for agents that should receive no gradient); `agents`
/// supplies ids, attributes and validity.
ad::Var render_agents_soft(ad::Tape& tape, const MapData& map,
                           std::span<const AgentView> agents,
                           std::span<const StateVar> states, std::size_t ego,
                           const BirdviewConfig& cfg);

/// 8-bit RGB PNG, value round(255 x).
void write_png(const std::string& path, const Birdview& image);
std::vector<unsigned char> encode_png(const Birdview& image);

}  // namespace dsim::raster
