#include "dsim/rasterizer.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>
#include <numeric>

namespace dsim::raster {

void BirdviewConfig::validate() const {
  if (resolution_px <= 0) throw Error("birdview: resolution_px must be positive");
  if (!(extent_m > 0.0)) throw Error("birdview: extent_m must be positive");
  if (!(sigma_blend > 0.0)) throw Error("birdview: sigma_blend must be positive");
  if (!(gamma_blend > 0.0)) throw Error("birdview: gamma_blend must be positive");
  if (!std::isfinite(eps_bg)) throw Error("birdview: eps_bg must be finite");
  if (!(layer_spacing > 0.0)) throw Error("birdview: layer_spacing must be positive");
  if (tile_px <= 0) throw Error("birdview: tile_px must be positive");
}

BirdviewConfig toy_config() {
  BirdviewConfig c;
  c.resolution_px = 64;
  c.extent_m = 64.0;
  return c;
}

std::array<Vec2, 4> box_corners(const BoxGeometry& g) {
  const double c = std::cos(g.angle);
  const double s = std::sin(g.angle);
  const double hl = 0.5 * g.length;
  const double hw = 0.5 * g.width;
  const Vec2 local[4] = {{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}};
  std::array<Vec2, 4> out;
  for (int i = 0; i < 4; ++i) {
    out[static_cast<std::size_t>(i)] = {g.center.x + c * local[i].x - s * local[i].y,
                                        g.center.y + s * local[i].x + c * local[i].y};
  }
  return out;
}

namespace {

void check_color(Color c) {
  for (double v : {c.r, c.g, c.b}) {
    if (!(v >= 0.0 && v <= 1.0)) throw Error("draw primitive: color outside [0, 1]");
  }
}

double ring_area(const std::vector<Vec2>& ring) {
  double a = 0.0;
  for (std::size_t i = 0; i < ring.size(); ++i) {
    a += cross(ring[i], ring[(i + 1) % ring.size()]);
  }
  return 0.5 * a;
}

}  // namespace

void validate(const DrawPrimitive& p) {
  check_color(p.color);
  if (!std::isfinite(p.layer)) throw Error("draw primitive: non-finite layer");
  for (Vec2 v : p.vertices) {
    if (!std::isfinite(v.x) || !std::isfinite(v.y)) {
      throw Error("draw primitive: non-finite vertex");
    }
  }
  if (p.kind == GeometryKind::Polyline) {
    if (p.vertices.size() < 2) throw Error("draw primitive: polyline needs 2 points");
    if (!(p.half_width > 0.0)) throw Error("draw primitive: polyline width must be positive");
  } else {
    if (p.vertices.size() < 3) throw Error("draw primitive: polygon needs 3 vertices");
    if (std::abs(ring_area(p.vertices)) < 1e-12) {
      throw Error("draw primitive: degenerate (zero-area) polygon");
    }
  }
}

DrawPrimitive DrawPrimitive::box(const BoxGeometry& g, Color color, double layer) {
  if (!(g.length > 0.0) || !(g.width > 0.0)) {
    throw Error("draw primitive: degenerate (zero-area) box");
  }
  const auto c = box_corners(g);
  DrawPrimitive p;
  p.kind = GeometryKind::Box;
  p.vertices.assign(c.begin(), c.end());
  p.color = color;
  p.layer = layer;
  validate(p);
  return p;
}

DrawPrimitive DrawPrimitive::polygon(std::vector<Vec2> ring, Color color, double layer) {
  DrawPrimitive p;
  p.kind = GeometryKind::Polygon;
  p.vertices = std::move(ring);
  p.color = color;
  p.layer = layer;
  validate(p);
  return p;
}

DrawPrimitive DrawPrimitive::polyline(std::vector<Vec2> points, double width, Color color,
                                      double layer) {
  DrawPrimitive p;
  p.kind = GeometryKind::Polyline;
  p.vertices = std::move(points);
  p.half_width = 0.5 * width;
  p.color = color;
  p.layer = layer;
  validate(p);
  return p;
}

namespace {

struct SdfDetail {
  double sd = 0.0;
  double dist = 0.0;  // unsigned distance to the closest segment
  int segment = 0;
  double t = 0.0;
  double sign = 1.0;  // -1 inside a polygon
  Vec2 closest;
};

inline double segment_dist2(Vec2 p, Vec2 a, Vec2 b, double& t_out) {
  const double ex = b.x - a.x;
  const double ey = b.y - a.y;
  const double len2 = ex * ex + ey * ey;
  double t = 0.0;
  if (len2 > 0.0) {
    t = ((p.x - a.x) * ex + (p.y - a.y) * ey) / len2;
    t = std::clamp(t, 0.0, 1.0);
  }
  t_out = t;
  const double dx = p.x - (a.x + t * ex);
  const double dy = p.y - (a.y + t * ey);
  return dx * dx + dy * dy;
}

inline bool inside_ring(Vec2 p, const Vec2* v, std::size_t n) {
  bool in = false;
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    if ((v[i].y > p.y) != (v[j].y > p.y)) {
      const double xc = v[j].x + (p.y - v[j].y) * (v[i].x - v[j].x) / (v[i].y - v[j].y);
      if (p.x < xc) in = !in;
    }
  }
  return in;
}

/// Signed distance over a raw vertex array. Closed rings for boxes/polygons.
inline double sdf_raw(Vec2 p, GeometryKind kind, const Vec2* v, std::size_t n,
                      double half_width) {
  double best = std::numeric_limits<double>::infinity();
  double t;
  if (kind == GeometryKind::Polyline) {
    for (std::size_t i = 0; i + 1 < n; ++i) best = std::min(best, segment_dist2(p, v[i], v[i + 1], t));
    return std::sqrt(best) - half_width;
  }
  for (std::size_t i = 0; i < n; ++i) {
    best = std::min(best, segment_dist2(p, v[i], v[(i + 1) % n], t));
  }
  const double d = std::sqrt(best);
  return inside_ring(p, v, n) ? -d : d;
}

SdfDetail sdf_detail(Vec2 p, GeometryKind kind, const Vec2* v, std::size_t n,
                     double half_width) {
  SdfDetail out;
  double best = std::numeric_limits<double>::infinity();
  const bool closed = kind != GeometryKind::Polyline;
  const std::size_t segs = closed ? n : n - 1;
  for (std::size_t i = 0; i < segs; ++i) {
    double t;
    const double d2 = segment_dist2(p, v[i], v[(i + 1) % n], t);
    if (d2 < best) {
      best = d2;
      out.segment = static_cast<int>(i);
      out.t = t;
    }
  }
  out.dist = std::sqrt(best);
  const Vec2 a = v[static_cast<std::size_t>(out.segment)];
  const Vec2 b = v[(static_cast<std::size_t>(out.segment) + 1) % n];
  out.closest = a + out.t * (b - a);
  if (closed) {
    out.sign = inside_ring(p, v, n) ? -1.0 : 1.0;
    out.sd = out.sign * out.dist;
  } else {
    out.sd = out.dist - half_width;
  }
  return out;
}

}  // namespace

double signed_distance(Vec2 p, const DrawPrimitive& prim) {
  validate(prim);
  return sdf_raw(p, prim.kind, prim.vertices.data(), prim.vertices.size(), prim.half_width);
}

Vec2 pixel_center(int row, int col, const BirdviewConfig& cfg) {
  const double res = cfg.pixel_m();
  const double half = 0.5 * cfg.resolution_px;
  return {(half - row - 0.5) * res, (half - col - 0.5) * res};
}

namespace {

std::vector<std::size_t> draw_order(std::span<const AgentView> agents, std::size_t ego) {
  if (ego >= agents.size()) throw Error("birdview: ego index out of range");
  if (!agents[ego].valid) throw Error("birdview: ego agent is not valid at this step");
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < agents.size(); ++i) {
    if (i != ego && agents[i].valid) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return agents[a].id < agents[b].id;
  });
  order.push_back(ego);
  return order;
}

}  // namespace

std::vector<DrawPrimitive> build_primitives(const MapData& map,
                                            std::span<const AgentView> agents,
                                            std::size_t ego) {
  const std::vector<std::size_t> order = draw_order(agents, ego);
  const AgentState& e = agents[ego].state;
  std::vector<DrawPrimitive> prims;
  prims.reserve(map.driveable_polygons.size() + map.lane_lines.size() + order.size());
  for (const auto& poly : map.driveable_polygons) {
    std::vector<Vec2> ring;
    ring.reserve(poly.size());
    for (Vec2 v : poly) ring.push_back(to_ego_frame(v, e));
    prims.push_back(DrawPrimitive::polygon(std::move(ring), palette::kDriveable, layer::kMap));
  }
  for (const auto& line : map.lane_lines) {
    std::vector<Vec2> pts;
    pts.reserve(line.points.size());
    for (Vec2 v : line.points) pts.push_back(to_ego_frame(v, e));
    prims.push_back(
        DrawPrimitive::polyline(std::move(pts), line.width, palette::kLane, layer::kLane));
  }
  for (std::size_t i : order) {
    const AgentView& a = agents[i];
    BoxGeometry g;
    g.center = to_ego_frame({a.state.x, a.state.y}, e);
    g.length = a.attributes.length;
    g.width = a.attributes.width;
    g.angle = a.state.psi - e.psi;
    const bool is_ego = i == ego;
    prims.push_back(DrawPrimitive::box(g, is_ego ? palette::kEgo : palette::kOther,
                                       is_ego ? layer::kEgo : layer::kOther));
  }
  return prims;
}

std::vector<DrawPrimitive> scene_to_primitives(const Scene& scene, int t, std::size_t ego) {
  if (t < 0 || t >= scene.horizon) throw Error("birdview: step out of range");
  std::vector<AgentView> views;
  views.reserve(scene.agents.size());
  for (const auto& a : scene.agents) {
    const bool valid = a.trajectory.is_valid(static_cast<std::size_t>(t));
    views.push_back({a.id, a.attributes,
                     valid ? a.trajectory.states[static_cast<std::size_t>(t)] : AgentState{},
                     valid});
  }
  return build_primitives(scene.map, views, ego);
}

Birdview blank_birdview(const BirdviewConfig& cfg) {
  cfg.validate();
  const int n = cfg.resolution_px;
  Birdview img({3, n, n});
  const std::size_t hw = static_cast<std::size_t>(n) * static_cast<std::size_t>(n);
  const double bg[3] = {palette::kBackground.r, palette::kBackground.g, palette::kBackground.b};
  for (int c = 0; c < 3; ++c) {
    std::fill_n(img.data().begin() + static_cast<std::ptrdiff_t>(c * hw), hw, bg[c]);
  }
  return img;
}

namespace {

/// Visits every pixel that a primitive can influence: pixels are skipped
/// when the primitive's blend weight relative to the background is below
/// exp(-kSupportLogCut), and reported as saturated (coverage 1) when they lie
/// deep inside. Tiles use the 1-Lipschitz bound of the SDF to classify whole
/// blocks at once; results do not depend on the tile size.
constexpr double kSupportLogCut = 23.0;
constexpr double kSaturation = 50.0;  // d^2 / sigma beyond which D = 1

struct PrimView {
  GeometryKind kind;
  const Vec2* v;
  std::size_t n;
  double half_width;
  double zt;  // blend depth
  Color color;
};

struct Geometry {
  int res;
  double pix;        // meters per pixel
  double ndc;        // NDC units per meter
  double sigma;
  double gamma;
  double l_bg;
};

Geometry make_geometry(const BirdviewConfig& cfg) {
  return {cfg.resolution_px, cfg.pixel_m(), 2.0 / cfg.extent_m, cfg.sigma_blend,
          cfg.gamma_blend, cfg.eps_bg / cfg.gamma_blend};
}


/// Log blend score of a pixel at signed distance sd (meters).
inline double log_score(double sd_m, double zt, const Geometry& g) {
  const double d = sd_m * g.ndc;
  const double s = -d * std::abs(d) / g.sigma;
  // log(sigmoid(s)), stable for both signs.
  const double log_d = s >= 0.0 ? -std::log1p(std::exp(-s)) : s - std::log1p(std::exp(s));
  return log_d + zt / g.gamma;
}

template <typename Visit>
void for_each_support_pixel(const PrimView& p, const Geometry& g, int tile, Visit&& visit) {
  // Distances (meters) for cut-off and saturation.
  const double log_margin = std::max(0.0, p.zt / g.gamma - g.l_bg) + kSupportLogCut;
  const double cut_m = std::sqrt(g.sigma * log_margin) / g.ndc;
  const double sat_m = std::sqrt(g.sigma * kSaturation) / g.ndc;
  const double grow = cut_m + (p.kind == GeometryKind::Polyline ? p.half_width : 0.0);

  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (std::size_t i = 0; i < p.n; ++i) {
    xmin = std::min(xmin, p.v[i].x);
    xmax = std::max(xmax, p.v[i].x);
    ymin = std::min(ymin, p.v[i].y);
    ymax = std::max(ymax, p.v[i].y);
  }
  const double half = 0.5 * g.res;
  auto clampi = [&](double v) {
    if (v < 0.0) return 0;
    if (v > g.res - 1) return g.res - 1;
    return static_cast<int>(v);
  };
  const double r_lo_f = std::floor(half - 0.5 - (xmax + grow) / g.pix);
  const double r_hi_f = std::ceil(half - 0.5 - (xmin - grow) / g.pix);
  const double c_lo_f = std::floor(half - 0.5 - (ymax + grow) / g.pix);
  const double c_hi_f = std::ceil(half - 0.5 - (ymin - grow) / g.pix);
  if (r_hi_f < 0 || c_hi_f < 0 || r_lo_f > g.res - 1 || c_lo_f > g.res - 1) return;
  const int r_lo = clampi(r_lo_f), r_hi = clampi(r_hi_f);
  const int c_lo = clampi(c_lo_f), c_hi = clampi(c_hi_f);

  for (int tr = (r_lo / tile) * tile; tr <= r_hi; tr += tile) {
    for (int tc = (c_lo / tile) * tile; tc <= c_hi; tc += tile) {
      const int r0 = std::max(tr, r_lo), r1 = std::min(tr + tile - 1, r_hi);
      const int c0 = std::max(tc, c_lo), c1 = std::min(tc + tile - 1, c_hi);
      const double cr = 0.5 * (r0 + r1), cc = 0.5 * (c0 + c1);
      const Vec2 center{(half - cr - 0.5) * g.pix, (half - cc - 0.5) * g.pix};
      const double radius =
          0.5 * std::hypot(static_cast<double>(r1 - r0), static_cast<double>(c1 - c0)) * g.pix;
      const double sdc = sdf_raw(center, p.kind, p.v, p.n, p.half_width);
      if (sdc - radius > cut_m) continue;
      const bool saturated = sdc + radius < -sat_m;
      for (int r = r0; r <= r1; ++r) {
        for (int c = c0; c <= c1; ++c) {
          if (saturated) {
            visit(r, c, 0.0, true);
            continue;
          }
          const Vec2 q{(half - r - 0.5) * g.pix, (half - c - 0.5) * g.pix};
          const double sd = sdf_raw(q, p.kind, p.v, p.n, p.half_width);
          if (sd > cut_m) continue;
          visit(r, c, sd, sd < -sat_m);
        }
      }
    }
  }
}

struct SoftAccum {
  std::vector<double> m;  // running max log score
  std::vector<double> s;  // sum exp(l - m)
  std::vector<double> n;  // 3 x HW color numerators
};

}  // namespace

double blend_depth(double layer, const BirdviewConfig& cfg);

namespace {

std::vector<PrimView> make_views(std::span<const DrawPrimitive> prims, const Vec2* verts,
                                 const BirdviewConfig& cfg) {
  std::vector<PrimView> views;
  views.reserve(prims.size());
  std::size_t off = 0;
  for (const auto& p : prims) {
    const Vec2* v = verts ? verts + off : p.vertices.data();
    views.push_back({p.kind, v, p.vertices.size(), p.half_width, blend_depth(p.layer, cfg),
                     p.color});
    off += p.vertices.size();
  }
  return views;
}

Birdview soft_forward(const std::vector<PrimView>& views, const BirdviewConfig& cfg,
                      SoftAccum& acc) {
  cfg.validate();
  const Geometry g = make_geometry(cfg);
  const std::size_t hw = static_cast<std::size_t>(g.res) * static_cast<std::size_t>(g.res);
  acc.m.assign(hw, g.l_bg);
  acc.s.assign(hw, 1.0);
  acc.n.resize(3 * hw);
  const double bg[3] = {palette::kBackground.r, palette::kBackground.g, palette::kBackground.b};
  for (int c = 0; c < 3; ++c) std::fill_n(acc.n.begin() + static_cast<std::ptrdiff_t>(c * hw), hw, bg[c]);

  for (const PrimView& p : views) {
    const double col[3] = {p.color.r, p.color.g, p.color.b};
    const double l_sat = p.zt / g.gamma;
    for_each_support_pixel(p, g, cfg.tile_px, [&](int r, int c, double sd, bool sat) {
      const std::size_t i = static_cast<std::size_t>(r) * static_cast<std::size_t>(g.res) +
                            static_cast<std::size_t>(c);
      const double l = sat ? l_sat : log_score(sd, p.zt, g);
      if (l > acc.m[i]) {
        const double f = std::exp(acc.m[i] - l);
        acc.s[i] = acc.s[i] * f + 1.0;
        for (int k = 0; k < 3; ++k) acc.n[k * hw + i] = acc.n[k * hw + i] * f + col[k];
        acc.m[i] = l;
      } else {
        const double e = std::exp(l - acc.m[i]);
        acc.s[i] += e;
        for (int k = 0; k < 3; ++k) acc.n[k * hw + i] += e * col[k];
      }
    });
  }
  Birdview img({3, g.res, g.res});
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t i = 0; i < hw; ++i) {
      img[k * hw + i] = std::clamp(acc.n[k * hw + i] / acc.s[i], 0.0, 1.0);
    }
  }
  return img;
}

}  // namespace

double blend_depth(double layer, const BirdviewConfig& cfg) {
  return cfg.eps_bg + cfg.layer_spacing * (layer + 1.0);
}

double soft_coverage(double sd_m, const BirdviewConfig& cfg) {
  const double d = sd_m * 2.0 / cfg.extent_m;
  const double s = -d * std::abs(d) / cfg.sigma_blend;
  return s >= 0.0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s));
}

Birdview rasterize_soft(std::span<const DrawPrimitive> prims, const BirdviewConfig& cfg) {
  for (const auto& p : prims) validate(p);
  SoftAccum acc;
  return soft_forward(make_views(prims, nullptr, cfg), cfg, acc);
}

Birdview rasterize_hard(std::span<const DrawPrimitive> prims, const BirdviewConfig& cfg) {
  cfg.validate();
  for (const auto& p : prims) validate(p);
  const int n = cfg.resolution_px;
  const std::size_t hw = static_cast<std::size_t>(n) * static_cast<std::size_t>(n);
  Birdview img = blank_birdview(cfg);
  std::vector<double> top(hw, -std::numeric_limits<double>::infinity());
  for (const auto& p : prims) {
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < n; ++c) {
        const std::size_t i = static_cast<std::size_t>(r) * static_cast<std::size_t>(n) +
                              static_cast<std::size_t>(c);
        if (p.layer < top[i]) continue;
        const Vec2 q = pixel_center(r, c, cfg);
        if (sdf_raw(q, p.kind, p.vertices.data(), p.vertices.size(), p.half_width) > 0.0) continue;
        top[i] = p.layer;
        img[i] = p.color.r;
        img[hw + i] = p.color.g;
        img[2 * hw + i] = p.color.b;
      }
    }
  }
  return img;
}

ad::Tensor flatten_vertices(std::span<const DrawPrimitive> prims) {
  std::size_t m = 0;
  for (const auto& p : prims) m += p.vertices.size();
  ad::Tensor t({static_cast<int>(m), 2});
  std::size_t k = 0;
  for (const auto& p : prims) {
    for (Vec2 v : p.vertices) {
      t[2 * k] = v.x;
      t[2 * k + 1] = v.y;
      ++k;
    }
  }
  return t;
}

ad::Var render_soft(std::span<const DrawPrimitive> prims, ad::Var vertices,
                    const BirdviewConfig& cfg) {
  std::size_t m = 0;
  for (const auto& p : prims) m += p.vertices.size();
  const ad::Tensor& vt = vertices.value();
  if (vt.rank() != 2 || vt.dim(1) != 2 || static_cast<std::size_t>(vt.dim(0)) != m) {
    throw Error("render_soft: vertices must be " + std::to_string(m) + " x 2, got " +
                ad::shape_str(vt.shape()));
  }
  auto verts = std::make_shared<std::vector<Vec2>>(m);
  for (std::size_t k = 0; k < m; ++k) (*verts)[k] = {vt[2 * k], vt[2 * k + 1]};
  auto meta = std::make_shared<std::vector<DrawPrimitive>>(prims.begin(), prims.end());
  {
    std::size_t off = 0;
    for (auto& p : *meta) {
      std::copy_n(verts->begin() + static_cast<std::ptrdiff_t>(off), p.vertices.size(),
                  p.vertices.begin());
      off += p.vertices.size();
      validate(p);
    }
  }
  auto acc = std::make_shared<SoftAccum>();
  Birdview img = soft_forward(make_views(*meta, verts->data(), cfg), cfg, *acc);
  auto image = std::make_shared<ad::Tensor>(img);

  return vertices.tape()->record(
      std::move(img), {vertices},
      [meta, verts, acc, image, cfg](const ad::Tensor& gout, std::span<ad::Tensor*> gin) {
        if (!gin[0]) return;
        ad::Tensor& gv = *gin[0];
        const Geometry g = make_geometry(cfg);
        const std::size_t hw = static_cast<std::size_t>(g.res) * static_cast<std::size_t>(g.res);
        const std::vector<PrimView> views = make_views(*meta, verts->data(), cfg);
        std::size_t off = 0;
        for (const PrimView& p : views) {
          const double col[3] = {p.color.r, p.color.g, p.color.b};
          for_each_support_pixel(p, g, cfg.tile_px, [&](int r, int c, double, bool sat) {
            if (sat) return;
            const std::size_t i = static_cast<std::size_t>(r) * static_cast<std::size_t>(g.res) +
                                  static_cast<std::size_t>(c);
            const Vec2 q{(0.5 * g.res - r - 0.5) * g.pix, (0.5 * g.res - c - 0.5) * g.pix};
            const SdfDetail d = sdf_detail(q, p.kind, p.v, p.n, p.half_width);
            if (d.dist == 0.0) return;
            const double l = log_score(d.sd, p.zt, g);
            const double w = std::exp(l - acc->m[i]) / acc->s[i];
            double dl = 0.0;
            for (std::size_t k = 0; k < 3; ++k) {
              dl += gout[k * hw + i] * w * (col[k] - (*image)[k * hw + i]);
            }
            if (dl == 0.0) return;
            const double dn = d.sd * g.ndc;
            const double s = -dn * std::abs(dn) / g.sigma;
            const double sig_neg = 1.0 / (1.0 + std::exp(s));  // sigmoid(-s)
            const double dsd = dl * sig_neg * (-2.0 * std::abs(dn) * g.ndc / g.sigma);
            // d sd / d closest point = -sign * unit(q - closest).
            const double nx = (q.x - d.closest.x) / d.dist;
            const double ny = (q.y - d.closest.y) / d.dist;
            const double sg = p.kind == GeometryKind::Polyline ? 1.0 : d.sign;
            const std::size_t ia = off + static_cast<std::size_t>(d.segment);
            const std::size_t ib = off + (static_cast<std::size_t>(d.segment) + 1) % p.n;
            const double wa = -sg * dsd * (1.0 - d.t);
            const double wb = -sg * dsd * d.t;
            gv[2 * ia] += wa * nx;
            gv[2 * ia + 1] += wa * ny;
            gv[2 * ib] += wb * nx;
            gv[2 * ib + 1] += wb * ny;
          });
          off += p.n;
        }
      },
      "render_soft");
}

namespace {

/// Row-vector rotation: p * rot_rows(c, s) rotates p by the angle with
/// cosine c and sine s.
ad::Var rot_rows(ad::Var c, ad::Var s) {
  return ad::reshape(ad::concat({c, s, ad::neg(s), c}), {2, 2});
}

}  // namespace

ad::Var render_agents_soft(ad::Tape& tape, const MapData& map,
                           std::span<const AgentView> agents,
                           std::span<const StateVar> states, std::size_t ego,
                           const BirdviewConfig& cfg) {
  if (states.size() != agents.size()) throw Error("render: one state per agent required");
  std::vector<AgentView> views(agents.begin(), agents.end());
  for (std::size_t i = 0; i < views.size(); ++i) {
    if (views[i].valid) views[i].state = value_of(states[i]);
  }
  const std::vector<DrawPrimitive> prims = build_primitives(map, views, ego);
  const std::vector<std::size_t> order = draw_order(views, ego);
  const StateVar& e = states[ego];
  const ad::Var ce = ad::cos(e.psi);
  const ad::Var se = ad::sin(e.psi);
  const ad::Var to_ego = rot_rows(ce, ad::neg(se));
  const ad::Var ego_xy = ad::reshape(ad::concat({e.x, e.y}), {1, 2});

  std::vector<ad::Var> parts;
  std::size_t map_vertices = 0;
  for (const auto& p : map.driveable_polygons) map_vertices += p.size();
  for (const auto& l : map.lane_lines) map_vertices += l.points.size();
  if (map_vertices > 0) {
    ad::Tensor world({static_cast<int>(map_vertices), 2});
    std::size_t k = 0;
    auto put = [&](Vec2 v) {
      world[2 * k] = v.x;
      world[2 * k + 1] = v.y;
      ++k;
    };
    for (const auto& p : map.driveable_polygons) for (Vec2 v : p) put(v);
    for (const auto& l : map.lane_lines) for (Vec2 v : l.points) put(v);
    const ad::Var w = tape.constant(std::move(world));
    const int m = static_cast<int>(map_vertices);
    parts.push_back(ad::matmul(ad::sub(w, ad::broadcast_to(ego_xy, {m, 2})), to_ego));
  }
  for (std::size_t i : order) {
    const StateVar& s = states[i];
    const double hl = 0.5 * views[i].attributes.length;
    const double hw = 0.5 * views[i].attributes.width;
    const ad::Var local =
        tape.constant(ad::Tensor({4, 2}, {hl, hw, -hl, hw, -hl, -hw, hl, -hw}));
    const ad::Var rel = ad::sub(s.psi, e.psi);
    const ad::Var center =
        ad::matmul(ad::sub(ad::reshape(ad::concat({s.x, s.y}), {1, 2}), ego_xy), to_ego);
    parts.push_back(ad::add(ad::matmul(local, rot_rows(ad::cos(rel), ad::sin(rel))),
                            ad::broadcast_to(center, {4, 2})));
  }
  std::size_t total = 0;
  for (const auto& p : prims) total += p.vertices.size();
  const ad::Var flat = ad::concat(parts);
  return render_soft(prims, ad::reshape(flat, {static_cast<int>(total), 2}), cfg);
}

std::vector<unsigned char> encode_png(const Birdview& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw Error("png: image must be 3 x H x W");
  const int h = image.dim(1), w = image.dim(2);
  const std::size_t hw = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  std::vector<unsigned char> rgb(3 * hw);
  for (std::size_t i = 0; i < hw; ++i) {
    for (std::size_t k = 0; k < 3; ++k) {
      const double v = std::clamp(image[k * hw + i], 0.0, 1.0);
      rgb[3 * i + k] = static_cast<unsigned char>(std::lround(255.0 * v));
    }
  }
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw RuntimeError("png: cannot create writer");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw RuntimeError("png: cannot create info");
  }
  std::vector<unsigned char> out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw RuntimeError("png: encoding failed");
  }
  png_set_write_fn(
      png, &out,
      [](png_structp p, png_bytep data, png_size_t len) {
        auto* buf = static_cast<std::vector<unsigned char>*>(png_get_io_ptr(p));
        buf->insert(buf->end(), data, data + len);
      },
      nullptr);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < h; ++r) {
    png_write_row(png, rgb.data() + static_cast<std::size_t>(r) * 3 * static_cast<std::size_t>(w));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

void write_png(const std::string& path, const Birdview& image) {
  const std::vector<unsigned char> bytes = encode_png(image);
  std::unique_ptr<FILE, int (*)(FILE*)> f(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!f) throw RuntimeError("png: cannot open '" + path + "' for writing");
  if (std::fwrite(bytes.data(), 1, bytes.size(), f.get()) != bytes.size()) {
    throw RuntimeError("png: short write to '" + path + "'");
  }
}

}  // namespace dsim::raster
