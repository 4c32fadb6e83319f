#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "dsim/core.hpp"

using namespace dsim;

TEST(WrapAngle, Examples) {
  EXPECT_EQ(wrap_angle(0.0), 0.0);
  EXPECT_NEAR(wrap_angle(3.0 * kPi), kPi, 1e-12);
  EXPECT_EQ(wrap_angle(-kPi), kPi);
  EXPECT_EQ(wrap_angle(kPi), kPi);
}

TEST(WrapAngle, RangeAndIdempotence) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-100.0, 100.0);
  for (int i = 0; i < 10000; ++i) {
    const double x = u(rng);
    const double w = wrap_angle(x);
    EXPECT_GT(w, -kPi);
    EXPECT_LE(w, kPi);
    EXPECT_EQ(wrap_angle(w), w);
    const double k = std::round((x - w) / kTwoPi);
    EXPECT_NEAR(x - w, k * kTwoPi, 1e-9);
  }
}

TEST(WrapAngle, RejectsNonFinite) {
  EXPECT_THROW(wrap_angle(std::numeric_limits<double>::quiet_NaN()), Error);
  EXPECT_THROW(wrap_angle(std::numeric_limits<double>::infinity()), Error);
}

TEST(EgoFrame, Examples) {
  const AgentState ego = make_state(0, 0, kPi / 2, 0);
  const Vec2 q = to_ego_frame({1, 0}, ego);
  EXPECT_NEAR(q.x, 0.0, 1e-12);
  EXPECT_NEAR(q.y, -1.0, 1e-12);
  const AgentState e2 = make_state(2, 3, 0.7, 1);
  const Vec2 o = to_ego_frame({2, 3}, e2);
  EXPECT_NEAR(o.x, 0.0, 1e-12);
  EXPECT_NEAR(o.y, 0.0, 1e-12);
}

TEST(EgoFrame, HeadingMapsToPlusX) {
  const AgentState ego = make_state(5, -2, 2.1, 3);
  const Vec2 ahead{5 + std::cos(2.1), -2 + std::sin(2.1)};
  const Vec2 q = to_ego_frame(ahead, ego);
  EXPECT_NEAR(q.x, 1.0, 1e-12);
  EXPECT_NEAR(q.y, 0.0, 1e-12);
}

TEST(EgoFrame, IsometryAndRoundTrip) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  for (int trial = 0; trial < 200; ++trial) {
    const AgentState ego = make_state(u(rng), u(rng), u(rng), 0);
    std::vector<Vec2> pts;
    for (int i = 0; i < 6; ++i) pts.push_back({u(rng), u(rng)});
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const Vec2 back = from_ego_frame(to_ego_frame(pts[i], ego), ego);
      EXPECT_NEAR(back.x, pts[i].x, 1e-9);
      EXPECT_NEAR(back.y, pts[i].y, 1e-9);
      const Vec2 fwd = to_ego_frame(from_ego_frame(pts[i], ego), ego);
      EXPECT_NEAR(fwd.x, pts[i].x, 1e-9);
      EXPECT_NEAR(fwd.y, pts[i].y, 1e-9);
      for (std::size_t j = i + 1; j < pts.size(); ++j) {
        const double d0 = norm(pts[i] - pts[j]);
        const double d1 = norm(to_ego_frame(pts[i], ego) - to_ego_frame(pts[j], ego));
        EXPECT_NEAR(d1, d0, 1e-9 * std::max(1.0, d0));
      }
    }
  }
}

TEST(Validate, Attributes) {
  AgentAttributes a;
  EXPECT_NO_THROW(validate(a));
  a.rear_axis_offset = a.length / 2;
  EXPECT_NO_THROW(validate(a));
  a.rear_axis_offset = a.length / 2 + 0.01;
  EXPECT_THROW(validate(a), Error);
  a.rear_axis_offset = 0.0;
  EXPECT_THROW(validate(a), Error);
  a = {};
  a.width = 0.0;
  EXPECT_THROW(validate(a), Error);
}

TEST(Validate, MapAndScene) {
  MapData m;
  m.driveable_polygons.push_back({{0, 0}, {1, 0}});
  EXPECT_THROW(validate(m), Error);
  m.driveable_polygons[0].push_back({1, 1});
  EXPECT_NO_THROW(validate(m));
  m.lane_lines.push_back({{{0, 0}}, 0.2});
  EXPECT_THROW(validate(m), Error);

  Scene s;
  s.horizon = 3;
  s.t_obs = 1;
  SceneAgent a;
  a.trajectory.states.assign(3, make_state(0, 0, 0, 0));
  a.trajectory.valid.assign(3, true);
  s.agents.push_back(a);
  EXPECT_NO_THROW(validate(s));
  s.t_obs = 3;
  EXPECT_THROW(validate(s), Error);
  s.t_obs = 1;
  s.agents[0].trajectory.states.pop_back();
  EXPECT_THROW(validate(s), Error);
}

TEST(Trajectory, ValidityQueries) {
  Trajectory t;
  t.states.assign(4, make_state(0, 0, 0, 0));
  t.valid = {false, true, true, false};
  EXPECT_FALSE(t.fully_valid());
  EXPECT_TRUE(t.valid_between(1, 3));
  EXPECT_FALSE(t.valid_between(0, 2));
  EXPECT_FALSE(t.is_valid(10));
}
