#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "dsim/metrics.hpp"

using namespace dsim;
using namespace dsim::metrics;

namespace {

std::vector<Vec2> constant(int n, Vec2 p) { return std::vector<Vec2>(static_cast<std::size_t>(n), p); }

std::vector<Vec2> random_path(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> g(0.0, 3.0);
  std::vector<Vec2> p;
  for (int i = 0; i < n; ++i) p.push_back({g(rng), g(rng)});
  return p;
}

// Independent oracles: element-wise loops over every sample and pair.
double oracle_ade(const std::vector<Vec2>& p, const std::vector<Vec2>& g) {
  long double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    s += (p[i].x - g[i].x) * (p[i].x - g[i].x) + (p[i].y - g[i].y) * (p[i].y - g[i].y);
  }
  return std::sqrt(static_cast<double>(s / p.size()));
}

Vec2 apply_rigid(Vec2 p, double th, Vec2 t) { return rotate(p, th) + t; }

}  // namespace

TEST(Ade, Examples) {
  const auto gt = constant(5, {1, 2});
  EXPECT_EQ(ade(gt, gt), 0.0);
  EXPECT_NEAR(ade(constant(5, {4, 6}), gt), 5.0, 1e-12);
  const std::vector<Vec2> g2{{0, 0}, {0, 0}};
  const std::vector<Vec2> p2{{0, 0}, {0, 2}};
  EXPECT_NEAR(ade(p2, g2), std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(ade(p2, g2, AdeForm::MeanDistance), 1.0, 1e-12);
}

TEST(Ade, Errors) {
  const std::vector<Vec2> empty;
  EXPECT_THROW(ade(empty, empty), Error);
  EXPECT_THROW(ade(constant(2, {}), constant(3, {})), Error);
  EXPECT_THROW(ade(constant(2, {}), constant(2, {}), AdeForm::Rms, {false, false}), Error);
}

TEST(Ade, MaskSkipsSteps) {
  const std::vector<Vec2> g{{0, 0}, {0, 0}, {0, 0}};
  const std::vector<Vec2> p{{3, 4}, {100, 0}, {3, 4}};
  EXPECT_NEAR(ade(p, g, AdeForm::Rms, {true, false, true}), 5.0, 1e-12);
}

TEST(Fde, Examples) {
  const auto gt = constant(4, {0, 0});
  EXPECT_EQ(fde(gt, gt), 0.0);
  EXPECT_NEAR(fde(constant(4, {3, 4}), gt), 5.0, 1e-12);
  std::vector<Vec2> interior{{9, 9}, {7, 1}, {2, 2}, {0, 0}};
  EXPECT_EQ(fde(interior, gt), 0.0);
}

TEST(MinOverK, Examples) {
  std::mt19937_64 rng(1);
  const auto gt = random_path(rng, 10);
  const auto p = random_path(rng, 10);
  EXPECT_EQ(min_ade({p}, gt), ade(p, gt));
  EXPECT_EQ(min_fde({p}, gt), fde(p, gt));
  Samples six;
  for (int k = 0; k < 5; ++k) six.push_back(random_path(rng, 10));
  six.insert(six.begin() + 3, gt);
  EXPECT_EQ(min_ade(six, gt), 0.0);
  EXPECT_EQ(min_fde(six, gt), 0.0);
}

TEST(MinOverK, AdeAndFdeMinimizedIndependently) {
  const std::vector<Vec2> gt{{0, 0}, {0, 0}};
  const Samples s{{{0, 0}, {5, 0}}, {{1, 0}, {0, 0}}};
  EXPECT_NEAR(min_ade(s, gt), ade(s[1], gt), 1e-15);  // sample 1 is the best ADE
  EXPECT_NEAR(min_ade(s, gt), std::sqrt(0.5), 1e-12);
  EXPECT_EQ(min_fde(s, gt), 0.0);
  const Samples s2{{{0, 0}, {1, 0}}, {{4, 0}, {0, 0}}};
  EXPECT_NEAR(min_ade(s2, gt), std::sqrt(0.5), 1e-12);  // sample 0
  EXPECT_EQ(min_fde(s2, gt), 0.0);                      // sample 1
}

TEST(MinOverK, MatchesBruteForce) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const int T = 1 + static_cast<int>(rng() % 30);
    const int K = 1 + static_cast<int>(rng() % 6);
    const auto gt = random_path(rng, T);
    Samples s;
    for (int k = 0; k < K; ++k) s.push_back(random_path(rng, T));
    double ba = 1e300, bf = 1e300, mf = 0;
    for (int k = 0; k < K; ++k) {
      ba = std::min(ba, oracle_ade(s[k], gt));
      bf = std::min(bf, std::hypot(s[k].back().x - gt.back().x, s[k].back().y - gt.back().y));
      for (int l = 0; l < K; ++l) {
        mf = std::max(mf, std::hypot(s[k].back().x - s[l].back().x, s[k].back().y - s[l].back().y));
      }
    }
    EXPECT_NEAR(min_ade(s, gt), ba, 1e-12 * (1 + ba));
    EXPECT_EQ(min_fde(s, gt), bf);
    EXPECT_EQ(mfd(s), mf);
  }
}

TEST(Mfd, Examples) {
  const auto a = constant(3, {1, 1});
  EXPECT_EQ(mfd({a, a, a}), 0.0);
  EXPECT_EQ(mfd({a}), 0.0);
  EXPECT_NEAR(mfd({constant(3, {0, 0}), constant(3, {3, 4})}), 5.0, 1e-12);
}

TEST(Metrics, RigidInvariance) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-kPi, kPi);
  for (int trial = 0; trial < 50; ++trial) {
    const auto gt = random_path(rng, 12);
    Samples s;
    for (int k = 0; k < 4; ++k) s.push_back(random_path(rng, 12));
    const double th = u(rng);
    const Vec2 tr{10 * u(rng), 10 * u(rng)};
    auto move = [&](std::vector<Vec2> p) {
      for (auto& q : p) q = apply_rigid(q, th, tr);
      return p;
    };
    Samples s2;
    for (const auto& p : s) s2.push_back(move(p));
    const auto gt2 = move(gt);
    EXPECT_NEAR(min_ade(s, gt), min_ade(s2, gt2), 1e-9);
    EXPECT_NEAR(min_fde(s, gt), min_fde(s2, gt2), 1e-9);
    EXPECT_NEAR(mfd(s), mfd(s2), 1e-9);
  }
}

TEST(Metrics, NestedSamplesNeverIncreaseMin) {
  std::mt19937_64 rng(4);
  const auto gt = random_path(rng, 8);
  Samples s;
  double prev_ade = 1e300, prev_fde = 1e300, prev_mfd = 0;
  for (int k = 0; k < 8; ++k) {
    s.push_back(random_path(rng, 8));
    EXPECT_LE(min_ade(s, gt), prev_ade);
    EXPECT_LE(min_fde(s, gt), prev_fde);
    EXPECT_GE(mfd(s), prev_mfd);
    prev_ade = min_ade(s, gt);
    prev_fde = min_fde(s, gt);
    prev_mfd = mfd(s);
  }
}

TEST(Metrics, MfdPermutationInvariant) {
  std::mt19937_64 rng(5);
  Samples s;
  for (int k = 0; k < 6; ++k) s.push_back(random_path(rng, 5));
  const double ref = mfd(s);
  for (int i = 0; i < 20; ++i) {
    std::shuffle(s.begin(), s.end(), rng);
    EXPECT_EQ(mfd(s), ref);
  }
}

TEST(Metrics, AdeZeroIffMatch) {
  std::mt19937_64 rng(6);
  auto gt = random_path(rng, 6);
  EXPECT_EQ(ade(gt, gt), 0.0);
  auto p = gt;
  p[3].x += 1e-6;
  EXPECT_GT(ade(p, gt), 0.0);
}

namespace {

Scene scene_with(int id, std::vector<std::vector<AgentState>> tracks, int t_obs) {
  Scene sc;
  sc.id = id;
  sc.t_obs = t_obs;
  sc.horizon = static_cast<int>(tracks[0].size());
  int aid = 1;
  for (auto& tr : tracks) {
    SceneAgent a;
    a.id = aid++;
    a.trajectory.states = tr;
    a.trajectory.valid.assign(tr.size(), true);
    sc.agents.push_back(a);
  }
  return sc;
}

}  // namespace

TEST(Evaluate, PredEqualsGtIsZero) {
  std::vector<AgentState> tr;
  for (int t = 0; t < 6; ++t) tr.push_back(make_state(t, 0, 0, 10));
  Scene sc = scene_with(7, {tr, tr}, 2);
  sim::RolloutResult r;
  r.scene_id = 7;
  r.t_obs = 2;
  r.horizon = 6;
  for (int k = 0; k < 3; ++k) {
    sim::SampleResult s;
    for (int a = 1; a <= 2; ++a) {
      sim::AgentPrediction p;
      p.agent_id = a;
      p.states.assign(tr.begin() + 2, tr.end());
      s.agents.push_back(p);
    }
    r.samples.push_back(s);
  }
  const auto rep = evaluate({sc}, {r});
  EXPECT_EQ(rep.k, 3);
  EXPECT_EQ(rep.min_ade, 0.0);
  EXPECT_EQ(rep.min_fde, 0.0);
  EXPECT_EQ(rep.mfd, 0.0);
  ASSERT_EQ(rep.agents.size(), 2u);
  ASSERT_EQ(rep.scenes.size(), 1u);
}

TEST(Evaluate, MaskedFinalStepExcludedFromFde) {
  std::vector<AgentState> tr;
  for (int t = 0; t < 4; ++t) tr.push_back(make_state(0, 0, 0, 0));
  Scene sc = scene_with(1, {tr, tr}, 2);
  sc.agents[1].trajectory.valid[3] = false;
  sim::RolloutResult r;
  r.scene_id = 1;
  r.t_obs = 2;
  r.horizon = 4;
  sim::SampleResult s;
  for (int a = 1; a <= 2; ++a) {
    sim::AgentPrediction p;
    p.agent_id = a;
    p.states = {make_state(3, 4, 0, 0), make_state(3, 4, 0, 0)};
    s.agents.push_back(p);
  }
  r.samples = {s};
  const auto rep = evaluate({sc}, {r});
  EXPECT_NEAR(rep.min_ade, 5.0, 1e-12);
  EXPECT_NEAR(rep.min_fde, 5.0, 1e-12);
  EXPECT_FALSE(rep.agents[1].has_final);
}

TEST(Evaluate, UnknownSceneThrows) {
  sim::RolloutResult r;
  r.scene_id = 99;
  EXPECT_THROW(evaluate({}, {r}), Error);
}
