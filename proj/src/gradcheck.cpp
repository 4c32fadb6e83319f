#include "dsim/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "dsim/agent.hpp"
#include "dsim/io.hpp"
#include "dsim/kinematics.hpp"
#include "dsim/rasterizer.hpp"
#include "dsim/simulation.hpp"

namespace dsim::gradcheck {

using ad::Tensor;
using ad::Var;

std::vector<std::string> suite_names() { return {"kinematics", "rasterizer", "elbo"}; }

namespace {

constexpr double kEps = 1e-5;
// Heading perturbations move far pixels by ~45x the step.
constexpr double kRasterEps = 1e-6;

double kinematics_point(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double l_r = 1.5 + 0.7 * u(rng);
  Tensor x = Tensor::vector({50 * u(rng), 50 * u(rng), kPi * u(rng), 10 + 10 * u(rng), 3 * u(rng),
                             0.5 * u(rng), 3 * u(rng), 0.5 * u(rng), 3 * u(rng), 0.5 * u(rng)});
  double w[5];
  for (double& v : w) v = u(rng);
  auto f = [&](ad::Tape&, Var p) {
    StateVar s{ad::index(p, 0), ad::index(p, 1), ad::index(p, 2), ad::index(p, 3)};
    for (int k = 0; k < 3; ++k) {
      s = bicycle_step(s, ad::index(p, 4 + 2 * k), ad::index(p, 5 + 2 * k), l_r, 0.1);
    }
    return w[0] * s.x + w[1] * s.y + w[2] * ad::sin(s.psi) + w[3] * ad::cos(s.psi) + w[4] * s.v;
  };
  return ad::grad_check(f, x, kEps);
}

double rasterizer_point(std::mt19937_64& rng, const MapData& map, int index) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const raster::BirdviewConfig cfg = raster::toy_config();
  const int n = 1 + static_cast<int>(rng() % 3);
  std::vector<raster::AgentView> agents;
  const AgentState ego = make_state(-20 + 25 * u(rng), 2 * u(rng), 0.3 * u(rng), 10);
  agents.push_back({1, {}, ego, true});
  for (int i = 1; i <= n; ++i) {
    AgentAttributes a;
    a.length = 4.5 + 0.5 * u(rng);
    agents.push_back({i + 1, a,
                      make_state(ego.x + 15 * u(rng), ego.y + 10 * u(rng), kPi * u(rng), 8), true});
  }
  Tensor weights({3, cfg.resolution_px, cfg.resolution_px});
  const double phase = u(rng);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    weights[i] = std::sin(0.013 * static_cast<double>(i) + phase);
  }
  const Tensor x = Tensor::vector(
      {ego.x, ego.y, ego.psi, agents[1].state.x, agents[1].state.y, agents[1].state.psi});
  auto f = [&](ad::Tape& t, Var p) {
    std::vector<StateVar> states;
    states.push_back({ad::index(p, 0), ad::index(p, 1), ad::index(p, 2), t.scalar(10)});
    states.push_back({ad::index(p, 3), ad::index(p, 4), ad::index(p, 5), t.scalar(8)});
    for (std::size_t i = 2; i < agents.size(); ++i) states.push_back(constant_state(t, agents[i].state));
    const Var img = raster::render_agents_soft(t, map, agents, states, 0, cfg);
    // Alternate a weighted pixel sum with the mean intensity.
    if (index % 2 == 0) return ad::sum(ad::mul(img, t.constant(weights)));
    return ad::mul(ad::mean(img), 1000.0);
  };
  return ad::grad_check(f, x, kRasterEps);
}

double elbo_point(std::mt19937_64& rng, std::uint64_t seed, int index) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  agent::AgentModelConfig cfg;
  const KinematicMode modes[] = {KinematicMode::Bicycle, KinematicMode::Unconstrained};
  cfg.kinematic_mode = modes[index % 2];
  cfg.action_scale = agent::default_action_scale(cfg.kinematic_mode);
  agent::Model m = agent::init_model(cfg, sim::stream_seed(seed, 99, static_cast<std::uint64_t>(index)));
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    for (auto& v : m.params.at(i).storage()) v += 0.1 * g(rng);
  }
  const int r = cfg.birdview_resolution;
  Tensor img({3, r, r});
  for (auto& v : img.storage()) v = 0.5 + 0.5 * u(rng);
  const AgentState s_cur = make_state(10 * u(rng), 10 * u(rng), kPi * u(rng), 8 + 3 * u(rng));
  const std::vector<double> a_gt = cfg.kinematic_mode == KinematicMode::Bicycle
                                       ? std::vector<double>{u(rng), 0.2 * u(rng)}
                                       : std::vector<double>{u(rng), u(rng), 0.1 * u(rng), 0.3 * u(rng)};
  const AgentState s_next = apply_action(cfg.kinematic_mode, s_cur, a_gt, 1.5, 0.1);
  const AgentState s_gt = make_state(s_next.x + 0.05 * g(rng), s_next.y + 0.05 * g(rng),
                                     s_next.psi + 0.02 * g(rng), s_next.v + 0.05 * g(rng));
  std::vector<double> eps(static_cast<std::size_t>(cfg.latent_dim));
  for (auto& e : eps) e = g(rng);
  std::vector<Tensor> h0;
  for (int l = 0; l < cfg.gru_layers; ++l) {
    Tensor h({cfg.hidden_dim});
    for (auto& v : h.storage()) v = 0.5 * u(rng);
    h0.push_back(h);
  }
  Tensor z_prev({cfg.latent_dim});
  for (auto& v : z_prev.storage()) v = g(rng);
  Tensor a_prev({cfg.action_dim()});
  for (auto& v : a_prev.storage()) v = 0.3 * u(rng);
  const Tensor s_vec = Tensor::vector({s_cur.x, s_cur.y, s_cur.psi, s_cur.v});

  // Slot -1: the current state, -2: the image, otherwise a parameter index.
  auto run = [&](ad::Tape& t, Var x, long slot) {
    agent::BoundModel b = agent::bind(t, m, false);
    if (slot >= 0) b.p[static_cast<std::size_t>(slot)] = x;
    StateVar s = constant_state(t, s_cur);
    if (slot == -1) s = {ad::index(x, 0), ad::index(x, 1), ad::index(x, 2), ad::index(x, 3)};
    const Var image = slot == -2 ? x : t.constant(img);
    std::vector<Var> h;
    for (const auto& v : h0) h.push_back(t.constant(v));
    return agent::elbo_step(b, s_gt, s, image, h, t.constant(z_prev), t.constant(a_prev), a_gt, eps,
                            1.5, 0.1)
        .term;
  };
  double worst = 0.0;
  auto check = [&](const Tensor& x, long slot) {
    std::vector<std::size_t> coords;
    for (int k = 0; k < 3; ++k) coords.push_back(rng() % x.size());
    std::sort(coords.begin(), coords.end());
    coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    worst = std::max(worst, ad::grad_check([&](ad::Tape& t, Var v) { return run(t, v, slot); }, x,
                                           kEps, coords));
  };
  check(s_vec, -1);
  check(img, -2);
  for (std::size_t i = 0; i < m.params.size(); ++i) check(m.params.at(i), static_cast<long>(i));
  return worst;
}

}  // namespace

SuiteResult run_suite(const std::string& name, int points, std::uint64_t seed) {
  if (points < 1) throw Error("gradcheck: points must be at least 1");
  SuiteResult res;
  res.suite = name;
  res.points = points;
  std::uint64_t key = 0;
  for (char c : name) key = key * 131 + static_cast<unsigned char>(c);
  std::mt19937_64 rng(sim::stream_seed(seed, key));
  if (name == "kinematics") {
    res.tolerance = 1e-6;
    for (int i = 0; i < points; ++i) res.max_error = std::max(res.max_error, kinematics_point(rng));
  } else if (name == "rasterizer") {
    res.tolerance = 1e-3;
    const MapData map = io::synth_dataset(io::SynthKind::Fork, 1, 0).map;
    for (int i = 0; i < points; ++i) {
      res.max_error = std::max(res.max_error, rasterizer_point(rng, map, i));
    }
  } else if (name == "elbo") {
    res.tolerance = 1e-3;
    for (int i = 0; i < points; ++i) res.max_error = std::max(res.max_error, elbo_point(rng, seed, i));
  } else {
    throw Error("unknown gradcheck suite '" + name + "' (expected kinematics, rasterizer or elbo)");
  }
  res.passed = res.max_error < res.tolerance;
  return res;
}

}  // namespace dsim::gradcheck
