#include "dsim/simulation.hpp"

#include <algorithm>
#include <cmath>

#include "dsim/fitting.hpp"
#include "dsim/parallel.hpp"

namespace dsim::sim {

using ad::Tensor;
using ad::Var;

std::string_view to_string(RolloutMode m) {
  switch (m) {
    case RolloutMode::Generative:
      return "generative";
    case RolloutMode::ClassmatesForcing:
      return "classmates-forcing";
    case RolloutMode::BlankFuture:
      return "blank-future";
    case RolloutMode::TeacherForced:
      return "teacher-forced";
  }
  throw Error("unknown rollout mode");
}

RolloutMode parse_rollout_mode(std::string_view name) {
  for (auto m : {RolloutMode::Generative, RolloutMode::ClassmatesForcing,
                 RolloutMode::BlankFuture, RolloutMode::TeacherForced}) {
    if (name == to_string(m)) return m;
  }
  throw Error("unknown rollout mode '" + std::string(name) +
              "' (expected generative, classmates-forcing, blank-future or teacher-forced)");
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  return splitmix64(h ^ c);
}

void RolloutConfig::validate() const {
  if (k_samples < 1) throw Error("rollout: k_samples must be at least 1");
  birdview.validate();
}

void TrainConfig::validate() const {
  if (epochs < 0) throw Error("train: epochs must be non-negative");
  if (batch_size < 1) throw Error("train: batch_size must be at least 1");
  if (!(lr >= 0.0)) throw Error("train: lr must be non-negative");
  if (!(clip_norm > 0.0)) throw Error("train: clip_norm must be positive");
  if (mode == RolloutMode::Generative) {
    throw Error("train: use classmates-forcing, blank-future or teacher-forced");
  }
  birdview.validate();
}

std::vector<std::vector<double>> ground_truth_actions(const SceneAgent& agent, KinematicMode mode) {
  const Trajectory& tr = agent.trajectory;
  const std::size_t n = tr.size();
  const std::size_t dim = static_cast<std::size_t>(action_dim(mode));
  std::vector<std::vector<double>> out(n > 0 ? n - 1 : 0, std::vector<double>(dim, 0.0));
  std::size_t t = 0;
  while (t < n) {
    if (!tr.is_valid(t)) {
      ++t;
      continue;
    }
    std::size_t end = t;
    while (end < n && tr.is_valid(end)) ++end;
    if (end - t >= 2) {
      if (mode == KinematicMode::Bicycle) {
        const std::span<const AgentState> seg(tr.states.data() + t, end - t);
        const auto rec = fitting::recover(seg, agent.attributes.rear_axis_offset, tr.dt);
        for (std::size_t k = 0; k < rec.actions.size(); ++k) {
          out[t + k] = {rec.actions[k].alpha, rec.actions[k].beta};
        }
      } else {
        for (std::size_t k = t; k + 1 < end; ++k) {
          out[k] = delta_action(mode, tr.states[k], tr.states[k + 1]);
        }
      }
    }
    t = end;
  }
  return out;
}

std::vector<std::size_t> predicted_agents(const Scene& scene) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < scene.agents.size(); ++i) {
    if (scene.agents[i].trajectory.valid_between(0, static_cast<std::size_t>(scene.t_obs))) {
      out.push_back(i);
    }
  }
  return out;
}

namespace {

std::vector<raster::AgentView> snapshot(const Scene& scene, std::span<const AgentState> states,
                                        const std::vector<bool>& valid) {
  std::vector<raster::AgentView> v;
  v.reserve(scene.agents.size());
  for (std::size_t i = 0; i < scene.agents.size(); ++i) {
    v.push_back({scene.agents[i].id, scene.agents[i].attributes, states[i], valid[i]});
  }
  return v;
}

void gt_at(const Scene& scene, int t, std::vector<AgentState>& states, std::vector<bool>& valid) {
  states.resize(scene.agents.size());
  valid.resize(scene.agents.size());
  for (std::size_t i = 0; i < scene.agents.size(); ++i) {
    const Trajectory& tr = scene.agents[i].trajectory;
    valid[i] = tr.is_valid(static_cast<std::size_t>(t));
    if (valid[i]) states[i] = tr.states[static_cast<std::size_t>(t)];
  }
}

raster::Birdview render_for(const Scene& scene, const std::vector<raster::AgentView>& views,
                            std::size_t ego, const raster::BirdviewConfig& cfg) {
  return raster::rasterize_soft(raster::build_primitives(scene.map, views, ego), cfg);
}

void observe(const agent::Model& model, AgentRuntime& rt, const raster::Birdview& image,
             bool update_hidden) {
  ad::Tape tape;
  const agent::BoundModel b = agent::bind(tape, model, false);
  const Var f = agent::encode_birdview(b, tape.constant_ref(&image));
  rt.feature = f.value();
  if (!update_hidden) return;
  std::vector<Var> h;
  h.reserve(rt.h.size());
  for (const auto& t : rt.h) h.push_back(tape.constant_ref(&t));
  const auto hn = agent::recurrent_update(b, h, f, tape.constant(Tensor::vector(rt.z_prev)),
                                          tape.constant(Tensor::vector(rt.a_prev)));
  for (std::size_t l = 0; l < hn.size(); ++l) rt.h[l] = hn[l].value();
}

std::vector<double> act(const agent::Model& model, const AgentRuntime& rt,
                        const std::vector<double>& z) {
  ad::Tape tape;
  const agent::BoundModel b = agent::bind(tape, model, false);
  const Var a = agent::decode_action(b, tape.constant_ref(&rt.feature),
                                     tape.constant(Tensor::vector(z)), tape.constant_ref(&rt.h.back()));
  return {a.value().data().begin(), a.value().data().end()};
}

AgentRuntime fresh_runtime(const agent::Model& model, std::uint64_t seed) {
  const auto& c = model.config;
  AgentRuntime rt;
  rt.h.assign(static_cast<std::size_t>(c.gru_layers), Tensor({c.hidden_dim}));
  rt.z_prev.assign(static_cast<std::size_t>(c.latent_dim), 0.0);
  rt.a_prev.assign(static_cast<std::size_t>(c.action_dim()), 0.0);
  rt.rng.seed(seed);
  return rt;
}

}  // namespace

std::vector<AgentRuntime> warmup(const Scene& scene, const agent::Model& model,
                                 std::span<const std::size_t> egos, const RolloutConfig& cfg,
                                 std::span<const std::uint64_t> stream_seeds) {
  validate(scene);
  cfg.validate();
  if (stream_seeds.size() != egos.size()) throw Error("warmup: one stream seed per agent");
  if (cfg.birdview.resolution_px != model.config.birdview_resolution) {
    throw Error("warmup: birdview resolution does not match the model");
  }
  const KinematicMode mode = model.config.kinematic_mode;
  std::vector<AgentRuntime> rts;
  rts.reserve(egos.size());
  std::vector<std::vector<std::vector<double>>> a_gt;
  for (std::size_t k = 0; k < egos.size(); ++k) {
    const SceneAgent& a = scene.agents.at(egos[k]);
    if (!a.trajectory.valid_between(0, static_cast<std::size_t>(scene.t_obs))) {
      throw Error("warmup: agent " + std::to_string(a.id) + " lacks ground truth in 1..t_obs");
    }
    rts.push_back(fresh_runtime(model, stream_seeds[k]));
    a_gt.push_back(ground_truth_actions(a, mode));
  }
  std::vector<AgentState> states;
  std::vector<bool> valid;
  if (!cfg.warmup) {
    gt_at(scene, scene.t_obs - 1, states, valid);
    const auto views = snapshot(scene, states, valid);
    for (std::size_t k = 0; k < egos.size(); ++k) {
      std::normal_distribution<double> n(0.0, 0.5);
      for (auto& h : rts[k].h) {
        for (auto& v : h.data()) v = std::tanh(n(rts[k].rng));
      }
      observe(model, rts[k], render_for(scene, views, egos[k], cfg.birdview), false);
    }
    return rts;
  }
  for (int t = 0; t < scene.t_obs; ++t) {
    gt_at(scene, t, states, valid);
    const auto views = snapshot(scene, states, valid);
    for (std::size_t k = 0; k < egos.size(); ++k) {
      AgentRuntime& rt = rts[k];
      observe(model, rt, render_for(scene, views, egos[k], cfg.birdview), true);
      if (t + 1 < scene.t_obs) {
        rt.z_prev = agent::prior_sample(rt.rng, model.config.latent_dim);
        rt.a_prev = a_gt[k][static_cast<std::size_t>(t)];
      }
    }
  }
  return rts;
}

StepOutput step_joint(const Scene& scene, int t, std::vector<AgentState>& states,
                      std::vector<bool>& valid, std::span<const std::size_t> acting,
                      std::vector<AgentRuntime>& runtimes, const agent::Model& model,
                      const RolloutConfig& cfg) {
  if (acting.size() != runtimes.size()) throw Error("step_joint: one runtime per acting agent");
  if (t < 0 || t + 1 >= scene.horizon) throw Error("step_joint: step out of range");
  const auto& mc = model.config;
  const double dt = scene.dt;
  StepOutput out;
  std::vector<AgentState> next(acting.size());
  // Every acting agent decides from the same frozen snapshot.
  for (std::size_t k = 0; k < acting.size(); ++k) {
    const std::size_t i = acting[k];
    if (!valid[i]) throw Error("step_joint: acting agent is not valid");
    AgentRuntime& rt = runtimes[k];
    std::vector<double> z = agent::prior_sample(rt.rng, mc.latent_dim);
    std::vector<double> a = act(model, rt, z);
    if (mc.kinematic_mode == KinematicMode::Bicycle) {
      a[0] = std::clamp(a[0], -cfg.clamp.max_abs_alpha, cfg.clamp.max_abs_alpha);
      a[1] = std::clamp(a[1], -cfg.clamp.max_abs_beta, cfg.clamp.max_abs_beta);
    }
    AgentState base = states[i];
    if (cfg.mode == RolloutMode::TeacherForced) {
      base = scene.agents[i].trajectory.states[static_cast<std::size_t>(t)];
    }
    AgentState s = apply_action(mc.kinematic_mode, base, a,
                                scene.agents[i].attributes.rear_axis_offset, dt);
    if (cfg.noise_on_states) {
      std::normal_distribution<double> n(0.0, 1.0);
      s.x += mc.obs_sigma[0] * n(rt.rng);
      s.y += mc.obs_sigma[1] * n(rt.rng);
      s.psi = wrap_angle(s.psi + mc.obs_sigma[2] * n(rt.rng));
      s.v += mc.obs_sigma[3] * n(rt.rng);
    }
    next[k] = s;
    out.actions.push_back(std::move(a));
    out.z.push_back(std::move(z));
  }
  // Everyone else follows the log.
  std::vector<AgentState> gt_next;
  std::vector<bool> gt_valid;
  gt_at(scene, t + 1, gt_next, gt_valid);
  for (std::size_t i = 0; i < scene.agents.size(); ++i) {
    states[i] = gt_next[i];
    valid[i] = gt_valid[i];
  }
  std::vector<AgentState> observed = states;
  std::vector<bool> observed_valid = valid;
  for (std::size_t k = 0; k < acting.size(); ++k) {
    observed[acting[k]] = next[k];
    observed_valid[acting[k]] = true;
    if (cfg.mode != RolloutMode::TeacherForced) {
      states[acting[k]] = next[k];
      valid[acting[k]] = true;
    }
  }
  if (t + 2 < scene.horizon) {
    const auto views = cfg.mode == RolloutMode::TeacherForced ? snapshot(scene, gt_next, gt_valid)
                                                              : snapshot(scene, observed, observed_valid);
    for (std::size_t k = 0; k < acting.size(); ++k) {
      AgentRuntime& rt = runtimes[k];
      rt.z_prev = out.z[k];
      if (cfg.mode == RolloutMode::TeacherForced) {
        const auto a_gt = ground_truth_actions(scene.agents[acting[k]], mc.kinematic_mode);
        rt.a_prev = a_gt[static_cast<std::size_t>(t)];
        if (!gt_valid[acting[k]]) throw Error("step_joint: teacher forcing needs ground truth");
      } else {
        rt.a_prev = out.actions[k];
      }
      const raster::Birdview img = cfg.mode == RolloutMode::BlankFuture
                                       ? raster::blank_birdview(cfg.birdview)
                                       : render_for(scene, views, acting[k], cfg.birdview);
      observe(model, rt, img, true);
    }
  }
  out.predicted = std::move(next);
  return out;
}

RolloutResult rollout(const Scene& scene, const agent::Model& model, const RolloutConfig& cfg) {
  validate(scene);
  cfg.validate();
  std::vector<std::size_t> acting;
  if (cfg.mode == RolloutMode::ClassmatesForcing) {
    if (cfg.ego_index >= scene.agents.size()) throw Error("rollout: ego_index out of range");
    if (!scene.agents[cfg.ego_index].trajectory.valid_between(0, static_cast<std::size_t>(scene.t_obs))) {
      throw Error("rollout: ego lacks ground truth in 1..t_obs");
    }
    acting = {cfg.ego_index};
  } else {
    acting = predicted_agents(scene);
  }
  RolloutResult res;
  res.scene_id = scene.id;
  res.t_obs = scene.t_obs;
  res.horizon = scene.horizon;
  res.samples.resize(static_cast<std::size_t>(cfg.k_samples));
  parallel_for(res.samples.size(), cfg.threads, [&](std::size_t k) {
    std::vector<std::uint64_t> seeds;
    for (std::size_t i : acting) {
      seeds.push_back(stream_seed(cfg.seed, k, static_cast<std::uint64_t>(scene.id),
                                  static_cast<std::uint64_t>(scene.agents[i].id)));
    }
    std::vector<AgentRuntime> rts = warmup(scene, model, acting, cfg, seeds);
    SampleResult& sample = res.samples[k];
    for (std::size_t i : acting) {
      AgentPrediction p;
      p.agent_id = scene.agents[i].id;
      p.agent_index = i;
      sample.agents.push_back(std::move(p));
    }
    std::vector<AgentState> states;
    std::vector<bool> valid;
    gt_at(scene, scene.t_obs - 1, states, valid);
    for (int t = scene.t_obs - 1; t + 1 < scene.horizon; ++t) {
      StepOutput step = step_joint(scene, t, states, valid, acting, rts, model, cfg);
      for (std::size_t j = 0; j < acting.size(); ++j) {
        sample.agents[j].states.push_back(step.predicted[j]);
        sample.agents[j].actions.push_back(std::move(step.actions[j]));
        sample.agents[j].z.push_back(std::move(step.z[j]));
      }
    }
  });
  return res;
}

std::vector<RolloutResult> rollout_all(const std::vector<Scene>& scenes, const agent::Model& model,
                                       const RolloutConfig& cfg) {
  std::vector<RolloutResult> out(scenes.size());
  RolloutConfig inner = cfg;
  inner.threads = 1;
  parallel_for(scenes.size(), cfg.threads,
               [&](std::size_t i) { out[i] = rollout(scenes[i], model, inner); });
  return out;
}

// ---------------------------------------------------------------------------
// Training

ItemLoss elbo_sequence(const Scene& scene, std::size_t ego, const agent::Model& model,
                       const TrainConfig& cfg, std::uint64_t noise_seed, bool with_grad) {
  const SceneAgent& me = scene.agents.at(ego);
  if (!me.trajectory.fully_valid()) {
    throw Error("train: ego agent " + std::to_string(me.id) + " is not valid on every step");
  }
  const auto& mc = model.config;
  const auto a_gt = ground_truth_actions(me, mc.kinematic_mode);
  const double l_r = me.attributes.rear_axis_offset;
  const int T = scene.horizon;
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  ad::Tape tape;
  const agent::BoundModel b = agent::bind(tape, model, with_grad);
  std::vector<Var> h = agent::initial_hidden(b);
  Var z_prev = tape.constant(Tensor({mc.latent_dim}));
  Var a_prev = tape.constant(Tensor({mc.action_dim()}));
  StateVar s_pred;
  Var total = tape.constant(Tensor::scalar(0.0));
  double recon = 0.0, kl = 0.0;
  std::vector<AgentState> states;
  std::vector<bool> valid;
  const raster::Birdview blank = raster::blank_birdview(cfg.birdview);
  for (int t = 0; t + 1 < T; ++t) {
    const auto ut = static_cast<std::size_t>(t);
    const bool on_log = t < scene.t_obs || cfg.mode == RolloutMode::TeacherForced;
    const StateVar s_cur = on_log ? constant_state(tape, me.trajectory.states[ut]) : s_pred;
    Var image;
    if (cfg.mode == RolloutMode::BlankFuture && t >= scene.t_obs) {
      image = tape.constant_ref(&blank);
    } else {
      gt_at(scene, t, states, valid);
      const AgentState own = value_of(s_cur);
      states[ego] = own;
      auto views = snapshot(scene, states, valid);
      if (!on_log && cfg.differentiable_birdview && with_grad) {
        std::vector<StateVar> svars;
        svars.reserve(views.size());
        for (std::size_t i = 0; i < views.size(); ++i) {
          svars.push_back(i == ego ? s_cur : constant_state(tape, states[i]));
        }
        image = raster::render_agents_soft(tape, scene.map, views, svars, ego, cfg.birdview);
      } else {
        image = tape.constant(render_for(scene, views, ego, cfg.birdview));
      }
    }
    std::vector<double> eps(static_cast<std::size_t>(mc.latent_dim));
    for (auto& e : eps) e = normal(rng);
    agent::ElboStepResult r = agent::elbo_step(b, me.trajectory.states[ut + 1], s_cur, image, h,
                                               z_prev, a_prev, a_gt[ut], eps, l_r, scene.dt);
    total = total + r.term;
    recon += r.recon.value()[0];
    kl += r.kl.value()[0];
    h = std::move(r.h);
    z_prev = r.z;
    if (cfg.mode == RolloutMode::TeacherForced || t + 1 < scene.t_obs) {
      a_prev = tape.constant(Tensor::vector(a_gt[ut]));
    } else {
      a_prev = r.action;
    }
    s_pred = r.next_mean;
  }
  const double steps = static_cast<double>(T - 1);
  ItemLoss out;
  out.elbo = total.value()[0] / steps;
  out.recon = recon / steps;
  out.kl = kl / steps;
  if (!std::isfinite(out.elbo)) throw RuntimeError("training diverged: non-finite ELBO");
  if (with_grad) {
    const Var loss = total * (-1.0 / steps);
    const ad::Gradients g = tape.backward(loss);
    out.grads.reserve(b.p.size());
    for (const Var& p : b.p) out.grads.push_back(g[p]);
  }
  return out;
}

std::vector<EpochStats> train(const std::vector<Scene>& scenes, agent::Model& model,
                              const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (cfg.birdview.resolution_px != model.config.birdview_resolution) {
    throw Error("train: birdview resolution does not match the model");
  }
  std::vector<std::pair<std::size_t, std::size_t>> items;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    validate(scenes[s]);
    for (std::size_t i : fully_valid_agents(scenes[s])) items.emplace_back(s, i);
  }
  if (items.empty()) throw Error("train: no agent is valid on every step of any scene");
  const std::size_t np = model.params.size();
  AdamState adam;
  for (std::size_t i = 0; i < np; ++i) {
    adam.m.emplace_back(model.params.at(i).shape());
    adam.v.emplace_back(model.params.at(i).shape());
  }
  std::vector<EpochStats> history;
  std::vector<std::size_t> order(items.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 shuffle_rng(stream_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(shuffle_rng)]);
    }
    EpochStats st;
    st.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<ItemLoss> losses(end - start);
      parallel_for(losses.size(), cfg.threads, [&](std::size_t j) {
        const std::size_t item = order[start + j];
        try {
          losses[j] = elbo_sequence(scenes[items[item].first], items[item].second, model, cfg,
                                    stream_seed(cfg.seed, static_cast<std::uint64_t>(epoch), item, 1),
                                    true);
        } catch (const RuntimeError&) {
          throw;
        } catch (const Error& e) {
          throw RuntimeError("training diverged in epoch " + std::to_string(epoch) + " (scene " +
                             std::to_string(scenes[items[item].first].id) + "): " + e.what());
        }
      });
      std::vector<Tensor> grad;
      for (std::size_t i = 0; i < np; ++i) grad.emplace_back(model.params.at(i).shape());
      for (const ItemLoss& l : losses) {
        st.elbo += l.elbo;
        st.recon += l.recon;
        st.kl += l.kl;
        for (std::size_t i = 0; i < np; ++i) {
          auto& gd = grad[i].storage();
          const auto& src = l.grads[i].storage();
          for (std::size_t k = 0; k < gd.size(); ++k) gd[k] += src[k];
        }
      }
      const double inv = 1.0 / static_cast<double>(losses.size());
      double sq = 0.0;
      for (auto& g : grad) {
        for (auto& v : g.storage()) {
          v *= inv;
          sq += v * v;
        }
      }
      const double norm = std::sqrt(sq);
      if (!std::isfinite(norm)) throw RuntimeError("training diverged: non-finite gradient");
      st.grad_norm += norm;
      const double scale = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
      ++adam.step;
      const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam.step));
      const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam.step));
      for (std::size_t i = 0; i < np; ++i) {
        auto& p = model.params.at(i).storage();
        auto& m = adam.m[i].storage();
        auto& v = adam.v[i].storage();
        const auto& g = grad[i].storage();
        for (std::size_t k = 0; k < p.size(); ++k) {
          const double gk = g[k] * scale;
          m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
          v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
          p[k] -= cfg.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg.adam_eps);
        }
      }
      ++batches;
    }
    const double n = static_cast<double>(items.size());
    st.elbo /= n;
    st.recon /= n;
    st.kl /= n;
    st.grad_norm /= static_cast<double>(batches);
    history.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  return history;
}

}  // namespace dsim::sim
