#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dsim/agent.hpp"
#include "dsim/core.hpp"
#include "dsim/rasterizer.hpp"

namespace dsim::sim {

enum class RolloutMode {
  Generative,         // every eligible agent acts from its own birdview
  ClassmatesForcing,  // only the ego acts; others replay ground truth
  BlankFuture,        // future birdviews are all background
  TeacherForced,      // future states and birdviews pinned to ground truth
};

std::string_view to_string(RolloutMode m);
RolloutMode parse_rollout_mode(std::string_view name);

/// Deterministic 64-bit stream seed from a key tuple.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                          std::uint64_t c = 0);

struct RolloutConfig {
  int k_samples = 1;
  RolloutMode mode = RolloutMode::Generative;
  std::size_t ego_index = 0;  // ClassmatesForcing only
  std::uint64_t seed = 0;
  bool noise_on_states = false;
  // false: skip the history and start from a random hidden state.
  bool warmup = true;
  int threads = 1;
  raster::BirdviewConfig birdview = raster::toy_config();
  ActionClamp clamp;

  void validate() const;
};

struct AgentPrediction {
  int agent_id = 0;
  std::size_t agent_index = 0;
  std::vector<AgentState> states;  // steps t_obs .. horizon-1
  std::vector<std::vector<double>> actions;
  std::vector<std::vector<double>> z;
};

struct SampleResult {
  std::vector<AgentPrediction> agents;
};

struct RolloutResult {
  int scene_id = 0;
  int t_obs = 0;
  int horizon = 0;
  std::vector<SampleResult> samples;
};

/// Per-agent recurrent state between steps.
struct AgentRuntime {
  std::vector<ad::Tensor> h;  // one per GRU layer, after observing the current step
  ad::Tensor feature;         // encoder output of the current birdview
  std::vector<double> z_prev;
  std::vector<double> a_prev;
  std::mt19937_64 rng;
};

/// Ground-truth action per transition, in the model's kinematic mode.
std::vector<std::vector<double>> ground_truth_actions(const SceneAgent& agent, KinematicMode mode);

/// Agents valid on every step 1..t_obs (those that get predicted).
std::vector<std::size_t> predicted_agents(const Scene& scene);

/// Observes steps 1..t_obs from ground truth, feeding prior samples and
/// ground-truth executed actions into the recurrent core.
std::vector<AgentRuntime> warmup(const Scene& scene, const agent::Model& model,
                                 std::span<const std::size_t> egos, const RolloutConfig& cfg,
                                 std::span<const std::uint64_t> stream_seeds);

/// One simultaneous step t -> t+1 for the acting agents. `states`/`valid`
/// hold the joint state at t for every scene agent and are replaced by
/// the state at t+1. Non-acting agents follow the log. The acting agents
/// then observe the new joint state (unless t+1 is the last step).
struct StepOutput {
  std::vector<std::vector<double>> actions;  // per acting agent
  std::vector<std::vector<double>> z;
  std::vector<AgentState> predicted;  // new state of each acting agent
};
StepOutput step_joint(const Scene& scene, int t, std::vector<AgentState>& states,
                      std::vector<bool>& valid, std::span<const std::size_t> acting,
                      std::vector<AgentRuntime>& runtimes, const agent::Model& model,
                      const RolloutConfig& cfg);

RolloutResult rollout(const Scene& scene, const agent::Model& model, const RolloutConfig& cfg);

std::vector<RolloutResult> rollout_all(const std::vector<Scene>& scenes, const agent::Model& model,
                                       const RolloutConfig& cfg);

struct TrainConfig {
  int epochs = 1;
  int batch_size = 8;
  double lr = 3e-4;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  // ClassmatesForcing (default), BlankFuture or TeacherForced.
  RolloutMode mode = RolloutMode::ClassmatesForcing;
  std::uint64_t seed = 0;
  int threads = 1;
  raster::BirdviewConfig birdview = raster::toy_config();
  // Backpropagate through the rendering of self-rolled-out birdviews.
  bool differentiable_birdview = true;

  void validate() const;
};

struct EpochStats {
  int epoch = 0;
  double elbo = 0.0;  // mean per-step ELBO term
  double recon = 0.0;
  double kl = 0.0;
  double grad_norm = 0.0;  // mean pre-clip gradient norm
};

struct ItemLoss {
  double elbo = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  std::vector<ad::Tensor> grads;  // d(-mean ELBO)/d(params), empty if not requested
};

/// Mean per-step ELBO for one ego in one scene and its gradient.
ItemLoss elbo_sequence(const Scene& scene, std::size_t ego, const agent::Model& model,
                       const TrainConfig& cfg, std::uint64_t noise_seed, bool with_grad);

struct AdamState {
  std::vector<ad::Tensor> m;
  std::vector<ad::Tensor> v;
  long step = 0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// Minimizes -ELBO over all (scene, ego) items with Adam and gradient-norm
/// clipping. Results are independent of the thread count.
std::vector<EpochStats> train(const std::vector<Scene>& scenes, agent::Model& model,
                              const TrainConfig& cfg, const EpochCallback& on_epoch = {});

}  // namespace dsim::sim
