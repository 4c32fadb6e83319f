#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dsim/autodiff.hpp"
#include "dsim/kinematics.hpp"

namespace dsim::agent {

struct AgentModelConfig {
  int hidden_dim = 64;
  int latent_dim = 2;
  int birdview_resolution = 64;
  // One entry per conv layer; each layer is kernel x kernel with stride kernel.
  std::vector<int> encoder_channels{8, 16};
  int encoder_kernel = 4;
  int feature_dim = 64;
  int head_hidden = 64;
  int gru_layers = 2;
  std::array<double, 4> obs_sigma{0.05, 0.05, 0.05, 0.05};
  KinematicMode kinematic_mode = KinematicMode::Bicycle;
  // Decoder outputs are multiplied by these; empty selects the mode default.
  std::vector<double> action_scale;

  void validate() const;
  int action_dim() const { return dsim::action_dim(kinematic_mode); }
  std::vector<double> scales() const;
  int encoder_output_size() const;
};

inline AgentModelConfig full_scale_config() {
  AgentModelConfig c;
  c.birdview_resolution = 256;
  c.encoder_channels = {8, 16, 16};
  return c;
}

std::vector<double> default_action_scale(KinematicMode mode);

/// Ordered named parameter tensors.
class Parameters {
 public:
  void add(std::string name, ad::Tensor value);
  std::size_t size() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  ad::Tensor& at(std::size_t i) { return tensors_.at(i); }
  const ad::Tensor& at(std::size_t i) const { return tensors_.at(i); }
  std::size_t index_of(const std::string& name) const;
  std::size_t total_size() const;
  /// FNV-1a over names, shapes and the raw bytes of every value.
  std::uint64_t checksum() const;

 private:
  std::vector<std::string> names_;
  std::vector<ad::Tensor> tensors_;
};

struct Model {
  AgentModelConfig config;
  Parameters params;
};

Model init_model(const AgentModelConfig& config, std::uint64_t seed);

/// Parameters bound to one tape. Leaves reference the model storage, so the
/// model must outlive the tape.
struct BoundModel {
  const AgentModelConfig* config = nullptr;
  std::vector<ad::Var> p;
  ad::Tape* tape = nullptr;
};

/// trainable=false binds constants (no gradients, cheaper backward).
BoundModel bind(ad::Tape& tape, const Model& model, bool trainable);

struct GaussianVar {
  ad::Var mean;
  ad::Var std;
};

/// Feature vector from a 3 x R x R birdview.
ad::Var encode_birdview(const BoundModel& m, ad::Var image);

/// Runs the stacked GRU; input is [feature, z, action / scale].
std::vector<ad::Var> recurrent_update(const BoundModel& m, const std::vector<ad::Var>& h,
                                      ad::Var feature, ad::Var z, ad::Var action);

GaussianVar posterior(const BoundModel& m, ad::Var a_gt, ad::Var feature, ad::Var h_top);

/// Action in physical units of the configured mode.
ad::Var decode_action(const BoundModel& m, ad::Var feature, ad::Var z, ad::Var h_top);

/// Sum_d 0.5 (mu^2 + sigma^2 - 1 - 2 ln sigma) against N(0, I).
ad::Var kl_gaussian(const GaussianVar& q);
double kl_gaussian(std::span<const double> mean, std::span<const double> std);

/// Sum over the 4 state dims of log N(gt; mean, sigma^2), heading residual wrapped.
ad::Var state_log_density(const StateVar& mean, const AgentState& gt,
                          const std::array<double, 4>& sigma);

/// Single GRU cell on explicit weights (for tests and small oracles).
/// wx: 3H x I, wh: 3H x H, bx, bh: 3H, gate order (reset, update, candidate).
ad::Var gru_cell(ad::Var h, ad::Var x, ad::Var wx, ad::Var wh, ad::Var bx, ad::Var bh);

/// Zero recurrent state.
std::vector<ad::Var> initial_hidden(const BoundModel& m);

struct ElboStepResult {
  ad::Var term;   // recon - kl
  ad::Var recon;
  ad::Var kl;
  std::vector<ad::Var> h;  // updated hidden state
  ad::Var z;
  ad::Var action;
  StateVar next_mean;
};

/// One ELBO step: observe b (GRU update with previous z and action), sample
/// z = mu + std * eps from the posterior, decode, apply the kinematic step
/// and score the ground-truth next state.
ElboStepResult elbo_step(const BoundModel& m, const AgentState& s_next_gt,
                         const StateVar& s_cur, ad::Var image,
                         const std::vector<ad::Var>& h_prev, ad::Var z_prev,
                         ad::Var a_prev, std::span<const double> a_gt,
                         std::span<const double> eps, double l_r, double dt);

/// Standard normal latent sample.
std::vector<double> prior_sample(std::mt19937_64& rng, int latent_dim);

/// JSON checkpoint with version, config and named tensors.
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);
std::string config_to_json(const AgentModelConfig& c);
AgentModelConfig config_from_json(const std::string& text);

}  // namespace dsim::agent
