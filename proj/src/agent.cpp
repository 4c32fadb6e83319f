#include "dsim/agent.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace dsim::agent {

using ad::Tensor;
using ad::Var;
using json = nlohmann::json;

void AgentModelConfig::validate() const {
  if (hidden_dim <= 0 || latent_dim <= 0 || feature_dim <= 0 || head_hidden <= 0 ||
      gru_layers <= 0) {
    throw Error("model config: dimensions must be positive");
  }
  if (birdview_resolution <= 0) throw Error("model config: birdview_resolution must be positive");
  if (encoder_channels.empty()) throw Error("model config: encoder needs at least one layer");
  for (int c : encoder_channels) {
    if (c <= 0) throw Error("model config: encoder channels must be positive");
  }
  if (encoder_kernel <= 0) throw Error("model config: encoder_kernel must be positive");
  int r = birdview_resolution;
  for (std::size_t i = 0; i < encoder_channels.size(); ++i) {
    if (r % encoder_kernel != 0) {
      throw Error("model config: birdview resolution not divisible by the encoder strides");
    }
    r /= encoder_kernel;
  }
  for (double s : obs_sigma) {
    if (!(s > 0.0)) throw Error("model config: obs_sigma must be positive");
  }
  if (!action_scale.empty()) {
    if (static_cast<int>(action_scale.size()) != action_dim()) {
      throw Error("model config: action_scale size does not match the kinematic mode");
    }
    for (double s : action_scale) {
      if (!(s > 0.0)) throw Error("model config: action_scale must be positive");
    }
  }
}

std::vector<double> default_action_scale(KinematicMode mode) {
  switch (mode) {
    case KinematicMode::Bicycle:
      return {2.0, 0.3};
    case KinematicMode::Unconstrained:
    case KinematicMode::OrientedUnconstrained:
      return {1.5, 1.5, 0.1, 0.3};
    case KinematicMode::Displacement:
    case KinematicMode::OrientedDisplacement:
      return {1.5, 1.5};
  }
  throw Error("unknown kinematic mode");
}

std::vector<double> AgentModelConfig::scales() const {
  return action_scale.empty() ? default_action_scale(kinematic_mode) : action_scale;
}

int AgentModelConfig::encoder_output_size() const {
  int r = birdview_resolution;
  for (std::size_t i = 0; i < encoder_channels.size(); ++i) r /= encoder_kernel;
  return encoder_channels.back() * r * r;
}

void Parameters::add(std::string name, Tensor value) {
  for (const auto& n : names_) {
    if (n == name) throw Error("parameters: duplicate name '" + name + "'");
  }
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(value));
}

std::size_t Parameters::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  throw Error("parameters: no tensor named '" + name + "'");
}

std::size_t Parameters::total_size() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

std::uint64_t Parameters::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&](const void* data, std::size_t len) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    feed(names_[i].data(), names_[i].size());
    for (int d : tensors_[i].shape()) feed(&d, sizeof d);
    feed(tensors_[i].data().data(), tensors_[i].size() * sizeof(double));
  }
  return h;
}

namespace {

/// Parameter indices in the fixed creation order.
struct Layout {
  int n_conv;
  int n_gru;
  int conv_w(int i) const { return 2 * i; }
  int conv_b(int i) const { return 2 * i + 1; }
  int fc_w() const { return 2 * n_conv; }
  int fc_b() const { return 2 * n_conv + 1; }
  int gru(int l, int k) const { return 2 * n_conv + 2 + 4 * l + k; }  // wx, wh, bx, bh
  int post(int k) const { return 2 * n_conv + 2 + 4 * n_gru + k; }    // fc.w fc.b out.w out.b
  int dec(int k) const { return 2 * n_conv + 2 + 4 * n_gru + 4 + k; }
};

Layout layout_of(const AgentModelConfig& c) {
  return {static_cast<int>(c.encoder_channels.size()), c.gru_layers};
}

Tensor glorot(ad::Shape shape, int fan_in, int fan_out, double gain, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  const double limit = gain * std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

int gru_input_dim(const AgentModelConfig& c, int layer) {
  return layer == 0 ? c.feature_dim + c.latent_dim + c.action_dim() : c.hidden_dim;
}

}  // namespace

Model init_model(const AgentModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config = config;
  std::mt19937_64 rng(seed);
  const int k = config.encoder_kernel;
  int in_c = 3;
  for (std::size_t i = 0; i < config.encoder_channels.size(); ++i) {
    const int out_c = config.encoder_channels[i];
    const std::string p = "enc.conv" + std::to_string(i);
    m.params.add(p + ".w", glorot({out_c, in_c, k, k}, in_c * k * k, out_c * k * k, 1.0, rng));
    m.params.add(p + ".b", Tensor({out_c}));
    in_c = out_c;
  }
  const int flat = config.encoder_output_size();
  m.params.add("enc.fc.w", glorot({config.feature_dim, flat}, flat, config.feature_dim, 1.0, rng));
  m.params.add("enc.fc.b", Tensor({config.feature_dim}));
  const int hd = config.hidden_dim;
  for (int l = 0; l < config.gru_layers; ++l) {
    const std::string p = "gru" + std::to_string(l);
    const int in = gru_input_dim(config, l);
    m.params.add(p + ".wx", glorot({3 * hd, in}, in, hd, 1.0, rng));
    m.params.add(p + ".wh", glorot({3 * hd, hd}, hd, hd, 1.0, rng));
    m.params.add(p + ".bx", Tensor({3 * hd}));
    m.params.add(p + ".bh", Tensor({3 * hd}));
  }
  const int a = config.action_dim();
  const int zd = config.latent_dim;
  const int hh = config.head_hidden;
  const int post_in = a + config.feature_dim + hd;
  m.params.add("post.fc.w", glorot({hh, post_in}, post_in, hh, 1.0, rng));
  m.params.add("post.fc.b", Tensor({hh}));
  // Zero output layer: the untrained posterior equals the prior.
  m.params.add("post.out.w", Tensor({2 * zd, hh}));
  m.params.add("post.out.b", Tensor({2 * zd}));
  const int dec_in = config.feature_dim + zd + hd;
  m.params.add("dec.fc.w", glorot({hh, dec_in}, dec_in, hh, 1.0, rng));
  m.params.add("dec.fc.b", Tensor({hh}));
  m.params.add("dec.out.w", glorot({a, hh}, hh, a, 0.1, rng));
  m.params.add("dec.out.b", Tensor({a}));
  return m;
}

BoundModel bind(ad::Tape& tape, const Model& model, bool trainable) {
  BoundModel b;
  b.config = &model.config;
  b.tape = &tape;
  b.p.reserve(model.params.size());
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const Tensor* t = &model.params.at(i);
    b.p.push_back(trainable ? tape.leaf_ref(t) : tape.constant_ref(t));
  }
  return b;
}

Var encode_birdview(const BoundModel& m, Var image) {
  const AgentModelConfig& c = *m.config;
  const int r = c.birdview_resolution;
  if (image.shape() != ad::Shape{3, r, r}) {
    throw Error("encode_birdview: expected 3 x " + std::to_string(r) + " x " +
                std::to_string(r) + " image, got " + ad::shape_str(image.shape()));
  }
  const Layout L = layout_of(c);
  Var x = ad::add(ad::mul(image, 2.0), -1.0);
  for (int i = 0; i < L.n_conv; ++i) {
    x = ad::tanh(ad::conv2d(x, m.p[L.conv_w(i)], m.p[L.conv_b(i)], c.encoder_kernel, 0));
  }
  x = ad::reshape(x, {static_cast<int>(x.size())});
  return ad::tanh(ad::linear(m.p[L.fc_w()], x, m.p[L.fc_b()]));
}

Var gru_cell(Var h, Var x, Var wx, Var wh, Var bx, Var bh) {
  const std::size_t hd = h.size();
  const Var gx = ad::linear(wx, x, bx);
  const Var gh = ad::linear(wh, h, bh);
  const Var r = ad::sigmoid(ad::add(ad::slice(gx, 0, hd), ad::slice(gh, 0, hd)));
  const Var u = ad::sigmoid(ad::add(ad::slice(gx, hd, hd), ad::slice(gh, hd, hd)));
  const Var n = ad::tanh(ad::add(ad::slice(gx, 2 * hd, hd), ad::mul(r, ad::slice(gh, 2 * hd, hd))));
  return ad::add(h, ad::mul(u, ad::sub(n, h)));
}

std::vector<Var> initial_hidden(const BoundModel& m) {
  std::vector<Var> h;
  for (int l = 0; l < m.config->gru_layers; ++l) {
    h.push_back(m.tape->constant(Tensor({m.config->hidden_dim})));
  }
  return h;
}

namespace {

Var scale_tensor(const BoundModel& m, bool inverse) {
  std::vector<double> s = m.config->scales();
  if (inverse) for (auto& v : s) v = 1.0 / v;
  return m.tape->constant(Tensor::vector(std::move(s)));
}

}  // namespace

std::vector<Var> recurrent_update(const BoundModel& m, const std::vector<Var>& h, Var feature,
                                  Var z, Var action) {
  const AgentModelConfig& c = *m.config;
  if (static_cast<int>(h.size()) != c.gru_layers) throw Error("recurrent_update: wrong layer count");
  const Layout L = layout_of(c);
  Var x = ad::concat({feature, z, ad::mul(action, scale_tensor(m, true))});
  std::vector<Var> out;
  out.reserve(h.size());
  for (int l = 0; l < c.gru_layers; ++l) {
    x = gru_cell(h[static_cast<std::size_t>(l)], x, m.p[L.gru(l, 0)], m.p[L.gru(l, 1)],
                 m.p[L.gru(l, 2)], m.p[L.gru(l, 3)]);
    out.push_back(x);
  }
  return out;
}

GaussianVar posterior(const BoundModel& m, Var a_gt, Var feature, Var h_top) {
  const AgentModelConfig& c = *m.config;
  const Layout L = layout_of(c);
  const Var in = ad::concat({ad::mul(a_gt, scale_tensor(m, true)), feature, h_top});
  const Var hid = ad::tanh(ad::linear(m.p[L.post(0)], in, m.p[L.post(1)]));
  const Var out = ad::linear(m.p[L.post(2)], hid, m.p[L.post(3)]);
  const std::size_t zd = static_cast<std::size_t>(c.latent_dim);
  GaussianVar q;
  q.mean = ad::slice(out, 0, zd);
  // Bounded log-std keeps exp finite; raw 0 gives std 1.
  q.std = ad::exp(ad::mul(ad::tanh(ad::mul(ad::slice(out, zd, zd), 0.2)), 5.0));
  return q;
}

Var decode_action(const BoundModel& m, Var feature, Var z, Var h_top) {
  const AgentModelConfig& c = *m.config;
  if (static_cast<int>(z.size()) != c.latent_dim) throw Error("decode_action: z has wrong size");
  const Layout L = layout_of(c);
  const Var in = ad::concat({feature, z, h_top});
  const Var hid = ad::tanh(ad::linear(m.p[L.dec(0)], in, m.p[L.dec(1)]));
  return ad::mul(ad::linear(m.p[L.dec(2)], hid, m.p[L.dec(3)]), scale_tensor(m, false));
}

Var kl_gaussian(const GaussianVar& q) {
  for (double s : q.std.value().data()) {
    if (!(s > 0.0)) throw Error("kl_gaussian: std must be positive");
  }
  const Var t = ad::sub(ad::add(ad::square(q.mean), ad::square(q.std)),
                        ad::add(ad::mul(ad::log(q.std), 2.0), 1.0));
  return ad::mul(ad::sum(t), 0.5);
}

double kl_gaussian(std::span<const double> mean, std::span<const double> std) {
  if (mean.size() != std.size()) throw Error("kl_gaussian: size mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < mean.size(); ++i) {
    if (!(std[i] > 0.0)) throw Error("kl_gaussian: std must be positive");
    kl += 0.5 * (mean[i] * mean[i] + std[i] * std[i] - 1.0 - 2.0 * std::log(std[i]));
  }
  return kl;
}

Var state_log_density(const StateVar& mean, const AgentState& gt,
                      const std::array<double, 4>& sigma) {
  const Var rx = ad::add(mean.x, -gt.x);
  const Var ry = ad::add(mean.y, -gt.y);
  const Var rpsi = ad::wrap_angle(ad::add(mean.psi, -gt.psi));
  const Var rv = ad::add(mean.v, -gt.v);
  double norm_const = 0.0;
  for (double s : sigma) norm_const += -0.5 * std::log(2.0 * kPi * s * s);
  const Var quad = ad::add(
      ad::add(ad::mul(ad::square(rx), 1.0 / (sigma[0] * sigma[0])),
              ad::mul(ad::square(ry), 1.0 / (sigma[1] * sigma[1]))),
      ad::add(ad::mul(ad::square(rpsi), 1.0 / (sigma[2] * sigma[2])),
              ad::mul(ad::square(rv), 1.0 / (sigma[3] * sigma[3]))));
  return ad::add(ad::mul(quad, -0.5), norm_const);
}

ElboStepResult elbo_step(const BoundModel& m, const AgentState& s_next_gt, const StateVar& s_cur,
                         Var image, const std::vector<Var>& h_prev, Var z_prev, Var a_prev,
                         std::span<const double> a_gt, std::span<const double> eps, double l_r,
                         double dt) {
  const AgentModelConfig& c = *m.config;
  if (static_cast<int>(a_gt.size()) != c.action_dim()) throw Error("elbo_step: a_gt has wrong size");
  if (static_cast<int>(eps.size()) != c.latent_dim) throw Error("elbo_step: eps has wrong size");
  ElboStepResult r;
  const Var feat = encode_birdview(m, image);
  r.h = recurrent_update(m, h_prev, feat, z_prev, a_prev);
  const Var h_top = r.h.back();
  const GaussianVar q =
      posterior(m, m.tape->constant(Tensor::vector({a_gt.begin(), a_gt.end()})), feat, h_top);
  r.z = ad::add(q.mean, ad::mul(q.std, m.tape->constant(Tensor::vector({eps.begin(), eps.end()}))));
  r.action = decode_action(m, feat, r.z, h_top);
  r.next_mean = apply_action(c.kinematic_mode, s_cur, r.action, l_r, dt);
  r.recon = state_log_density(r.next_mean, s_next_gt, c.obs_sigma);
  r.kl = kl_gaussian(q);
  r.term = ad::sub(r.recon, r.kl);
  return r;
}

std::vector<double> prior_sample(std::mt19937_64& rng, int latent_dim) {
  if (latent_dim <= 0) throw Error("prior_sample: latent_dim must be positive");
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> z(static_cast<std::size_t>(latent_dim));
  for (auto& v : z) v = n(rng);
  return z;
}

namespace {

json config_json(const AgentModelConfig& c) {
  return json{{"hidden_dim", c.hidden_dim},
              {"latent_dim", c.latent_dim},
              {"birdview_resolution", c.birdview_resolution},
              {"encoder_channels", c.encoder_channels},
              {"encoder_kernel", c.encoder_kernel},
              {"feature_dim", c.feature_dim},
              {"head_hidden", c.head_hidden},
              {"gru_layers", c.gru_layers},
              {"obs_sigma", c.obs_sigma},
              {"kinematic_mode", std::string(to_string(c.kinematic_mode))},
              {"action_scale", c.action_scale}};
}

AgentModelConfig config_parse(const json& j) {
  AgentModelConfig c;
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.latent_dim = j.at("latent_dim").get<int>();
  c.birdview_resolution = j.at("birdview_resolution").get<int>();
  c.encoder_channels = j.at("encoder_channels").get<std::vector<int>>();
  c.encoder_kernel = j.at("encoder_kernel").get<int>();
  c.feature_dim = j.at("feature_dim").get<int>();
  c.head_hidden = j.at("head_hidden").get<int>();
  c.gru_layers = j.at("gru_layers").get<int>();
  c.obs_sigma = j.at("obs_sigma").get<std::array<double, 4>>();
  c.kinematic_mode = parse_kinematic_mode(j.at("kinematic_mode").get<std::string>());
  c.action_scale = j.at("action_scale").get<std::vector<double>>();
  c.validate();
  return c;
}

constexpr int kCheckpointVersion = 1;

}  // namespace

std::string config_to_json(const AgentModelConfig& c) { return config_json(c).dump(2); }

AgentModelConfig config_from_json(const std::string& text) {
  try {
    return config_parse(json::parse(text));
  } catch (const json::exception& e) {
    throw Error(std::string("model config: ") + e.what());
  }
}

void save_checkpoint(const Model& model, const std::string& path) {
  json tensors = json::array();
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const Tensor& t = model.params.at(i);
    tensors.push_back({{"name", model.params.name(i)},
                       {"shape", t.shape()},
                       {"data", std::vector<double>(t.data().begin(), t.data().end())}});
  }
  const json j{{"format", "dsim-checkpoint"},
               {"version", kCheckpointVersion},
               {"config", config_json(model.config)},
               {"tensors", tensors}};
  std::ofstream out(path);
  if (!out) throw RuntimeError("checkpoint: cannot open '" + path + "' for writing");
  out << j.dump() << '\n';
  if (!out) throw RuntimeError("checkpoint: write to '" + path + "' failed");
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("checkpoint: cannot open '" + path + "'");
  try {
    const json j = json::parse(in);
    if (j.at("format").get<std::string>() != "dsim-checkpoint") {
      throw Error("checkpoint: '" + path + "' is not a dsim checkpoint");
    }
    if (j.at("version").get<int>() != kCheckpointVersion) {
      throw Error("checkpoint: unsupported version " + std::to_string(j.at("version").get<int>()));
    }
    Model m = init_model(config_parse(j.at("config")), 0);
    const json& ts = j.at("tensors");
    if (ts.size() != m.params.size()) throw Error("checkpoint: tensor count mismatch");
    for (std::size_t i = 0; i < ts.size(); ++i) {
      const std::string name = ts[i].at("name").get<std::string>();
      const std::size_t idx = m.params.index_of(name);
      Tensor& t = m.params.at(idx);
      const auto shape = ts[i].at("shape").get<ad::Shape>();
      if (shape != t.shape()) throw Error("checkpoint: shape mismatch for '" + name + "'");
      const auto data = ts[i].at("data").get<std::vector<double>>();
      if (data.size() != t.size()) throw Error("checkpoint: size mismatch for '" + name + "'");
      std::copy(data.begin(), data.end(), t.data().begin());
    }
    return m;
  } catch (const json::exception& e) {
    throw Error("checkpoint: malformed '" + path + "': " + e.what());
  }
}

}  // namespace dsim::agent
