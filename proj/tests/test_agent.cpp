#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "dsim/agent.hpp"

using namespace dsim;
using namespace dsim::agent;
using ad::Tensor;
using ad::Var;

namespace {

AgentModelConfig small_config() {
  AgentModelConfig c;
  c.birdview_resolution = 16;
  c.encoder_channels = {4, 4};
  c.hidden_dim = 8;
  c.feature_dim = 8;
  c.head_hidden = 8;
  return c;
}

Tensor random_image(int r, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  Tensor t({3, r, r});
  for (auto& v : t.data()) v = u(rng);
  return t;
}

Tensor random_vec(int n, std::mt19937_64& rng, double s = 1.0) {
  std::normal_distribution<double> g(0, s);
  Tensor t({n});
  for (auto& v : t.data()) v = g(rng);
  return t;
}

/// Randomizes the zero-initialized output layers so every parameter matters.
void perturb_all(Model& m, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0, 0.2);
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    for (auto& v : m.params.at(i).data()) v += g(rng);
  }
}

}  // namespace

TEST(Config, Validation) {
  AgentModelConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_NO_THROW(full_scale_config().validate());
  c.birdview_resolution = 60;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.obs_sigma[2] = 0.0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.action_scale = {1.0};
  EXPECT_THROW(c.validate(), Error);
  EXPECT_EQ(AgentModelConfig{}.encoder_output_size(), 16 * 4 * 4);
}

TEST(Encoder, DeterministicAndShapeChecked) {
  const Model m = init_model(small_config(), 1);
  std::mt19937_64 rng(2);
  const Tensor img = random_image(16, rng);
  ad::Tape tape;
  const BoundModel b = bind(tape, m, false);
  const Var f1 = encode_birdview(b, tape.constant(img));
  const Var f2 = encode_birdview(b, tape.constant(img));
  EXPECT_EQ(f1.value().storage(), f2.value().storage());
  EXPECT_EQ(f1.size(), 8u);
  EXPECT_THROW(encode_birdview(b, tape.constant(random_image(32, rng))), Error);
}

TEST(Encoder, ZeroFinalLayerGivesZeroFeature) {
  Model m = init_model(small_config(), 1);
  for (auto& v : m.params.at(m.params.index_of("enc.fc.w")).data()) v = 0.0;
  ad::Tape tape;
  const BoundModel b = bind(tape, m, false);
  const Var f = encode_birdview(b, tape.constant(Tensor({3, 16, 16})));
  for (double v : f.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Encoder, GradientWrtImage) {
  const Model m = init_model(small_config(), 3);
  std::mt19937_64 rng(4);
  const Tensor img = random_image(16, rng);
  const Tensor w = random_vec(8, rng);
  auto f = [&](ad::Tape& t, Var x) {
    const BoundModel b = bind(t, m, false);
    return ad::sum(ad::mul(encode_birdview(b, x), t.constant(w)));
  };
  EXPECT_LT(ad::grad_check(f, img, 1e-5), 1e-3);
}

TEST(Gru, ZeroWeightsHalveState) {
  ad::Tape t;
  const Var h = t.constant(Tensor::vector({0.8, -0.4}));
  const Var x = t.constant(Tensor::vector({1.0, 2.0, 3.0}));
  const Var out = gru_cell(h, x, t.constant(Tensor({6, 3})), t.constant(Tensor({6, 2})),
                           t.constant(Tensor({6})), t.constant(Tensor({6})));
  EXPECT_DOUBLE_EQ(out.value()[0], 0.4);
  EXPECT_DOUBLE_EQ(out.value()[1], -0.2);
}

TEST(Gru, MatchesHandComputedCell) {
  // Dim-2 hidden, dim-1 input; gates computed by hand below.
  const std::vector<double> wx{0.5, -0.3, 0.2, 0.1, -0.4, 0.6};
  const std::vector<double> wh{0.1, 0.2, -0.1, 0.3, 0.4, -0.2, 0.0, 0.1, 0.2, 0.3, -0.3, 0.5};
  const std::vector<double> bx{0.01, 0.02, 0.03, 0.04, 0.05, 0.06};
  const std::vector<double> bh{-0.01, 0.0, 0.01, 0.02, -0.02, 0.03};
  const double x = 0.7;
  const double h[2] = {0.3, -0.6};
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  double gx[6], gh[6];
  for (int i = 0; i < 6; ++i) {
    gx[i] = wx[i] * x + bx[i];
    gh[i] = wh[2 * i] * h[0] + wh[2 * i + 1] * h[1] + bh[i];
  }
  double want[2];
  for (int k = 0; k < 2; ++k) {
    const double r = sig(gx[k] + gh[k]);
    const double u = sig(gx[2 + k] + gh[2 + k]);
    const double n = std::tanh(gx[4 + k] + r * gh[4 + k]);
    want[k] = (1 - u) * h[k] + u * n;
  }
  ad::Tape t;
  const Var out = gru_cell(t.constant(Tensor::vector({h[0], h[1]})), t.constant(Tensor::vector({x})),
                           t.constant(Tensor({6, 1}, wx)), t.constant(Tensor({6, 2}, wh)),
                           t.constant(Tensor({6}, bx)), t.constant(Tensor({6}, bh)));
  EXPECT_NEAR(out.value()[0], want[0], 1e-15);
  EXPECT_NEAR(out.value()[1], want[1], 1e-15);
}

TEST(Recurrent, FiniteAndDeterministic) {
  const Model m = init_model(small_config(), 5);
  std::mt19937_64 rng(6);
  ad::Tape t;
  const BoundModel b = bind(t, m, false);
  std::vector<Var> h{t.constant(random_vec(8, rng)), t.constant(random_vec(8, rng))};
  const Var f = t.constant(random_vec(8, rng));
  const Var z = t.constant(random_vec(2, rng));
  const Var a = t.constant(random_vec(2, rng));
  const auto h1 = recurrent_update(b, h, f, z, a);
  const auto h2 = recurrent_update(b, h, f, z, a);
  ASSERT_EQ(h1.size(), 2u);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_TRUE(h1[l].value().all_finite());
    EXPECT_EQ(h1[l].value().storage(), h2[l].value().storage());
  }
}

TEST(Posterior, PositiveStdAndFiniteKl) {
  Model m = init_model(small_config(), 7);
  std::mt19937_64 rng(8);
  perturb_all(m, rng);
  for (int i = 0; i < 100; ++i) {
    ad::Tape t;
    const BoundModel b = bind(t, m, false);
    const Var a = t.constant(random_vec(2, rng, 3.0));
    const Var f = t.constant(random_vec(8, rng));
    const Var h = t.constant(random_vec(8, rng));
    const GaussianVar q = posterior(b, a, f, h);
    const GaussianVar q2 = posterior(b, a, f, h);
    for (double s : q.std.value().data()) EXPECT_GT(s, 0.0);
    EXPECT_EQ(q.mean.value().storage(), q2.mean.value().storage());
    const double kl = kl_gaussian(q).item();
    EXPECT_TRUE(std::isfinite(kl));
    EXPECT_GE(kl, 0.0);
  }
}

TEST(Posterior, UntrainedEqualsPrior) {
  const Model m = init_model(small_config(), 9);
  std::mt19937_64 rng(10);
  ad::Tape t;
  const BoundModel b = bind(t, m, false);
  const GaussianVar q = posterior(b, t.constant(random_vec(2, rng)), t.constant(random_vec(8, rng)),
                                  t.constant(random_vec(8, rng)));
  for (double v : q.mean.value().data()) EXPECT_EQ(v, 0.0);
  for (double v : q.std.value().data()) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(kl_gaussian(q).item(), 0.0);
}

TEST(Decoder, DeterministicDiverseAndDifferentiable) {
  Model m = init_model(small_config(), 11);
  std::mt19937_64 rng(12);
  perturb_all(m, rng);
  const Tensor f = random_vec(8, rng);
  const Tensor h = random_vec(8, rng);
  ad::Tape t;
  const BoundModel b = bind(t, m, false);
  const Var a1 = decode_action(b, t.constant(f), t.constant(Tensor::vector({0.1, 0.2})), t.constant(h));
  const Var a2 = decode_action(b, t.constant(f), t.constant(Tensor::vector({0.1, 0.2})), t.constant(h));
  EXPECT_EQ(a1.value().storage(), a2.value().storage());
  int differs = 0;
  for (int i = 0; i < 100; ++i) {
    const Var ai = decode_action(b, t.constant(f), t.constant(random_vec(2, rng)), t.constant(h));
    differs += ai.value().storage() != a1.value().storage();
  }
  EXPECT_GE(differs, 99);
  auto fz = [&](ad::Tape& tp, Var z) {
    const BoundModel bb = bind(tp, m, false);
    const Var a = decode_action(bb, tp.constant(f), z, tp.constant(h));
    return ad::add(ad::index(a, 0), ad::mul(ad::index(a, 1), 3.0));
  };
  EXPECT_LT(ad::grad_check(fz, Tensor::vector({0.3, -0.5}), 1e-6), 1e-4);
  EXPECT_THROW(decode_action(b, t.constant(f), t.constant(random_vec(3, rng)), t.constant(h)), Error);
}

TEST(Kl, ClosedFormExamples) {
  const std::vector<double> zero{0.0}, one{1.0};
  EXPECT_EQ(kl_gaussian(zero, one), 0.0);
  EXPECT_DOUBLE_EQ(kl_gaussian(one, one), 0.5);
  const std::vector<double> bad{0.0};
  EXPECT_THROW(kl_gaussian(zero, bad), Error);
}

TEST(Kl, MatchesMonteCarlo) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> um(-1.5, 1.5), us(0.3, 2.0);
  for (int trial = 0; trial < 5; ++trial) {
    const std::vector<double> mu{um(rng), um(rng)};
    const std::vector<double> sd{us(rng), us(rng)};
    std::normal_distribution<double> n(0, 1);
    double acc = 0.0;
    const int samples = 100000;
    for (int s = 0; s < samples; ++s) {
      double lq = 0.0, lp = 0.0;
      for (int d = 0; d < 2; ++d) {
        const double e = n(rng);
        const double z = mu[static_cast<std::size_t>(d)] + sd[static_cast<std::size_t>(d)] * e;
        lq += -0.5 * e * e - std::log(sd[static_cast<std::size_t>(d)]);
        lp += -0.5 * z * z;
      }
      acc += lq - lp;
    }
    EXPECT_NEAR(acc / samples, kl_gaussian(mu, sd), 1e-2);
  }
}

TEST(Kl, NonNegativeAndZeroOnlyAtPrior) {
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> um(-3, 3), us(0.05, 4);
  for (int i = 0; i < 10000; ++i) {
    const std::vector<double> mu{um(rng), um(rng)};
    const std::vector<double> sd{us(rng), us(rng)};
    EXPECT_GT(kl_gaussian(mu, sd), 0.0);
  }
  const std::vector<double> z{0, 0}, o{1, 1};
  EXPECT_LE(std::abs(kl_gaussian(z, o)), 1e-12);
}

TEST(ElboStep, ExactHitWithPriorPosterior) {
  const Model m = init_model(small_config(), 15);
  std::mt19937_64 rng(16);
  const Tensor img = random_image(16, rng);
  const AgentState s = make_state(1, 2, 0.3, 5);
  const std::vector<double> a_gt{0.2, 0.05};
  const std::vector<double> eps{0.4, -1.1};
  auto run = [&](const AgentState& gt, const std::array<double, 4>& sigma) {
    Model mm = m;
    mm.config.obs_sigma = sigma;
    ad::Tape t;
    const BoundModel b = bind(t, mm, false);
    const auto r = elbo_step(b, gt, constant_state(t, s), t.constant(img), initial_hidden(b),
                             t.constant(Tensor({2})), t.constant(Tensor({2})), a_gt, eps, 1.5, 0.1);
    return std::tuple{value_of(r.next_mean), r.term.item(), r.kl.item()};
  };
  const std::array<double, 4> sig{0.05, 0.05, 0.05, 0.05};
  const AgentState hit = std::get<0>(run(s, sig));
  const auto [next, term, kl] = run(hit, sig);
  EXPECT_EQ(kl, 0.0);
  const double want = -4 * 0.5 * std::log(2 * kPi * 0.05 * 0.05);
  EXPECT_NEAR(term, want, 1e-9);
  // At zero residual, a wider likelihood strictly lowers the term.
  const double wider = std::get<1>(run(hit, {0.1, 0.1, 0.1, 0.1}));
  EXPECT_LT(wider, term);
}

TEST(ElboStep, HeadingResidualIsWrapped) {
  const Model m = init_model(small_config(), 17);
  std::mt19937_64 rng(18);
  const Tensor img = random_image(16, rng);
  auto recon = [&](double psi_gt) {
    ad::Tape t;
    const BoundModel b = bind(t, m, false);
    AgentState gt{1.5, 2.1, psi_gt, 5.0};
    const auto r = elbo_step(b, gt, constant_state(t, make_state(1, 2, 3.1, 5)), t.constant(img),
                             initial_hidden(b), t.constant(Tensor({2})), t.constant(Tensor({2})),
                             std::vector<double>{0, 0}, std::vector<double>{0, 0}, 1.5, 0.1);
    return r.recon.item();
  };
  EXPECT_NEAR(recon(-3.1 + kTwoPi), recon(-3.1), 1e-9);
  EXPECT_NEAR(recon(3.0), recon(3.0 + kTwoPi), 1e-9);
}

TEST(ElboStep, GradCheckEveryParameterGroup) {
  Model m = init_model(small_config(), 19);
  std::mt19937_64 rng(20);
  perturb_all(m, rng);
  const Tensor img = random_image(16, rng);
  const std::vector<double> a_gt{0.3, -0.1};
  const std::vector<double> eps{0.7, 0.2};
  const std::vector<Tensor> h0{random_vec(8, rng, 0.5), random_vec(8, rng, 0.5)};
  for (std::size_t pi = 0; pi < m.params.size(); ++pi) {
    auto f = [&](ad::Tape& t, Var x) {
      BoundModel b = bind(t, m, false);
      b.p[pi] = x;
      std::vector<Var> h{t.constant(h0[0]), t.constant(h0[1])};
      const auto r = elbo_step(b, make_state(0.52, 0.03, 0.01, 5.1),
                               constant_state(t, make_state(0, 0, 0, 5)), t.constant(img), h,
                               t.constant(Tensor::vector({0.1, -0.2})),
                               t.constant(Tensor::vector({0.05, 0.01})), a_gt, eps, 1.5, 0.1);
      return ad::mul(r.term, 1e-3);
    };
    const Tensor& p = m.params.at(pi);
    std::vector<std::size_t> coords;
    for (std::size_t k = 0; k < std::min<std::size_t>(p.size(), 6); ++k) {
      coords.push_back((k * 7919) % p.size());
    }
    EXPECT_LT(ad::grad_check(f, p, 1e-5, coords), 1e-3) << m.params.name(pi);
  }
}

TEST(Prior, MomentsAndReproducibility) {
  std::mt19937_64 rng(21);
  const int n = 100000;
  double s[2] = {0, 0}, s2[2] = {0, 0};
  for (int i = 0; i < n; ++i) {
    const auto z = prior_sample(rng, 2);
    ASSERT_EQ(z.size(), 2u);
    for (int d = 0; d < 2; ++d) {
      s[d] += z[static_cast<std::size_t>(d)];
      s2[d] += z[static_cast<std::size_t>(d)] * z[static_cast<std::size_t>(d)];
    }
  }
  for (int d = 0; d < 2; ++d) {
    const double mean = s[d] / n;
    EXPECT_NEAR(mean, 0.0, 0.02);
    EXPECT_NEAR(s2[d] / n - mean * mean, 1.0, 0.02);
  }
  std::mt19937_64 a(5), b(5);
  EXPECT_EQ(prior_sample(a, 3), prior_sample(b, 3));
}

TEST(ElboBound, LinearGaussianToyApproachesLogLikelihood) {
  // x = s + W z + noise, z ~ N(0, I) in 2-D, unconstrained kinematics with
  // only (dx, dy) active. The exact marginal is N(s, W W^T + sigma^2 I).
  const double sigma = 0.5;
  const double W[2][2] = {{0.8, 0.1}, {-0.3, 0.6}};
  const AgentState s0 = make_state(0, 0, 0, 0);
  const AgentState x = make_state(0.9, -0.4, 0, 0);
  const std::array<double, 4> sig{sigma, sigma, sigma, sigma};
  // Exact log p(x), restricted to the two active dimensions plus the two
  // deterministic ones (psi, v residuals are zero).
  const double c00 = W[0][0] * W[0][0] + W[0][1] * W[0][1] + sigma * sigma;
  const double c01 = W[0][0] * W[1][0] + W[0][1] * W[1][1];
  const double c11 = W[1][0] * W[1][0] + W[1][1] * W[1][1] + sigma * sigma;
  const double det = c00 * c11 - c01 * c01;
  const double q = (c11 * x.x * x.x - 2 * c01 * x.x * x.y + c00 * x.y * x.y) / det;
  const double log_p = -0.5 * q - 0.5 * std::log(4 * kPi * kPi * det) -
                       std::log(2 * kPi * sigma * sigma);

  auto elbo = [&](const Tensor& var_params, std::span<const double> eps, ad::Gradients* g) {
    ad::Tape t;
    const Var p = t.leaf(var_params);
    GaussianVar qz{ad::slice(p, 0, 2), ad::exp(ad::slice(p, 2, 2))};
    const Var z = ad::add(qz.mean, ad::mul(qz.std, t.constant(Tensor::vector({eps.begin(), eps.end()}))));
    const Var wz = ad::matmul(t.constant(Tensor({2, 2}, {W[0][0], W[0][1], W[1][0], W[1][1]})),
                              ad::reshape(z, {2, 1}));
    const Var action = ad::concat({ad::reshape(wz, {2}), t.constant(Tensor({2}))});
    const StateVar next = apply_action(KinematicMode::Unconstrained, constant_state(t, s0), action, 1.0, 0.1);
    const Var term = ad::sub(state_log_density(next, x, sig), kl_gaussian(qz));
    if (g) *g = t.backward(term);
    return std::pair{term.item(), p};
  };
  // Stochastic gradient ascent with single-sample reparameterized estimates.
  Tensor params = Tensor::vector({0, 0, 0, 0});
  std::mt19937_64 rng(22);
  std::normal_distribution<double> n(0, 1);
  for (int it = 0; it < 4000; ++it) {
    const double e[2] = {n(rng), n(rng)};
    ad::Gradients g;
    const auto [val, p] = elbo(params, e, &g);
    const Tensor gp = g[p];
    const double lr = 0.02 / (1.0 + it / 1000.0);
    for (std::size_t i = 0; i < 4; ++i) params[i] += lr * gp[i];
  }
  // Closed-form expectation of the trained bound for a linear decoder.
  const double mu[2] = {params[0], params[1]};
  const double sd[2] = {std::exp(params[2]), std::exp(params[3])};
  double trained = -2.0 * std::log(2 * kPi * sigma * sigma);
  for (int i = 0; i < 2; ++i) {
    const double mean = W[i][0] * mu[0] + W[i][1] * mu[1];
    const double r = (i == 0 ? x.x : x.y) - mean;
    const double spread = W[i][0] * W[i][0] * sd[0] * sd[0] + W[i][1] * W[i][1] * sd[1] * sd[1];
    trained += -0.5 * (r * r + spread) / (sigma * sigma);
  }
  trained -= kl_gaussian(std::vector<double>{mu[0], mu[1]}, std::vector<double>{sd[0], sd[1]});
  EXPECT_LE(trained, log_p + 1e-6);
  EXPECT_GT(trained, log_p - 0.05);
}

TEST(Checkpoint, RoundTripAndChecksum) {
  Model m = init_model(AgentModelConfig{}, 24);
  std::mt19937_64 rng(25);
  perturb_all(m, rng);
  const std::string path = (std::filesystem::temp_directory_path() / "dsim_ckpt_test.json").string();
  save_checkpoint(m, path);
  const Model back = load_checkpoint(path);
  std::filesystem::remove(path);
  ASSERT_EQ(back.params.size(), m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    EXPECT_EQ(back.params.at(i).storage(), m.params.at(i).storage()) << m.params.name(i);
  }
  EXPECT_EQ(back.params.checksum(), m.params.checksum());
  EXPECT_EQ(config_to_json(back.config), config_to_json(m.config));
  EXPECT_NE(init_model(AgentModelConfig{}, 24).params.checksum(), m.params.checksum());
  EXPECT_THROW(load_checkpoint("/nonexistent/ckpt.json"), Error);
}
