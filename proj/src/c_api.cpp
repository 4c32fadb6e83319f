#include "dsim/dsim.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <new>
#include <string>

#include "dsim/agent.hpp"
#include "dsim/fitting.hpp"
#include "dsim/gradcheck.hpp"
#include "dsim/io.hpp"
#include "dsim/metrics.hpp"
#include "dsim/rasterizer.hpp"
#include "dsim/simulation.hpp"

struct dsim_dataset {
  dsim::MapData map;
  std::vector<dsim::Scene> scenes;
};

struct dsim_model {
  dsim::agent::Model model;
};

struct dsim_rollout_set {
  dsim::io::ExportMeta meta;
  std::vector<dsim::sim::RolloutResult> results;
};

namespace {

thread_local std::string g_last_error;

template <typename F>
int guarded(F&& f) {
  try {
    f();
    return DSIM_OK;
  } catch (const dsim::RuntimeError& e) {
    g_last_error = e.what();
    return DSIM_ERR_RUNTIME;
  } catch (const dsim::Error& e) {
    g_last_error = e.what();
    return DSIM_ERR_USAGE;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return DSIM_ERR_RUNTIME;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return DSIM_ERR_RUNTIME;
  } catch (...) {
    g_last_error = "unknown error";
    return DSIM_ERR_RUNTIME;
  }
}

void need(const void* p, const char* what) {
  if (!p) throw dsim::Error(std::string(what) + " must not be NULL");
}

std::string str(const char* s, const char* what) {
  need(s, what);
  return s;
}

dsim::raster::BirdviewConfig birdview_for(const dsim::agent::Model& m) {
  if (m.config.birdview_resolution == 64) return dsim::raster::toy_config();
  dsim::raster::BirdviewConfig c;
  c.resolution_px = m.config.birdview_resolution;
  return c;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

extern "C" {

const char* dsim_last_error(void) { return g_last_error.c_str(); }

const char* dsim_version(void) { return "1.0.0"; }

dsim_window_options dsim_window_options_default(void) {
  const dsim::io::Windowing w;
  return {w.t_obs, w.horizon, w.stride, w.dt, w.fit_lr ? 1 : 0, w.threads};
}

int dsim_dataset_synth(const char* kind, int n_scenes, uint64_t seed, int t_obs, int horizon,
                       dsim_dataset** out) {
  return guarded([&] {
    need(out, "out");
    *out = nullptr;
    auto d = dsim::io::synth_dataset(dsim::io::parse_synth_kind(str(kind, "kind")), n_scenes, seed,
                                     t_obs, horizon);
    *out = new dsim_dataset{std::move(d.map), std::move(d.scenes)};
  });
}

int dsim_dataset_load(const char* tracks_path, const char* map_path,
                      const dsim_window_options* opts, dsim_dataset** out) {
  return guarded([&] {
    need(out, "out");
    *out = nullptr;
    const dsim_window_options o = opts ? *opts : dsim_window_options_default();
    dsim::io::Windowing w;
    w.t_obs = o.t_obs;
    w.horizon = o.horizon;
    w.stride = o.stride;
    w.dt = o.dt;
    w.fit_lr = o.fit_lr != 0;
    w.threads = o.threads;
    dsim::MapData map = map_path ? dsim::io::load_map(map_path) : dsim::MapData{};
    auto scenes = dsim::io::load_tracks(str(tracks_path, "tracks_path"), w, map);
    *out = new dsim_dataset{std::move(map), std::move(scenes)};
  });
}

int dsim_dataset_save(const dsim_dataset* d, const char* tracks_path, const char* map_path) {
  return guarded([&] {
    need(d, "dataset");
    dsim::io::save_tracks(d->scenes, str(tracks_path, "tracks_path"));
    if (map_path) dsim::io::save_map(d->map, map_path);
  });
}

int dsim_dataset_size(const dsim_dataset* d, int* scenes, int* agents) {
  return guarded([&] {
    need(d, "dataset");
    if (scenes) *scenes = static_cast<int>(d->scenes.size());
    if (agents) {
      std::size_t n = 0;
      for (const auto& s : d->scenes) n += s.agents.size();
      *agents = static_cast<int>(n);
    }
  });
}

void dsim_dataset_free(dsim_dataset* d) { delete d; }

int dsim_fit_tracks(const char* tracks_path, double dt, int threads, const char* out_csv,
                    const char* hist_path, int bins, dsim_fit_summary* summary) {
  return guarded([&] {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw dsim::Error("dt must be positive");
    if (hist_path && bins < 1) throw dsim::Error("bins must be at least 1");
    const auto tracks = dsim::io::read_tracks(str(tracks_path, "tracks_path"), dt);
    std::ofstream out(str(out_csv, "out_csv"));
    if (!out) throw dsim::RuntimeError("cannot write '" + std::string(out_csv) + "'");
    out << "track_id,length,l_r,l_r_ratio,fit_loss,steps\n";
    dsim_fit_summary s{0, 0.0, 0.0};
    std::vector<double> ratios;
    for (const auto& t : tracks) {
      if (t.attributes.type != dsim::AgentType::Vehicle || t.longest_run.size() < 2) continue;
      const auto fit = dsim::fitting::fit(t.longest_run, t.attributes.length, threads);
      const double ratio = fit.l_r / t.attributes.length;
      out << t.id << ',' << fmt(t.attributes.length) << ',' << fmt(fit.l_r) << ',' << fmt(ratio)
          << ',' << fmt(fit.fit_loss) << ',' << t.longest_run.size() << '\n';
      ++s.vehicles;
      s.max_fit_loss = std::max(s.max_fit_loss, fit.fit_loss);
      ratios.push_back(ratio);
    }
    for (double r : ratios) s.mean_lr_ratio += r / static_cast<double>(ratios.size());
    if (!out) throw dsim::RuntimeError("failed writing '" + std::string(out_csv) + "'");
    if (hist_path) {
      std::ofstream h(hist_path);
      if (!h) throw dsim::RuntimeError("cannot write '" + std::string(hist_path) + "'");
      h << "bin_lo,bin_hi,count\n";
      for (const auto& b : dsim::fitting::histogram(ratios, bins, 0.0, 0.5)) {
        h << fmt(b.lo) << ',' << fmt(b.hi) << ',' << b.count << '\n';
      }
      if (!h) throw dsim::RuntimeError("failed writing '" + std::string(hist_path) + "'");
    }
    if (summary) *summary = s;
  });
}

dsim_render_options dsim_render_options_default(void) {
  const auto c = dsim::raster::toy_config();
  return {c.resolution_px, c.extent_m, c.sigma_blend, c.gamma_blend, 0};
}

int dsim_render_frame(const char* tracks_path, const char* map_path, double dt, int64_t frame,
                      int ego_id, const dsim_render_options* opts, const char* png_path) {
  return guarded([&] {
    const dsim_render_options o = opts ? *opts : dsim_render_options_default();
    dsim::raster::BirdviewConfig cfg = dsim::raster::toy_config();
    cfg.resolution_px = o.resolution_px;
    cfg.extent_m = o.extent_m;
    cfg.sigma_blend = o.sigma;
    cfg.gamma_blend = o.gamma;
    cfg.validate();
    const auto tracks = dsim::io::read_tracks(str(tracks_path, "tracks_path"), dt);
    const dsim::MapData map = map_path ? dsim::io::load_map(map_path) : dsim::MapData{};
    std::vector<dsim::raster::AgentView> views;
    std::size_t ego = views.size();
    bool found = false;
    for (const auto& t : tracks) {
      const long long k = frame - t.first_frame;
      if (k < 0 || !t.trajectory.is_valid(static_cast<std::size_t>(k))) continue;
      if (t.id == ego_id) {
        ego = views.size();
        found = true;
      }
      views.push_back({t.id, t.attributes, t.trajectory.states[static_cast<std::size_t>(k)], true});
    }
    if (!found) {
      throw dsim::Error("agent " + std::to_string(ego_id) + " is not present at frame " +
                        std::to_string(frame));
    }
    const auto prims = dsim::raster::build_primitives(map, views, ego);
    const auto img = o.hard ? dsim::raster::rasterize_hard(prims, cfg)
                            : dsim::raster::rasterize_soft(prims, cfg);
    dsim::raster::write_png(str(png_path, "png_path"), img);
  });
}

dsim_model_options dsim_model_options_default(void) {
  return {"bicycle", 64, 0.05, 0};
}

int dsim_model_create(const dsim_model_options* opts, dsim_model** out) {
  return guarded([&] {
    need(out, "out");
    *out = nullptr;
    const dsim_model_options o = opts ? *opts : dsim_model_options_default();
    dsim::agent::AgentModelConfig c;
    if (o.resolution_px == 256) {
      c = dsim::agent::full_scale_config();
    } else if (o.resolution_px != 64) {
      throw dsim::Error("model resolution must be 64 or 256");
    }
    c.kinematic_mode = dsim::parse_kinematic_mode(str(o.kinematic_mode, "kinematic_mode"));
    c.action_scale = dsim::agent::default_action_scale(c.kinematic_mode);
    if (!(o.obs_sigma > 0.0)) throw dsim::Error("obs_sigma must be positive");
    c.obs_sigma = {o.obs_sigma, o.obs_sigma, o.obs_sigma, o.obs_sigma};
    *out = new dsim_model{dsim::agent::init_model(c, o.seed)};
  });
}

int dsim_model_load(const char* path, dsim_model** out) {
  return guarded([&] {
    need(out, "out");
    *out = nullptr;
    *out = new dsim_model{dsim::agent::load_checkpoint(str(path, "path"))};
  });
}

int dsim_model_save(const dsim_model* m, const char* path) {
  return guarded([&] {
    need(m, "model");
    dsim::agent::save_checkpoint(m->model, str(path, "path"));
  });
}

int dsim_model_checksum(const dsim_model* m, uint64_t* out) {
  return guarded([&] {
    need(m, "model");
    need(out, "out");
    *out = m->model.params.checksum();
  });
}

int dsim_model_resolution(const dsim_model* m, int* out) {
  return guarded([&] {
    need(m, "model");
    need(out, "out");
    *out = m->model.config.birdview_resolution;
  });
}

void dsim_model_free(dsim_model* m) { delete m; }

dsim_train_options dsim_train_options_default(void) {
  const dsim::sim::TrainConfig c;
  return {c.epochs, c.batch_size, c.lr, c.clip_norm, "classmates-forcing", c.seed, c.threads,
          c.differentiable_birdview ? 1 : 0};
}

int dsim_train(dsim_model* m, const dsim_dataset* d, const dsim_train_options* opts,
               dsim_epoch_callback callback, void* user) {
  return guarded([&] {
    need(m, "model");
    need(d, "dataset");
    const dsim_train_options o = opts ? *opts : dsim_train_options_default();
    dsim::sim::TrainConfig c;
    c.epochs = o.epochs;
    c.batch_size = o.batch_size;
    c.lr = o.lr;
    c.clip_norm = o.clip_norm;
    c.mode = dsim::sim::parse_rollout_mode(str(o.mode, "mode"));
    c.seed = o.seed;
    c.threads = o.threads;
    c.differentiable_birdview = o.differentiable_birdview != 0;
    c.birdview = birdview_for(m->model);
    dsim::sim::EpochCallback cb;
    if (callback) {
      cb = [&](const dsim::sim::EpochStats& s) {
        const dsim_epoch_stats cs{s.epoch, s.elbo, s.recon, s.kl, s.grad_norm};
        callback(&cs, user);
      };
    }
    dsim::sim::train(d->scenes, m->model, c, cb);
  });
}

dsim_rollout_options dsim_rollout_options_default(void) {
  return {1, "generative", 0, 0, 0, 1, 1, 0.0, 0.0};
}

int dsim_rollout(const dsim_model* m, const dsim_dataset* d, const dsim_rollout_options* opts,
                 dsim_rollout_set** out) {
  return guarded([&] {
    need(out, "out");
    *out = nullptr;
    need(m, "model");
    need(d, "dataset");
    const dsim_rollout_options o = opts ? *opts : dsim_rollout_options_default();
    dsim::sim::RolloutConfig c;
    c.k_samples = o.k_samples;
    c.mode = dsim::sim::parse_rollout_mode(str(o.mode, "mode"));
    c.ego_index = o.ego_index < 0 ? std::numeric_limits<std::size_t>::max()
                                  : static_cast<std::size_t>(o.ego_index);
    c.seed = o.seed;
    c.noise_on_states = o.noise_on_states != 0;
    c.warmup = o.warmup != 0;
    c.threads = o.threads;
    c.birdview = birdview_for(m->model);
    if (o.max_abs_alpha > 0.0) c.clamp.max_abs_alpha = o.max_abs_alpha;
    if (o.max_abs_beta > 0.0) c.clamp.max_abs_beta = o.max_abs_beta;
    auto r = std::make_unique<dsim_rollout_set>();
    r->meta = {o.seed, std::string(dsim::sim::to_string(c.mode)), m->model.params.checksum()};
    r->results = dsim::sim::rollout_all(d->scenes, m->model, c);
    *out = r.release();
  });
}

int dsim_rollout_export(const dsim_rollout_set* r, const char* path, const char* format) {
  return guarded([&] {
    need(r, "rollout");
    const std::string p = str(path, "path");
    const auto f = format ? dsim::io::parse_export_format(format) : dsim::io::format_for_path(p);
    dsim::io::export_rollouts(r->results, r->meta, p, f);
  });
}

int dsim_rollout_import(const char* path, dsim_rollout_set** out) {
  return guarded([&] {
    need(out, "out");
    *out = nullptr;
    auto file = dsim::io::import_rollouts(str(path, "path"));
    *out = new dsim_rollout_set{file.meta, std::move(file.results)};
  });
}

int dsim_rollout_size(const dsim_rollout_set* r, int* scenes, int* samples) {
  return guarded([&] {
    need(r, "rollout");
    if (scenes) *scenes = static_cast<int>(r->results.size());
    if (samples) *samples = r->results.empty() ? 0 : static_cast<int>(r->results[0].samples.size());
  });
}

void dsim_rollout_free(dsim_rollout_set* r) { delete r; }

int dsim_evaluate(const dsim_dataset* d, const dsim_rollout_set* r, const char* ade_form,
                  const char* csv_path, const char* json_path, dsim_metrics* out) {
  return guarded([&] {
    need(d, "dataset");
    need(r, "rollout");
    const auto form = ade_form ? dsim::metrics::parse_ade_form(ade_form) : dsim::metrics::AdeForm::Rms;
    const auto rep = dsim::metrics::evaluate(d->scenes, r->results, form);
    if (csv_path) dsim::metrics::write_report_csv(rep, csv_path);
    if (json_path) dsim::metrics::write_report_json(rep, json_path);
    if (out) *out = {rep.k, static_cast<int>(rep.agents.size()), rep.min_ade, rep.min_fde, rep.mfd};
  });
}

int dsim_gradcheck(const char* suite, int points, uint64_t seed, dsim_gradcheck_result* out) {
  return guarded([&] {
    const auto r = dsim::gradcheck::run_suite(str(suite, "suite"), points, seed);
    if (out) *out = {r.points, r.max_error, r.tolerance, r.passed ? 1 : 0};
  });
}

}  // extern "C"
