#include <CLI11.hpp>

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <thread>

#include "dsim/dsim.h"

namespace {

enum class Level { Error = 0, Warn = 1, Info = 2, Debug = 3 };

Level g_level = Level::Info;

void log(Level l, const std::string& msg) {
  if (l <= g_level) std::fprintf(stderr, "%s\n", msg.c_str());
}

struct Failure {
  int code;
};

void check(int rc) {
  if (rc != DSIM_OK) {
    std::fprintf(stderr, "error: %s\n", dsim_last_error());
    throw Failure{rc};
  }
}

void usage_error(const std::string& msg) {
  std::fprintf(stderr, "error: %s\n", msg.c_str());
  throw Failure{DSIM_ERR_USAGE};
}

template <typename T, void (*Free)(T*)>
struct Owned {
  T* p = nullptr;
  Owned() = default;
  Owned(const Owned&) = delete;
  Owned& operator=(const Owned&) = delete;
  ~Owned() { Free(p); }
};

using Dataset = Owned<dsim_dataset, dsim_dataset_free>;
using Model = Owned<dsim_model, dsim_model_free>;
using Rollout = Owned<dsim_rollout_set, dsim_rollout_free>;

struct Global {
  uint64_t seed = 0;
  int threads = 0;
  std::string log_level = "info";
};

struct DataArgs {
  std::string tracks;
  std::string map;
  std::string synth;
  int scenes = 100;
  uint64_t synth_seed = 0;
  double dt = 0.1;
  int t_obs = 10;
  int horizon = 40;
  int stride = 40;
  bool no_fit_lr = false;
};

CLI::Option* env(CLI::Option* o, const std::string& name) { return o->envname("DSIM_" + name); }

void add_data_flags(CLI::App* sub, DataArgs& a) {
  env(sub->add_option("--tracks", a.tracks, "Track CSV to window into scenes"), "TRACKS");
  env(sub->add_option("--map", a.map, "Map file (polygon/polyline lines)"), "MAP");
  env(sub->add_option("--synth", a.synth, "Generate scenes instead of reading --tracks")
          ->check(CLI::IsMember({"straight", "fork", "roundabout-lite"})),
      "SYNTH");
  env(sub->add_option("--scenes", a.scenes, "Scene count for --synth")->capture_default_str(),
      "SCENES");
  env(sub->add_option("--synth-seed", a.synth_seed, "Generator seed for --synth")
          ->capture_default_str(),
      "SYNTH_SEED");
  env(sub->add_option("--dt", a.dt, "Seconds per frame")->capture_default_str(), "DT");
  env(sub->add_option("--t-obs", a.t_obs, "Observed steps per scene")->capture_default_str(),
      "T_OBS");
  env(sub->add_option("--horizon", a.horizon, "Total steps per scene")->capture_default_str(),
      "HORIZON");
  env(sub->add_option("--stride", a.stride, "Window advance in frames")->capture_default_str(),
      "STRIDE");
  env(sub->add_flag("--no-fit-lr", a.no_fit_lr,
                    "Use 0.35*length for l_r instead of grid search when the file has none"),
      "NO_FIT_LR");
}

void load_data(const DataArgs& a, int threads, Dataset& d) {
  if (a.synth.empty() == a.tracks.empty()) usage_error("give exactly one of --tracks and --synth");
  if (!(a.dt > 0.0)) usage_error("--dt must be positive");
  if (!a.synth.empty()) {
    check(dsim_dataset_synth(a.synth.c_str(), a.scenes, a.synth_seed, a.t_obs, a.horizon, &d.p));
  } else {
    dsim_window_options w = dsim_window_options_default();
    w.t_obs = a.t_obs;
    w.horizon = a.horizon;
    w.stride = a.stride;
    w.dt = a.dt;
    w.fit_lr = a.no_fit_lr ? 0 : 1;
    w.threads = threads;
    check(dsim_dataset_load(a.tracks.c_str(), a.map.empty() ? nullptr : a.map.c_str(), &w, &d.p));
  }
  int scenes = 0, agents = 0;
  check(dsim_dataset_size(d.p, &scenes, &agents));
  log(Level::Info, "dataset: " + std::to_string(scenes) + " scenes, " + std::to_string(agents) +
                       " agents");
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentiable 2D multi-agent driving simulator"};
  app.require_subcommand(1);
  app.set_config("--config", "", "key = value file; [subcommand] sections hold subcommand flags");
  app.get_config_ptr()->envname("DSIM_CONFIG");

  Global g;
  g.threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  env(app.add_option("--seed", g.seed, "Random seed")->capture_default_str(), "SEED");
  env(app.add_option("--threads", g.threads, "Worker thread cap (default: available cores)")
          ->check(CLI::PositiveNumber)
          ->capture_default_str(),
      "THREADS");
  env(app.add_option("--log-level", g.log_level, "Verbosity on stderr")
          ->check(CLI::IsMember({"error", "warn", "info", "debug"}))
          ->capture_default_str(),
      "LOG_LEVEL");

  std::function<void()> run;

  // fit-kinematics
  auto* fit = app.add_subcommand("fit-kinematics", "Fit l_r and bicycle actions per vehicle track");
  std::string fit_tracks, fit_out, fit_hist;
  double fit_dt = 0.1;
  int fit_bins = 50;
  env(fit->add_option("--tracks", fit_tracks, "Track CSV")->required(), "TRACKS");
  env(fit->add_option("--dt", fit_dt, "Seconds per frame")->capture_default_str(), "DT");
  env(fit->add_option("--out", fit_out, "Output CSV: track_id,length,l_r,l_r_ratio,fit_loss,steps")
          ->required(),
      "OUT");
  env(fit->add_option("--hist", fit_hist, "Optional CSV histogram of l_r/length"), "HIST");
  env(fit->add_option("--bins", fit_bins, "Histogram bins over [0, 0.5]")->capture_default_str(),
      "BINS");
  fit->callback([&] {
    run = [&] {
      if (!(fit_dt > 0.0)) usage_error("--dt must be positive");
      if (fit_bins < 1) usage_error("--bins must be at least 1");
      dsim_fit_summary s{};
      check(dsim_fit_tracks(fit_tracks.c_str(), fit_dt, g.threads, fit_out.c_str(),
                            fit_hist.empty() ? nullptr : fit_hist.c_str(), fit_bins, &s));
      std::printf("vehicles %d max_fit_loss %.6g mean_lr_ratio %.6g\n", s.vehicles, s.max_fit_loss,
                  s.mean_lr_ratio);
    };
  });

  // render
  auto* ren = app.add_subcommand("render", "Render one ego-centred birdview to PNG");
  std::string ren_tracks, ren_map, ren_out;
  long long ren_frame = 0;
  int ren_ego = 0;
  double ren_dt = 0.1;
  bool ren_hard = false;
  dsim_render_options ropt = dsim_render_options_default();
  env(ren->add_option("--tracks", ren_tracks, "Track CSV")->required(), "TRACKS");
  env(ren->add_option("--map", ren_map, "Map file (omit for an empty map)"), "MAP");
  env(ren->add_option("--frame", ren_frame, "Absolute frame index")->required(), "FRAME");
  env(ren->add_option("--ego", ren_ego, "Track id of the ego agent")->required(), "EGO");
  env(ren->add_option("--out", ren_out, "Output PNG")->required(), "OUT");
  env(ren->add_flag("--hard", ren_hard, "Use the exact reference rasterizer"), "HARD");
  env(ren->add_option("--dt", ren_dt, "Seconds per frame")->capture_default_str(), "DT");
  env(ren->add_option("--resolution", ropt.resolution_px, "Image side in pixels")
          ->capture_default_str(),
      "RESOLUTION");
  env(ren->add_option("--extent", ropt.extent_m, "Image side in metres")->capture_default_str(),
      "EXTENT");
  env(ren->add_option("--sigma", ropt.sigma, "Soft coverage sharpness")->capture_default_str(),
      "SIGMA");
  env(ren->add_option("--gamma", ropt.gamma, "Soft blend temperature")->capture_default_str(),
      "GAMMA");
  ren->callback([&] {
    run = [&] {
      if (!(ren_dt > 0.0)) usage_error("--dt must be positive");
      ropt.hard = ren_hard ? 1 : 0;
      check(dsim_render_frame(ren_tracks.c_str(), ren_map.empty() ? nullptr : ren_map.c_str(),
                              ren_dt, ren_frame, ren_ego, &ropt, ren_out.c_str()));
      log(Level::Info, "wrote " + ren_out);
    };
  });

  // train
  auto* tr = app.add_subcommand("train", "Train the driver model by maximising the ELBO");
  DataArgs tr_data;
  add_data_flags(tr, tr_data);
  std::string tr_out, tr_init, tr_log, tr_kin = "bicycle";
  int tr_res = 64;
  double tr_sigma = dsim_model_options_default().obs_sigma;
  dsim_train_options topt = dsim_train_options_default();
  std::string tr_mode = topt.mode;
  bool tr_no_diff = false;
  env(tr->add_option("--out", tr_out, "Checkpoint to write")->required(), "OUT");
  env(tr->add_option("--init", tr_init, "Resume from this checkpoint"), "INIT");
  env(tr->add_option("--log", tr_log, "Per-epoch CSV: epoch,elbo,recon,kl,grad_norm"), "LOG");
  env(tr->add_option("--kinematic-mode", tr_kin, "Action parameterisation")
          ->check(CLI::IsMember({"bicycle", "unconstrained", "displacement",
                                 "oriented-unconstrained", "oriented-displacement"}))
          ->capture_default_str(),
      "KINEMATIC_MODE");
  env(tr->add_option("--resolution", tr_res, "Birdview resolution: 64 (toy) or 256")
          ->check(CLI::IsMember({64, 256}))
          ->capture_default_str(),
      "RESOLUTION");
  env(tr->add_option("--obs-sigma", tr_sigma, "State likelihood std")->capture_default_str(),
      "OBS_SIGMA");
  env(tr->add_option("--epochs", topt.epochs, "Passes over the data")->capture_default_str(),
      "EPOCHS");
  env(tr->add_option("--batch-size", topt.batch_size, "Sequences per update")
          ->capture_default_str(),
      "BATCH_SIZE");
  env(tr->add_option("--lr", topt.lr, "Adam learning rate")->capture_default_str(), "LR");
  env(tr->add_option("--clip-norm", topt.clip_norm, "Global gradient-norm clip")
          ->capture_default_str(),
      "CLIP_NORM");
  env(tr->add_option("--mode", tr_mode, "Training regime")
          ->check(CLI::IsMember({"classmates-forcing", "blank-future", "teacher-forced"}))
          ->capture_default_str(),
      "MODE");
  env(tr->add_flag("--no-differentiable-birdview", tr_no_diff,
                   "Treat self-rolled-out birdviews as constants"),
      "NO_DIFFERENTIABLE_BIRDVIEW");
  tr->callback([&] {
    run = [&] {
      Dataset d;
      load_data(tr_data, g.threads, d);
      Model m;
      if (!tr_init.empty()) {
        check(dsim_model_load(tr_init.c_str(), &m.p));
      } else {
        dsim_model_options mo = dsim_model_options_default();
        mo.kinematic_mode = tr_kin.c_str();
        mo.resolution_px = tr_res;
        mo.obs_sigma = tr_sigma;
        mo.seed = g.seed;
        check(dsim_model_create(&mo, &m.p));
      }
      topt.mode = tr_mode.c_str();
      topt.seed = g.seed;
      topt.threads = g.threads;
      topt.differentiable_birdview = tr_no_diff ? 0 : 1;
      std::unique_ptr<std::ofstream> logf;
      if (!tr_log.empty()) {
        logf = std::make_unique<std::ofstream>(tr_log);
        if (!*logf) {
          std::fprintf(stderr, "error: cannot write '%s'\n", tr_log.c_str());
          throw Failure{DSIM_ERR_RUNTIME};
        }
        *logf << "epoch,elbo,recon,kl,grad_norm\n";
      }
      auto cb = [](const dsim_epoch_stats* s, void* user) {
        auto* f = static_cast<std::ofstream*>(user);
        char line[200];
        std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g,%.17g", s->epoch, s->elbo,
                      s->recon, s->kl, s->grad_norm);
        if (f) *f << line << '\n' << std::flush;
        log(Level::Info, "epoch " + std::to_string(s->epoch) + " elbo " + num(s->elbo) +
                             " recon " + num(s->recon) + " kl " + num(s->kl) + " grad_norm " +
                             num(s->grad_norm));
      };
      check(dsim_train(m.p, d.p, &topt, cb, logf.get()));
      check(dsim_model_save(m.p, tr_out.c_str()));
      uint64_t sum = 0;
      check(dsim_model_checksum(m.p, &sum));
      std::printf("model %s checksum %" PRIu64 "\n", tr_out.c_str(), sum);
    };
  });

  // rollout
  auto* ro = app.add_subcommand("rollout", "Sample joint rollouts and export them");
  DataArgs ro_data;
  add_data_flags(ro, ro_data);
  std::string ro_model, ro_out, ro_format, ro_mode = "generative";
  dsim_rollout_options rop = dsim_rollout_options_default();
  bool ro_noise = false, ro_no_warmup = false;
  rop.k_samples = 6;
  env(ro->add_option("--model", ro_model, "Checkpoint")->required(), "MODEL");
  env(ro->add_option("--out", ro_out, "Export path (.csv or .json)")->required(), "OUT");
  env(ro->add_option("--format", ro_format, "Override the export format")
          ->check(CLI::IsMember({"csv", "json"})),
      "FORMAT");
  env(ro->add_option("--k", rop.k_samples, "Samples per scene")->capture_default_str(), "K");
  env(ro->add_option("--mode", ro_mode, "Rollout regime")
          ->check(CLI::IsMember(
              {"generative", "classmates-forcing", "blank-future", "teacher-forced"}))
          ->capture_default_str(),
      "MODE");
  env(ro->add_option("--ego-index", rop.ego_index, "Ego agent index for classmates-forcing")
          ->capture_default_str(),
      "EGO_INDEX");
  env(ro->add_flag("--noise-on-states", ro_noise, "Add observation noise to predicted states"),
      "NOISE_ON_STATES");
  env(ro->add_flag("--no-warmup", ro_no_warmup, "Skip the recurrent warmup on observed steps"),
      "NO_WARMUP");
  env(ro->add_option("--max-abs-alpha", rop.max_abs_alpha, "Acceleration clamp (<= 0: none)")
          ->capture_default_str(),
      "MAX_ABS_ALPHA");
  env(ro->add_option("--max-abs-beta", rop.max_abs_beta, "Slip-angle clamp (<= 0: none)")
          ->capture_default_str(),
      "MAX_ABS_BETA");
  ro->callback([&] {
    run = [&] {
      Model m;
      check(dsim_model_load(ro_model.c_str(), &m.p));
      Dataset d;
      load_data(ro_data, g.threads, d);
      rop.mode = ro_mode.c_str();
      rop.seed = g.seed;
      rop.threads = g.threads;
      rop.noise_on_states = ro_noise ? 1 : 0;
      rop.warmup = ro_no_warmup ? 0 : 1;
      Rollout r;
      check(dsim_rollout(m.p, d.p, &rop, &r.p));
      check(dsim_rollout_export(r.p, ro_out.c_str(), ro_format.empty() ? nullptr : ro_format.c_str()));
      log(Level::Info, "wrote " + ro_out);
    };
  });

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Score exported rollouts against ground truth");
  DataArgs ev_data;
  add_data_flags(ev, ev_data);
  std::string ev_rollouts, ev_out, ev_json, ev_form = "rms";
  int ev_k = 0;
  env(ev->add_option("--rollouts", ev_rollouts, "Rollout export to score")->required(), "ROLLOUTS");
  env(ev->add_option("--k", ev_k, "Expected samples per scene (0: take from the file)")
          ->capture_default_str(),
      "K");
  env(ev->add_option("--ade-form", ev_form, "ADE definition")
          ->check(CLI::IsMember({"rms", "mean-distance"}))
          ->capture_default_str(),
      "ADE_FORM");
  env(ev->add_option("--out", ev_out, "Per-scene CSV report"), "OUT");
  env(ev->add_option("--json", ev_json, "JSON report"), "JSON");
  ev->callback([&] {
    run = [&] {
      if (ev_k < 0) usage_error("--k must be non-negative");
      Dataset d;
      load_data(ev_data, g.threads, d);
      Rollout r;
      check(dsim_rollout_import(ev_rollouts.c_str(), &r.p));
      int scenes = 0, samples = 0;
      check(dsim_rollout_size(r.p, &scenes, &samples));
      if (ev_k > 0 && samples != ev_k) {
        usage_error("rollouts hold " + std::to_string(samples) + " samples per scene, --k is " +
                    std::to_string(ev_k));
      }
      dsim_metrics mt{};
      check(dsim_evaluate(d.p, r.p, ev_form.c_str(), ev_out.empty() ? nullptr : ev_out.c_str(),
                          ev_json.empty() ? nullptr : ev_json.c_str(), &mt));
      std::printf("agents %d minADE_%d %.6f minFDE_%d %.6f MFD_%d %.6f\n", mt.agents, mt.k,
                  mt.min_ade, mt.k, mt.min_fde, mt.k, mt.mfd);
    };
  });

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
  std::string gc_suite = "all";
  int gc_points = 10;
  env(gc->add_option("--suite", gc_suite, "Suite to run")
          ->check(CLI::IsMember({"kinematics", "rasterizer", "elbo", "all"}))
          ->capture_default_str(),
      "SUITE");
  env(gc->add_option("--points", gc_points, "Random points per suite")->capture_default_str(),
      "POINTS");
  gc->callback([&] {
    run = [&] {
      if (gc_points < 1) usage_error("--points must be at least 1");
      bool all_ok = true;
      for (const char* s : {"kinematics", "rasterizer", "elbo"}) {
        if (gc_suite != "all" && gc_suite != s) continue;
        dsim_gradcheck_result r{};
        check(dsim_gradcheck(s, gc_points, g.seed, &r));
        std::printf("%s points %d max_error %.3e tolerance %.1e %s\n", s, r.points, r.max_error,
                    r.tolerance, r.passed ? "PASS" : "FAIL");
        all_ok = all_ok && r.passed;
      }
      if (!all_ok) throw Failure{DSIM_ERR_RUNTIME};
    };
  });

  // synth
  auto* sy = app.add_subcommand("synth", "Write a synthetic dataset as tracks + map");
  std::string sy_kind = "fork", sy_tracks, sy_map;
  int sy_scenes = 100, sy_t_obs = 10, sy_horizon = 40;
  env(sy->add_option("--kind", sy_kind, "Generator")
          ->check(CLI::IsMember({"straight", "fork", "roundabout-lite"}))
          ->capture_default_str(),
      "KIND");
  env(sy->add_option("--scenes", sy_scenes, "Number of scenes")->capture_default_str(), "SCENES");
  env(sy->add_option("--t-obs", sy_t_obs, "Observed steps per scene")->capture_default_str(),
      "T_OBS");
  env(sy->add_option("--horizon", sy_horizon, "Total steps per scene")->capture_default_str(),
      "HORIZON");
  env(sy->add_option("--out", sy_tracks, "Track CSV to write")->required(), "OUT");
  env(sy->add_option("--map-out", sy_map, "Map file to write"), "MAP_OUT");
  sy->callback([&] {
    run = [&] {
      Dataset d;
      check(dsim_dataset_synth(sy_kind.c_str(), sy_scenes, g.seed, sy_t_obs, sy_horizon, &d.p));
      check(dsim_dataset_save(d.p, sy_tracks.c_str(), sy_map.empty() ? nullptr : sy_map.c_str()));
      int scenes = 0, agents = 0;
      check(dsim_dataset_size(d.p, &scenes, &agents));
      std::printf("scenes %d agents %d\n", scenes, agents);
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : DSIM_ERR_USAGE;
  }
  g_level = g.log_level == "error" ? Level::Error
            : g.log_level == "warn" ? Level::Warn
            : g.log_level == "debug" ? Level::Debug
                                     : Level::Info;
  try {
    if (run) run();
  } catch (const Failure& f) {
    return f.code;
  }
  return 0;
}
