/* C interface to the dsim library. Every function returning int returns one
 * of the DSIM_* codes; on failure dsim_last_error() describes the problem
 * (thread-local, valid until the next failing call on the same thread).
 * Handles are opaque and owned by the caller; free them with the matching
 * dsim_*_free function. NULL is accepted by every free function. */
#ifndef DSIM_DSIM_H
#define DSIM_DSIM_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define DSIM_API __declspec(dllexport)
#else
#define DSIM_API __attribute__((visibility("default")))
#endif

enum {
  DSIM_OK = 0,
  DSIM_ERR_USAGE = 2,   /* invalid argument, malformed or missing input */
  DSIM_ERR_RUNTIME = 3  /* failure during valid work */
};

typedef struct dsim_dataset dsim_dataset;
typedef struct dsim_model dsim_model;
typedef struct dsim_rollout_set dsim_rollout_set;

DSIM_API const char* dsim_last_error(void);
DSIM_API const char* dsim_version(void);

/* ---- datasets ---- */

typedef struct {
  int t_obs;  /* observed steps, default 10 */
  int horizon; /* total steps per scene, default 40 */
  int stride; /* window advance in frames, default 40 */
  double dt;  /* seconds per frame, default 0.1 */
  int fit_lr; /* grid-search l_r when the file has no rear_axis_offset column */
  int threads;
} dsim_window_options;

DSIM_API dsim_window_options dsim_window_options_default(void);

/* kind: "straight", "fork" or "roundabout-lite". */
DSIM_API int dsim_dataset_synth(const char* kind, int n_scenes, uint64_t seed, int t_obs,
                                int horizon, dsim_dataset** out);
/* map_path may be NULL (empty map). */
DSIM_API int dsim_dataset_load(const char* tracks_path, const char* map_path,
                               const dsim_window_options* opts, dsim_dataset** out);
/* map_path may be NULL. */
DSIM_API int dsim_dataset_save(const dsim_dataset* d, const char* tracks_path,
                               const char* map_path);
DSIM_API int dsim_dataset_size(const dsim_dataset* d, int* scenes, int* agents);
DSIM_API void dsim_dataset_free(dsim_dataset* d);

/* ---- kinematic fitting ---- */

typedef struct {
  int vehicles;         /* fitted tracks */
  double max_fit_loss;
  double mean_lr_ratio; /* mean l_r / length */
} dsim_fit_summary;

/* Fits l_r per vehicle track; writes rows track_id,length,l_r,l_r_ratio,fit_loss,steps.
 * hist_path (may be NULL) receives a histogram of l_r / length over `bins` bins. */
DSIM_API int dsim_fit_tracks(const char* tracks_path, double dt, int threads, const char* out_csv,
                             const char* hist_path, int bins, dsim_fit_summary* summary);

/* ---- rendering ---- */

typedef struct {
  int resolution_px; /* default 64 */
  double extent_m;   /* default 64 */
  double sigma;      /* coverage sharpness, default 1e-4 */
  double gamma;      /* blend temperature, default 1e-2 */
  int hard;          /* nonzero: exact inside/outside reference renderer */
} dsim_render_options;

DSIM_API dsim_render_options dsim_render_options_default(void);

/* Renders the birdview of agent `ego_id` at absolute frame `frame`. */
DSIM_API int dsim_render_frame(const char* tracks_path, const char* map_path, double dt,
                               int64_t frame, int ego_id, const dsim_render_options* opts,
                               const char* png_path);

/* ---- models ---- */

typedef struct {
  const char* kinematic_mode; /* "bicycle", "unconstrained", "displacement",
                                 "oriented-unconstrained" or "oriented-displacement" */
  int resolution_px;          /* 64 (toy encoder) or 256 (full-scale encoder) */
  double obs_sigma;           /* state likelihood std, default 0.05 */
  uint64_t seed;
} dsim_model_options;

DSIM_API dsim_model_options dsim_model_options_default(void);
DSIM_API int dsim_model_create(const dsim_model_options* opts, dsim_model** out);
DSIM_API int dsim_model_load(const char* path, dsim_model** out);
DSIM_API int dsim_model_save(const dsim_model* m, const char* path);
DSIM_API int dsim_model_checksum(const dsim_model* m, uint64_t* out);
DSIM_API int dsim_model_resolution(const dsim_model* m, int* out);
DSIM_API void dsim_model_free(dsim_model* m);

/* ---- training ---- */

typedef struct {
  int epochs;
  int batch_size;
  double lr;
  double clip_norm;
  const char* mode; /* "classmates-forcing", "blank-future" or "teacher-forced" */
  uint64_t seed;
  int threads;
  int differentiable_birdview;
} dsim_train_options;

typedef struct {
  int epoch;
  double elbo;
  double recon;
  double kl;
  double grad_norm;
} dsim_epoch_stats;

typedef void (*dsim_epoch_callback)(const dsim_epoch_stats* stats, void* user);

DSIM_API dsim_train_options dsim_train_options_default(void);
/* callback may be NULL. */
DSIM_API int dsim_train(dsim_model* m, const dsim_dataset* d, const dsim_train_options* opts,
                        dsim_epoch_callback callback, void* user);

/* ---- rollouts ---- */

typedef struct {
  int k_samples;
  const char* mode; /* "generative", "classmates-forcing", "blank-future", "teacher-forced" */
  int ego_index;    /* classmates-forcing only */
  uint64_t seed;
  int noise_on_states;
  int warmup;
  int threads;
  double max_abs_alpha; /* <= 0: unlimited */
  double max_abs_beta;  /* <= 0: unlimited */
} dsim_rollout_options;

DSIM_API dsim_rollout_options dsim_rollout_options_default(void);
DSIM_API int dsim_rollout(const dsim_model* m, const dsim_dataset* d,
                          const dsim_rollout_options* opts, dsim_rollout_set** out);
/* format: "csv", "json" or NULL (from the extension). */
DSIM_API int dsim_rollout_export(const dsim_rollout_set* r, const char* path, const char* format);
DSIM_API int dsim_rollout_import(const char* path, dsim_rollout_set** out);
DSIM_API int dsim_rollout_size(const dsim_rollout_set* r, int* scenes, int* samples);
DSIM_API void dsim_rollout_free(dsim_rollout_set* r);

/* ---- evaluation ---- */

typedef struct {
  int k;
  int agents;
  double min_ade;
  double min_fde;
  double mfd;
} dsim_metrics;

/* ade_form: "rms" (default when NULL) or "mean-distance". csv_path and json_path may be NULL. */
DSIM_API int dsim_evaluate(const dsim_dataset* d, const dsim_rollout_set* r, const char* ade_form,
                           const char* csv_path, const char* json_path, dsim_metrics* out);

/* ---- gradient checks ---- */

typedef struct {
  int points;
  double max_error;
  double tolerance;
  int passed;
} dsim_gradcheck_result;

/* suite: "kinematics", "rasterizer" or "elbo". */
DSIM_API int dsim_gradcheck(const char* suite, int points, uint64_t seed,
                            dsim_gradcheck_result* out);

#ifdef __cplusplus
}
#endif

#endif
