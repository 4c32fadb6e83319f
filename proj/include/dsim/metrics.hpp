#pragma once

#include <span>
#include <string>
#include <vector>

#include "dsim/core.hpp"
#include "dsim/simulation.hpp"

namespace dsim::metrics {

/// Rms: sqrt(mean squared distance), the default. MeanDistance: mean of
/// Euclidean distances, provided for comparison with other conventions.
enum class AdeForm { Rms, MeanDistance };
AdeForm parse_ade_form(const std::string& name);
std::string to_string(AdeForm form);

/// Future positions only (steps t_obs+1..T). An empty mask means all valid.
/// Throws when no step is valid.
double ade(std::span<const Vec2> pred, std::span<const Vec2> gt, AdeForm form = AdeForm::Rms,
           const std::vector<bool>& mask = {});
/// Distance at the last step.
double fde(std::span<const Vec2> pred, std::span<const Vec2> gt);

using Samples = std::vector<std::vector<Vec2>>;

double min_ade(const Samples& samples, std::span<const Vec2> gt, AdeForm form = AdeForm::Rms,
               const std::vector<bool>& mask = {});
double min_fde(const Samples& samples, std::span<const Vec2> gt);
/// Largest pairwise distance between final positions; 0 for a single sample.
double mfd(const Samples& samples);

struct AgentMetrics {
  int scene_id = 0;
  int agent_id = 0;
  double min_ade = 0.0;
  double min_fde = 0.0;  // only meaningful when has_final
  double mfd = 0.0;
  bool has_final = false;
};

struct SceneMetrics {
  int scene_id = 0;
  int agents = 0;
  double min_ade = 0.0;
  double min_fde = 0.0;
  double mfd = 0.0;
};

struct MetricReport {
  int k = 0;
  AdeForm form = AdeForm::Rms;
  double min_ade = 0.0;  // mean over agents
  double min_fde = 0.0;  // mean over agents valid at the last step
  double mfd = 0.0;
  std::vector<AgentMetrics> agents;
  std::vector<SceneMetrics> scenes;
};

/// Scores rollouts against the ground truth of the matching scenes (by
/// scene id and agent id). ADE and FDE are minimized over samples independently.
MetricReport evaluate(const std::vector<Scene>& scenes,
                      const std::vector<sim::RolloutResult>& results,
                      AdeForm form = AdeForm::Rms);

void write_report_csv(const MetricReport& report, const std::string& path);
void write_report_json(const MetricReport& report, const std::string& path);

}  // namespace dsim::metrics
