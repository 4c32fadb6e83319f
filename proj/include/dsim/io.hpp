#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "dsim/core.hpp"
#include "dsim/simulation.hpp"

namespace dsim::io {

struct Windowing {
  int t_obs = 10;
  int horizon = 40;
  int stride = 40;
  double dt = 0.1;
  // Grid-search l_r for vehicles when the file has no rear_axis_offset column.
  bool fit_lr = true;
  int threads = 1;

  void validate() const;
};

/// Track CSV with header
/// track_id,frame_id,timestamp_ms,agent_type,x,y,vx,vy,psi_rad,length,width
/// (optional trailing rear_axis_offset). Empty input gives no scenes.
std::vector<Scene> load_tracks(const std::string& path, const Windowing& w,
                               const MapData& map = {});
std::vector<Scene> parse_tracks(std::istream& in, const Windowing& w, const MapData& map,
                                const std::string& source = "<stream>");

/// One whole track, indexed from its first frame; missing frames are masked.
struct Track {
  int id = 0;
  long long first_frame = 0;
  AgentAttributes attributes;  // l_r from the file or 0.35 * length
  Trajectory trajectory;
  Trajectory longest_run;  // longest stretch of consecutive frames
};

std::vector<Track> read_tracks(const std::string& path, double dt);
std::vector<Track> parse_raw_tracks(std::istream& in, double dt,
                                    const std::string& source = "<stream>");

/// Writes scenes as consecutive frame blocks of `horizon` frames with the
/// rear_axis_offset column, so load_tracks with stride = horizon restores them.
void save_tracks(const std::vector<Scene>& scenes, const std::string& path);

/// Text map: one primitive per line,
///   polygon x1 y1 x2 y2 ...
///   polyline <width> x1 y1 x2 y2 ...
/// Blank lines and lines starting with '#' are ignored.
MapData load_map(const std::string& path);
MapData parse_map(std::istream& in, const std::string& source = "<stream>");
void save_map(const MapData& map, const std::string& path);

enum class ExportFormat { Csv, Json };
ExportFormat parse_export_format(const std::string& name);
/// Picks the format from the file extension (.json, otherwise csv).
ExportFormat format_for_path(const std::string& path);

struct ExportMeta {
  std::uint64_t seed = 0;
  std::string mode = "generative";
  std::uint64_t model_checksum = 0;
};

struct RolloutFile {
  ExportMeta meta;
  std::vector<sim::RolloutResult> results;
};

/// Rows: scene_id,sample_k,agent_id,t,x,y,psi,v with t the absolute step index.
void export_rollouts(const std::vector<sim::RolloutResult>& results, const ExportMeta& meta,
                     const std::string& path, ExportFormat format);
/// Loads either format. Only states survive the round trip (actions and z are not stored).
RolloutFile import_rollouts(const std::string& path);

enum class SynthKind { Straight, Fork, RoundaboutLite };
SynthKind parse_synth_kind(const std::string& name);
std::string to_string(SynthKind kind);

struct SynthInfo {
  int branch = 0;          // fork: +1 left, -1 right; roundabout: 1 exits, 0 stays
  bool at_fork = false;    // fork: the future crosses the junction
  double final_offset = 0.0;  // fork: |y| of the vehicle at the last step
};

struct SynthData {
  MapData map;
  std::vector<Scene> scenes;
  std::vector<SynthInfo> info;  // per scene (first agent)
};

/// Generates bicycle-exact trajectories (every state comes from bicycle_step).
SynthData synth_dataset(SynthKind kind, int n_scenes, std::uint64_t seed, int t_obs = 10,
                        int horizon = 40, double dt = 0.1);

}  // namespace dsim::io
