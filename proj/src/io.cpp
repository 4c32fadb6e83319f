#include "dsim/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include <json.hpp>

#include "dsim/fitting.hpp"
#include "dsim/kinematics.hpp"

namespace dsim::io {

using nlohmann::json;

void Windowing::validate() const {
  if (t_obs < 1 || horizon <= t_obs) throw Error("windowing: need 1 <= t_obs < horizon");
  if (stride < 1) throw Error("windowing: stride must be at least 1");
  if (!(dt > 0.0) || !std::isfinite(dt)) throw Error("windowing: dt must be positive");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, sep)) out.push_back(trim(cur));
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::string& where) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  if (b != e && *b == '+') ++b;
  const auto r = std::from_chars(b, e, v);
  if (r.ec != std::errc() || r.ptr != e || s.empty()) {
    throw Error(where + ": malformed number '" + s + "'");
  }
  if (!std::isfinite(v)) throw Error(where + ": non-finite number '" + s + "'");
  return v;
}

long long parse_int(const std::string& s, const std::string& where) {
  long long v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || s.empty()) {
    throw Error(where + ": malformed integer '" + s + "'");
  }
  return v;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

AgentType parse_agent_type(const std::string& s, const std::string& where) {
  std::string t = s;
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (t == "car" || t == "vehicle" || t == "truck") return AgentType::Vehicle;
  if (t == "pedestrian" || t == "bicycle" || t == "pedestrian/bicycle") {
    return AgentType::PedestrianBicycle;
  }
  throw Error(where + ": unknown agent_type '" + s + "'");
}

const char* type_name(AgentType t) { return t == AgentType::Vehicle ? "car" : "pedestrian/bicycle"; }

struct Row {
  long long frame = 0;
  long long ts = 0;
  AgentType type = AgentType::Vehicle;
  AgentState s;
  double length = 0.0;
  double width = 0.0;
  double l_r = -1.0;
};

double default_lr(double length) {
  const double v = std::floor(0.35 * length / fitting::kLrGridStep + 0.5) * fitting::kLrGridStep;
  return std::clamp(v, fitting::kLrGridStep, length / 2.0);
}

}  // namespace

namespace {

struct Table {
  bool has_lr = false;
  std::map<long long, std::vector<Row>> tracks;
};

Table parse_table(std::istream& in, double dt, const std::string& source) {
  Table table;
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++lineno;
    if (!trim(line).empty() && trim(line)[0] != '#') {
      header = split(trim(line), ',');
      break;
    }
  }
  if (header.empty()) return table;
  const char* required[] = {"track_id", "frame_id", "timestamp_ms", "agent_type", "x",     "y",
                            "vx",       "vy",       "psi_rad",      "length",     "width"};
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* name : required) {
    if (!col.count(name)) throw Error(source + ": missing column '" + std::string(name) + "'");
  }
  table.has_lr = col.count("rear_axis_offset") > 0;
  auto& tracks = table.tracks;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::string where = source + ":" + std::to_string(lineno);
    const auto f = split(t, ',');
    if (f.size() != header.size()) {
      throw Error(where + ": expected " + std::to_string(header.size()) + " fields, got " +
                  std::to_string(f.size()));
    }
    auto get = [&](const char* name) -> const std::string& { return f[col.at(name)]; };
    const long long id = parse_int(get("track_id"), where);
    Row r;
    r.frame = parse_int(get("frame_id"), where);
    r.ts = parse_int(get("timestamp_ms"), where);
    r.type = parse_agent_type(get("agent_type"), where);
    const double vx = parse_double(get("vx"), where);
    const double vy = parse_double(get("vy"), where);
    r.s = make_state(parse_double(get("x"), where), parse_double(get("y"), where),
                     parse_double(get("psi_rad"), where), std::hypot(vx, vy));
    r.length = parse_double(get("length"), where);
    r.width = parse_double(get("width"), where);
    if (table.has_lr) r.l_r = parse_double(get("rear_axis_offset"), where);
    auto& tr = tracks[id];
    if (!tr.empty() && r.frame <= tr.back().frame) {
      throw Error(where + ": frame_id not increasing for track_id " + std::to_string(id));
    }
    if (!tr.empty()) {
      const double expect = static_cast<double>(r.frame - tr.front().frame) * dt * 1000.0;
      if (std::abs(static_cast<double>(r.ts - tr.front().ts) - expect) > 1.0) {
        throw Error(where + ": timestamp_ms inconsistent with dt for track_id " +
                    std::to_string(id));
      }
    }
    tr.push_back(r);
  }
  return table;
}

// Longest run of consecutive frames, as a fully valid trajectory.
Trajectory longest_run(const std::vector<Row>& rows, double dt) {
  std::size_t best_b = 0, best_n = 0;
  for (std::size_t b = 0; b < rows.size();) {
    std::size_t e = b + 1;
    while (e < rows.size() && rows[e].frame == rows[e - 1].frame + 1) ++e;
    if (e - b > best_n) {
      best_n = e - b;
      best_b = b;
    }
    b = e;
  }
  Trajectory tr;
  tr.dt = dt;
  for (std::size_t k = best_b; k < best_b + best_n; ++k) {
    tr.states.push_back(rows[k].s);
    tr.valid.push_back(true);
  }
  return tr;
}

AgentAttributes track_attributes(long long id, const std::vector<Row>& rows, bool has_lr,
                                 bool fit_lr, double dt, int threads, const std::string& source) {
  AgentAttributes a;
  a.length = rows.front().length;
  a.width = rows.front().width;
  a.type = rows.front().type;
  if (has_lr) {
    a.rear_axis_offset = rows.front().l_r;
  } else {
    a.rear_axis_offset = default_lr(a.length);
    if (fit_lr) {
      const Trajectory tr = longest_run(rows, dt);
      if (tr.size() >= 3) a.rear_axis_offset = fitting::grid_search_lr(tr, a.length, threads).l_r;
    }
  }
  try {
    validate(a);
  } catch (const Error& e) {
    throw Error(source + ": track_id " + std::to_string(id) + ": " + e.what());
  }
  return a;
}

}  // namespace

std::vector<Track> parse_raw_tracks(std::istream& in, double dt, const std::string& source) {
  if (!(dt > 0.0)) throw Error("tracks: dt must be positive");
  const Table table = parse_table(in, dt, source);
  std::vector<Track> out;
  for (const auto& [id, rows] : table.tracks) {
    Track t;
    t.id = static_cast<int>(id);
    t.first_frame = rows.front().frame;
    t.attributes = track_attributes(id, rows, table.has_lr, false, dt, 1, source);
    t.trajectory.dt = dt;
    const auto n = static_cast<std::size_t>(rows.back().frame - rows.front().frame + 1);
    t.trajectory.states.assign(n, AgentState{});
    t.trajectory.valid.assign(n, false);
    for (const Row& r : rows) {
      const auto k = static_cast<std::size_t>(r.frame - t.first_frame);
      t.trajectory.states[k] = r.s;
      t.trajectory.valid[k] = true;
    }
    t.longest_run = longest_run(rows, dt);
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<Track> read_tracks(const std::string& path, double dt) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open tracks file '" + path + "'");
  return parse_raw_tracks(in, dt, path);
}

std::vector<Scene> parse_tracks(std::istream& in, const Windowing& w, const MapData& map,
                                const std::string& source) {
  w.validate();
  validate(map);
  const Table table = parse_table(in, w.dt, source);
  const auto& tracks = table.tracks;
  if (tracks.empty()) return {};
  std::map<long long, AgentAttributes> attrs;
  for (const auto& [id, rows] : tracks) {
    attrs[id] = track_attributes(id, rows, table.has_lr, w.fit_lr, w.dt, w.threads, source);
  }

  long long f_min = tracks.begin()->second.front().frame;
  long long f_max = f_min;
  for (const auto& [id, rows] : tracks) {
    f_min = std::min(f_min, rows.front().frame);
    f_max = std::max(f_max, rows.back().frame);
  }
  std::vector<Scene> scenes;
  int k = 0;
  for (long long start = f_min; start + w.horizon - 1 <= f_max; start += w.stride, ++k) {
    Scene sc;
    sc.id = k;
    sc.map = map;
    sc.t_obs = w.t_obs;
    sc.horizon = w.horizon;
    sc.dt = w.dt;
    for (const auto& [id, rows] : tracks) {
      auto lo = std::lower_bound(rows.begin(), rows.end(), start,
                                 [](const Row& r, long long f) { return r.frame < f; });
      if (lo == rows.end() || lo->frame >= start + w.horizon) continue;
      SceneAgent ag;
      ag.id = static_cast<int>(id);
      ag.attributes = attrs.at(id);
      ag.trajectory.dt = w.dt;
      ag.trajectory.states.assign(static_cast<std::size_t>(w.horizon), AgentState{});
      ag.trajectory.valid.assign(static_cast<std::size_t>(w.horizon), false);
      for (auto it = lo; it != rows.end() && it->frame < start + w.horizon; ++it) {
        const auto t = static_cast<std::size_t>(it->frame - start);
        ag.trajectory.states[t] = it->s;
        ag.trajectory.valid[t] = true;
      }
      sc.agents.push_back(std::move(ag));
    }
    if (!fully_valid_agents(sc).empty()) scenes.push_back(std::move(sc));
  }
  return scenes;
}

std::vector<Scene> load_tracks(const std::string& path, const Windowing& w, const MapData& map) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open tracks file '" + path + "'");
  return parse_tracks(in, w, map, path);
}

void save_tracks(const std::vector<Scene>& scenes, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write tracks file '" + path + "'");
  out << "track_id,frame_id,timestamp_ms,agent_type,x,y,vx,vy,psi_rad,length,width,"
         "rear_axis_offset\n";
  long long base = 0;
  for (const Scene& sc : scenes) {
    validate(sc);
    std::vector<const SceneAgent*> order;
    for (const auto& a : sc.agents) order.push_back(&a);
    std::stable_sort(order.begin(), order.end(),
                     [](const SceneAgent* a, const SceneAgent* b) { return a->id < b->id; });
    for (const SceneAgent* a : order) {
      for (std::size_t t = 0; t < a->trajectory.size(); ++t) {
        if (!a->trajectory.is_valid(t)) continue;
        const AgentState& s = a->trajectory.states[t];
        const long long frame = base + static_cast<long long>(t);
        const auto ts = static_cast<long long>(std::llround(static_cast<double>(frame) * sc.dt * 1000.0));
        out << a->id << ',' << frame << ',' << ts << ',' << type_name(a->attributes.type) << ','
            << fmt(s.x) << ',' << fmt(s.y) << ',' << fmt(s.v * std::cos(s.psi)) << ','
            << fmt(s.v * std::sin(s.psi)) << ',' << fmt(s.psi) << ',' << fmt(a->attributes.length)
            << ',' << fmt(a->attributes.width) << ',' << fmt(a->attributes.rear_axis_offset) << '\n';
      }
    }
    base += sc.horizon;
  }
  if (!out) throw RuntimeError("failed writing tracks file '" + path + "'");
}

// ---------------------------------------------------------------------------
// Maps

MapData parse_map(std::istream& in, const std::string& source) {
  MapData map;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::string where = source + ":" + std::to_string(lineno);
    std::istringstream ss(t);
    std::string kind, tok;
    ss >> kind;
    std::vector<double> nums;
    while (ss >> tok) nums.push_back(parse_double(tok, where));
    if (kind == "polygon") {
      if (nums.size() % 2 != 0) throw Error(where + ": odd number of coordinates");
      if (nums.size() < 6) throw Error(where + ": polygon needs at least 3 points");
      std::vector<Vec2> pts;
      for (std::size_t i = 0; i < nums.size(); i += 2) pts.push_back({nums[i], nums[i + 1]});
      map.driveable_polygons.push_back(std::move(pts));
    } else if (kind == "polyline") {
      if (nums.empty() || nums.size() % 2 != 1) {
        throw Error(where + ": polyline needs a width followed by x y pairs");
      }
      if (!(nums[0] > 0.0)) throw Error(where + ": polyline width must be positive");
      if (nums.size() < 5) throw Error(where + ": polyline needs at least 2 points");
      Polyline pl;
      pl.width = nums[0];
      for (std::size_t i = 1; i < nums.size(); i += 2) pl.points.push_back({nums[i], nums[i + 1]});
      map.lane_lines.push_back(std::move(pl));
    } else {
      throw Error(where + ": unknown map entry '" + kind + "' (expected polygon or polyline)");
    }
  }
  validate(map);
  return map;
}

MapData load_map(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open map file '" + path + "'");
  return parse_map(in, path);
}

void save_map(const MapData& map, const std::string& path) {
  validate(map);
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write map file '" + path + "'");
  for (const auto& poly : map.driveable_polygons) {
    out << "polygon";
    for (const Vec2& p : poly) out << ' ' << fmt(p.x) << ' ' << fmt(p.y);
    out << '\n';
  }
  for (const auto& pl : map.lane_lines) {
    out << "polyline " << fmt(pl.width);
    for (const Vec2& p : pl.points) out << ' ' << fmt(p.x) << ' ' << fmt(p.y);
    out << '\n';
  }
  if (!out) throw RuntimeError("failed writing map file '" + path + "'");
}

// ---------------------------------------------------------------------------
// Rollout export

ExportFormat parse_export_format(const std::string& name) {
  if (name == "csv") return ExportFormat::Csv;
  if (name == "json") return ExportFormat::Json;
  throw Error("unknown export format '" + name + "' (expected csv or json)");
}

ExportFormat format_for_path(const std::string& path) {
  const auto dot = path.rfind('.');
  if (dot != std::string::npos && path.substr(dot) == ".json") return ExportFormat::Json;
  return ExportFormat::Csv;
}

void export_rollouts(const std::vector<sim::RolloutResult>& results, const ExportMeta& meta,
                     const std::string& path, ExportFormat format) {
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write rollout file '" + path + "'");
  if (format == ExportFormat::Csv) {
    out << "# seed=" << meta.seed << "\n# mode=" << meta.mode
        << "\n# model_checksum=" << meta.model_checksum << "\n";
    out << "scene_id,sample_k,agent_id,t,x,y,psi,v\n";
    for (const auto& r : results) {
      for (std::size_t k = 0; k < r.samples.size(); ++k) {
        for (const auto& a : r.samples[k].agents) {
          for (std::size_t j = 0; j < a.states.size(); ++j) {
            const AgentState& s = a.states[j];
            out << r.scene_id << ',' << k << ',' << a.agent_id << ','
                << r.t_obs + static_cast<int>(j) << ',' << fmt(s.x) << ',' << fmt(s.y) << ','
                << fmt(s.psi) << ',' << fmt(s.v) << '\n';
          }
        }
      }
    }
  } else {
    json j;
    j["format"] = "dsim-rollouts";
    j["version"] = 1;
    j["seed"] = meta.seed;
    j["mode"] = meta.mode;
    j["model_checksum"] = meta.model_checksum;
    json scenes = json::array();
    for (const auto& r : results) {
      json sj;
      sj["scene_id"] = r.scene_id;
      sj["t_obs"] = r.t_obs;
      sj["horizon"] = r.horizon;
      json samples = json::array();
      for (const auto& s : r.samples) {
        json agents = json::array();
        for (const auto& a : s.agents) {
          json states = json::array();
          for (const auto& st : a.states) states.push_back({st.x, st.y, st.psi, st.v});
          agents.push_back({{"agent_id", a.agent_id}, {"states", states}});
        }
        samples.push_back({{"agents", agents}});
      }
      sj["samples"] = samples;
      scenes.push_back(sj);
    }
    j["scenes"] = scenes;
    out << j.dump(1) << '\n';
  }
  if (!out) throw RuntimeError("failed writing rollout file '" + path + "'");
}

RolloutFile import_rollouts(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open rollout file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  RolloutFile file;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    json j;
    try {
      j = json::parse(text);
      if (j.at("format") != "dsim-rollouts") throw Error(path + ": not a rollout file");
      file.meta.seed = j.at("seed").get<std::uint64_t>();
      file.meta.mode = j.at("mode").get<std::string>();
      file.meta.model_checksum = j.at("model_checksum").get<std::uint64_t>();
      for (const auto& sj : j.at("scenes")) {
        sim::RolloutResult r;
        r.scene_id = sj.at("scene_id").get<int>();
        r.t_obs = sj.at("t_obs").get<int>();
        r.horizon = sj.at("horizon").get<int>();
        for (const auto& smp : sj.at("samples")) {
          sim::SampleResult s;
          for (const auto& aj : smp.at("agents")) {
            sim::AgentPrediction a;
            a.agent_id = aj.at("agent_id").get<int>();
            for (const auto& st : aj.at("states")) {
              a.states.push_back({st.at(0).get<double>(), st.at(1).get<double>(),
                                  st.at(2).get<double>(), st.at(3).get<double>()});
            }
            s.agents.push_back(std::move(a));
          }
          r.samples.push_back(std::move(s));
        }
        file.results.push_back(std::move(r));
      }
    } catch (const json::exception& e) {
      throw Error(path + ": malformed rollout JSON: " + e.what());
    }
    return file;
  }
  std::istringstream ls(text);
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(ls, line)) {
    ++lineno;
    const std::string t = trim(line);
    const std::string where = path + ":" + std::to_string(lineno);
    if (t.empty()) continue;
    if (t[0] == '#') {
      const auto eq = t.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = trim(t.substr(1, eq - 1));
      const std::string val = trim(t.substr(eq + 1));
      if (key == "seed") file.meta.seed = std::stoull(val);
      if (key == "mode") file.meta.mode = val;
      if (key == "model_checksum") file.meta.model_checksum = std::stoull(val);
      continue;
    }
    if (!header) {
      if (t != "scene_id,sample_k,agent_id,t,x,y,psi,v") throw Error(where + ": unexpected header");
      header = true;
      continue;
    }
    const auto f = split(t, ',');
    if (f.size() != 8) throw Error(where + ": expected 8 fields");
    const int scene_id = static_cast<int>(parse_int(f[0], where));
    const auto k = static_cast<std::size_t>(parse_int(f[1], where));
    const int agent_id = static_cast<int>(parse_int(f[2], where));
    const int step = static_cast<int>(parse_int(f[3], where));
    const AgentState s{parse_double(f[4], where), parse_double(f[5], where),
                       parse_double(f[6], where), parse_double(f[7], where)};
    if (file.results.empty() || file.results.back().scene_id != scene_id) {
      sim::RolloutResult r;
      r.scene_id = scene_id;
      r.t_obs = step;
      r.horizon = step + 1;
      file.results.push_back(std::move(r));
    }
    auto& r = file.results.back();
    r.t_obs = std::min(r.t_obs, step);
    r.horizon = std::max(r.horizon, step + 1);
    if (k >= r.samples.size()) r.samples.resize(k + 1);
    auto& agents = r.samples[k].agents;
    if (agents.empty() || agents.back().agent_id != agent_id) {
      sim::AgentPrediction a;
      a.agent_id = agent_id;
      agents.push_back(std::move(a));
    }
    agents.back().states.push_back(s);
  }
  return file;
}

// ---------------------------------------------------------------------------
// Synthetic data

SynthKind parse_synth_kind(const std::string& name) {
  if (name == "straight") return SynthKind::Straight;
  if (name == "fork") return SynthKind::Fork;
  if (name == "roundabout-lite") return SynthKind::RoundaboutLite;
  throw Error("unknown synth kind '" + name + "' (expected straight, fork or roundabout-lite)");
}

std::string to_string(SynthKind kind) {
  switch (kind) {
    case SynthKind::Straight:
      return "straight";
    case SynthKind::Fork:
      return "fork";
    case SynthKind::RoundaboutLite:
      return "roundabout-lite";
  }
  return "?";
}

namespace {

constexpr double kForkAngle = 20.0 * kPi / 180.0;
constexpr double kRoadWidth = 7.0;
constexpr double kLaneWidth = 3.5;
constexpr double kRingRadius = 20.0;

AgentAttributes random_vehicle(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  AgentAttributes a;
  a.length = 4.0 + u(rng);
  a.width = 1.7 + 0.3 * u(rng);
  const double lo = std::ceil(0.3 * a.length / fitting::kLrGridStep);
  const double hi = std::floor(0.45 * a.length / fitting::kLrGridStep);
  std::uniform_int_distribution<long> pick(static_cast<long>(lo), static_cast<long>(hi));
  a.rear_axis_offset = static_cast<double>(pick(rng)) * fitting::kLrGridStep;
  return a;
}

std::vector<Vec2> quad_along(Vec2 a, Vec2 b, double width) {
  const Vec2 d = (1.0 / norm(b - a)) * (b - a);
  const Vec2 n{-d.y * width / 2.0, d.x * width / 2.0};
  return {a - n, b - n, b + n, a + n};
}

MapData straight_map() {
  MapData m;
  m.driveable_polygons.push_back({{-200, -5.25}, {300, -5.25}, {300, 5.25}, {-200, 5.25}});
  for (double y : {-1.75, 1.75}) m.lane_lines.push_back({{{-200, y}, {300, y}}, 0.15});
  return m;
}

MapData fork_map() {
  MapData m;
  m.driveable_polygons.push_back(quad_along({-200, 0}, {0, 0}, kRoadWidth));
  m.lane_lines.push_back({{{-200, 0}, {0, 0}}, 0.15});
  for (double side : {1.0, -1.0}) {
    const Vec2 end{100.0 * std::cos(kForkAngle), side * 100.0 * std::sin(kForkAngle)};
    m.driveable_polygons.push_back(quad_along({0, 0}, end, kRoadWidth));
    m.lane_lines.push_back({{{0, 0}, end}, 0.15});
  }
  return m;
}

MapData roundabout_map() {
  MapData m;
  const int n = 32;
  const double r_in = kRingRadius - kRoadWidth / 2.0;
  const double r_out = kRingRadius + kRoadWidth / 2.0;
  for (int i = 0; i < n; ++i) {
    const double a0 = kTwoPi * i / n;
    const double a1 = kTwoPi * (i + 1) / n;
    m.driveable_polygons.push_back({{r_in * std::cos(a0), r_in * std::sin(a0)},
                                    {r_out * std::cos(a0), r_out * std::sin(a0)},
                                    {r_out * std::cos(a1), r_out * std::sin(a1)},
                                    {r_in * std::cos(a1), r_in * std::sin(a1)}});
  }
  m.driveable_polygons.push_back(quad_along({kRingRadius, 0}, {kRingRadius, 100}, kRoadWidth));
  std::vector<Vec2> ring;
  for (int i = 0; i <= n; ++i) {
    const double a = kTwoPi * i / n;
    ring.push_back({kRingRadius * std::cos(a), kRingRadius * std::sin(a)});
  }
  m.lane_lines.push_back({ring, 0.15});
  return m;
}

SceneAgent make_agent(int id, const AgentAttributes& a, int horizon, double dt) {
  SceneAgent ag;
  ag.id = id;
  ag.attributes = a;
  ag.trajectory.dt = dt;
  ag.trajectory.states.reserve(static_cast<std::size_t>(horizon));
  ag.trajectory.valid.assign(static_cast<std::size_t>(horizon), true);
  return ag;
}

Scene straight_scene(int index, std::mt19937_64& rng, int t_obs, int horizon, double dt,
                     const MapData& map) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Scene sc;
  sc.id = index;
  sc.map = map;
  sc.t_obs = t_obs;
  sc.horizon = horizon;
  sc.dt = dt;
  const int n = 1 + static_cast<int>(u(rng) * 3.0);
  std::vector<std::vector<double>> lane_x(3);
  double lane_speed[3];
  for (double& s : lane_speed) s = 8.0 + 6.0 * u(rng);
  for (int j = 0; j < n; ++j) {
    int lane = 0;
    double x0 = 0.0;
    for (int attempt = 0;; ++attempt) {
      lane = static_cast<int>(u(rng) * 3.0) % 3;
      x0 = -60.0 + 80.0 * u(rng);
      bool ok = true;
      for (double x : lane_x[static_cast<std::size_t>(lane)]) ok = ok && std::abs(x - x0) >= 20.0;
      if (ok || attempt > 50) break;
    }
    lane_x[static_cast<std::size_t>(lane)].push_back(x0);
    const double v = lane_speed[lane] + 0.6 * (u(rng) - 0.5);
    SceneAgent ag = make_agent(index * 10 + j + 1, random_vehicle(rng), horizon, dt);
    AgentState s = make_state(x0, (lane - 1) * kLaneWidth, 0.0, v);
    for (int t = 0; t < horizon; ++t) {
      ag.trajectory.states.push_back(s);
      s = bicycle_step(s, {0.0, 0.0}, ag.attributes.rear_axis_offset, dt);
    }
    sc.agents.push_back(std::move(ag));
  }
  return sc;
}

// Pure pursuit on the trunk (y = 0, x < 0) and the chosen branch.
Scene fork_scene(int index, std::mt19937_64& rng, int t_obs, int horizon, double dt,
                 const MapData& map, SynthInfo& info) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Scene sc;
  sc.id = index;
  sc.map = map;
  sc.t_obs = t_obs;
  sc.horizon = horizon;
  sc.dt = dt;
  const double v = 8.0 + 4.0 * u(rng);
  info.branch = u(rng) < 0.5 ? 1 : -1;
  info.at_fork = u(rng) < 0.78;
  const double future = (horizon - t_obs) * dt * v;
  const double x_obs = info.at_fork ? -20.0 + 12.0 * u(rng) : -30.0 + 22.0 * u(rng) - future;
  const double x0 = x_obs - (t_obs - 1) * dt * v;
  const double y0 = 0.6 * (u(rng) - 0.5);
  SceneAgent ag = make_agent(index * 10 + 1, random_vehicle(rng), horizon, dt);
  const double slope = info.branch * std::tan(kForkAngle);
  AgentState s = make_state(x0, y0, 0.0, v);
  for (int t = 0; t < horizon; ++t) {
    ag.trajectory.states.push_back(s);
    const double xl = s.x + 8.0;
    const double yl = xl <= 0.0 ? 0.0 : slope * xl;
    const double bearing = std::atan2(yl - s.y, xl - s.x);
    const double beta = std::clamp(wrap_angle(bearing - s.psi), -0.35, 0.35);
    s = bicycle_step(s, {0.0, beta}, ag.attributes.rear_axis_offset, dt);
  }
  info.final_offset = std::abs(ag.trajectory.states.back().y);
  sc.agents.push_back(std::move(ag));
  return sc;
}

// Counter-clockwise circulation with an exit at angle 0 onto a road heading north.
Scene roundabout_scene(int index, std::mt19937_64& rng, int t_obs, int horizon, double dt,
                       const MapData& map, SynthInfo& info) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Scene sc;
  sc.id = index;
  sc.map = map;
  sc.t_obs = t_obs;
  sc.horizon = horizon;
  sc.dt = dt;
  const double v = 6.0 + 3.0 * u(rng);
  info.branch = u(rng) < 0.5 ? 1 : 0;
  SceneAgent ag = make_agent(index * 10 + 1, random_vehicle(rng), horizon, dt);
  const double l_r = ag.attributes.rear_axis_offset;
  const double beta_ring = std::asin(l_r / kRingRadius);
  const double exit_step = t_obs + (horizon - t_obs - 10) * u(rng);
  const double theta0 = -v * dt * exit_step / kRingRadius;
  AgentState s = make_state(kRingRadius * std::cos(theta0), kRingRadius * std::sin(theta0),
                            theta0 + kPi / 2.0 - beta_ring, v);
  bool exited = false;
  for (int t = 0; t < horizon; ++t) {
    ag.trajectory.states.push_back(s);
    const double theta = std::atan2(s.y, s.x);
    if (info.branch == 1 && !exited && theta >= 0.0 && theta < kPi / 2.0) exited = true;
    s = bicycle_step(s, {0.0, exited ? 0.0 : beta_ring}, l_r, dt);
  }
  sc.agents.push_back(std::move(ag));
  return sc;
}

}  // namespace

SynthData synth_dataset(SynthKind kind, int n_scenes, std::uint64_t seed, int t_obs, int horizon,
                        double dt) {
  if (n_scenes < 1) throw Error("synth: n_scenes must be at least 1");
  if (t_obs < 1 || horizon <= t_obs) throw Error("synth: need 1 <= t_obs < horizon");
  SynthData d;
  d.map = kind == SynthKind::Straight ? straight_map()
          : kind == SynthKind::Fork   ? fork_map()
                                      : roundabout_map();
  for (int i = 0; i < n_scenes; ++i) {
    std::mt19937_64 rng(sim::stream_seed(seed, static_cast<std::uint64_t>(kind),
                                         static_cast<std::uint64_t>(i)));
    SynthInfo info;
    switch (kind) {
      case SynthKind::Straight:
        d.scenes.push_back(straight_scene(i, rng, t_obs, horizon, dt, d.map));
        break;
      case SynthKind::Fork:
        d.scenes.push_back(fork_scene(i, rng, t_obs, horizon, dt, d.map, info));
        break;
      case SynthKind::RoundaboutLite:
        d.scenes.push_back(roundabout_scene(i, rng, t_obs, horizon, dt, d.map, info));
        break;
    }
    d.info.push_back(info);
  }
  return d;
}

}  // namespace dsim::io
