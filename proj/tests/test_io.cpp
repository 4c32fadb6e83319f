#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dsim/fitting.hpp"
#include "dsim/io.hpp"
#include "dsim/rasterizer.hpp"

using namespace dsim;
using namespace dsim::io;

namespace {

const char* kHeader = "track_id,frame_id,timestamp_ms,agent_type,x,y,vx,vy,psi_rad,length,width\n";

std::string track_rows(int id, int first, int count, double vx = 3, double vy = 4) {
  std::ostringstream s;
  for (int f = first; f < first + count; ++f) {
    s << id << ',' << f << ',' << f * 100 << ",car," << 0.1 * f << ",0," << vx << ',' << vy
      << ",0,4.5,1.8\n";
  }
  return s.str();
}

std::vector<Scene> parse(const std::string& text, Windowing w = {}) {
  std::istringstream in(text);
  w.fit_lr = false;
  return parse_tracks(in, w, {});
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

std::filesystem::path tmp(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("dsim_test_io_" + name);
}

}  // namespace

TEST(LoadTracks, SingleFullTrack) {
  const auto scenes = parse(std::string(kHeader) + track_rows(5, 0, 40));
  ASSERT_EQ(scenes.size(), 1u);
  ASSERT_EQ(scenes[0].agents.size(), 1u);
  EXPECT_EQ(scenes[0].agents[0].id, 5);
  EXPECT_TRUE(scenes[0].agents[0].trajectory.fully_valid());
  EXPECT_DOUBLE_EQ(scenes[0].agents[0].trajectory.states[0].v, 5.0);
}

TEST(LoadTracks, PartialTrackIsMasked) {
  const auto scenes = parse(std::string(kHeader) + track_rows(1, 0, 40) + track_rows(2, 1, 39));
  ASSERT_EQ(scenes.size(), 1u);
  ASSERT_EQ(scenes[0].agents.size(), 2u);
  const auto& tr = scenes[0].agents[1].trajectory;
  EXPECT_FALSE(tr.is_valid(0));
  for (std::size_t t = 1; t < 40; ++t) EXPECT_TRUE(tr.is_valid(t));
}

TEST(LoadTracks, SceneWithoutFullyValidAgentDropped) {
  EXPECT_TRUE(parse(std::string(kHeader) + track_rows(1, 0, 20) + track_rows(2, 20, 20)).empty());
}

TEST(LoadTracks, WindowsAndStride) {
  Windowing w;
  w.stride = 10;
  const auto scenes = parse(std::string(kHeader) + track_rows(1, 0, 60), w);
  ASSERT_EQ(scenes.size(), 3u);
  EXPECT_NEAR(scenes[2].agents[0].trajectory.states[0].x, 2.0, 1e-12);
}

TEST(LoadTracks, EmptyFileGivesNoScenes) {
  EXPECT_TRUE(parse("").empty());
  EXPECT_TRUE(parse(kHeader).empty());
}

TEST(LoadTracks, Errors) {
  EXPECT_NE(error_of([] { parse("track_id,frame_id,timestamp_ms,agent_type,x,y,vx,psi_rad,length,width\n"); })
                .find("'vy'"),
            std::string::npos);
  const std::string bad_order = std::string(kHeader) + "3,5,500,car,0,0,1,0,0,4,2\n3,4,400,car,0,0,1,0,0,4,2\n";
  const auto e = error_of([&] { parse(bad_order); });
  EXPECT_NE(e.find("track_id 3"), std::string::npos) << e;
  EXPECT_NE(error_of([] { parse(std::string(kHeader) + "1,0,0,car,zero,0,1,0,0,4,2\n"); }).find(":2"),
            std::string::npos);
  EXPECT_FALSE(error_of([] { parse(std::string(kHeader) + "1,0,0,car,0,0,1,0,0,4,2\n1,1,250,car,0,0,1,0,0,4,2\n"); })
                   .empty());
  EXPECT_FALSE(error_of([] { parse(std::string(kHeader) + "1,0,0,tram,0,0,1,0,0,4,2\n"); }).empty());
  EXPECT_THROW(load_tracks("/nonexistent/tracks.csv", {}), Error);
}

TEST(LoadTracks, DeterministicOrderIndependentOfRowOrder) {
  const auto a = parse(std::string(kHeader) + track_rows(2, 0, 40) + track_rows(1, 0, 40));
  const auto b = parse(std::string(kHeader) + track_rows(1, 0, 40) + track_rows(2, 0, 40));
  ASSERT_EQ(a[0].agents.size(), 2u);
  EXPECT_EQ(a[0].agents[0].id, 1);
  EXPECT_EQ(b[0].agents[0].id, 1);
}

TEST(LoadMap, Examples) {
  std::istringstream empty("# nothing\n\n");
  const MapData e = parse_map(empty);
  EXPECT_TRUE(e.driveable_polygons.empty());
  EXPECT_TRUE(e.lane_lines.empty());
  std::istringstream sq("polygon 0 0 1 0 1 1 0 1\npolyline 0.2 0 0 1 0 2 0 3 0 4 0\n");
  const MapData m = parse_map(sq);
  ASSERT_EQ(m.driveable_polygons.size(), 1u);
  EXPECT_EQ(m.driveable_polygons[0].size(), 4u);
  ASSERT_EQ(m.lane_lines.size(), 1u);
  EXPECT_EQ(m.lane_lines[0].points.size(), 5u);
  const raster::AgentView ego{1, {}, make_state(0, 0, 0, 0), true};
  const auto prims = raster::build_primitives(m, std::span(&ego, 1), 0);
  ASSERT_EQ(prims.size(), 3u);
  EXPECT_DOUBLE_EQ(prims[1].half_width, 0.1);
}

TEST(LoadMap, Errors) {
  std::istringstream two("polygon 0 0 1 1\n");
  EXPECT_THROW(parse_map(two), Error);
  std::istringstream bad("# header\npolygon 0 0 1 x 1 1\n");
  const auto e = error_of([&] { parse_map(bad, "m.txt"); });
  EXPECT_NE(e.find("m.txt:2"), std::string::npos) << e;
  std::istringstream unknown("circle 0 0 1\n");
  EXPECT_THROW(parse_map(unknown), Error);
}

TEST(LoadMap, SaveRoundTrip) {
  const auto d = synth_dataset(SynthKind::Fork, 1, 0);
  const auto p = tmp("map.txt");
  save_map(d.map, p.string());
  const MapData m = load_map(p.string());
  ASSERT_EQ(m.driveable_polygons.size(), d.map.driveable_polygons.size());
  for (std::size_t i = 0; i < m.driveable_polygons.size(); ++i) {
    EXPECT_EQ(m.driveable_polygons[i], d.map.driveable_polygons[i]);
  }
  ASSERT_EQ(m.lane_lines.size(), d.map.lane_lines.size());
  EXPECT_EQ(m.lane_lines[0].width, d.map.lane_lines[0].width);
}

namespace {

sim::RolloutResult fake_result(int scene_id, int k, int agents, int steps, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 10);
  sim::RolloutResult r;
  r.scene_id = scene_id;
  r.t_obs = 10;
  r.horizon = 10 + steps;
  for (int s = 0; s < k; ++s) {
    sim::SampleResult sr;
    for (int a = 0; a < agents; ++a) {
      sim::AgentPrediction p;
      p.agent_id = 100 + a;
      for (int t = 0; t < steps; ++t) p.states.push_back({n(rng), n(rng), n(rng), n(rng)});
      sr.agents.push_back(p);
    }
    r.samples.push_back(sr);
  }
  return r;
}

int data_rows(const std::string& path) {
  std::ifstream in(path);
  std::string line;
  int rows = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] != '#') ++rows;
  }
  return rows - 1;
}

void expect_same(const std::vector<sim::RolloutResult>& a, const std::vector<sim::RolloutResult>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].scene_id, b[i].scene_id);
    EXPECT_EQ(a[i].t_obs, b[i].t_obs);
    EXPECT_EQ(a[i].horizon, b[i].horizon);
    ASSERT_EQ(a[i].samples.size(), b[i].samples.size());
    for (std::size_t k = 0; k < a[i].samples.size(); ++k) {
      ASSERT_EQ(a[i].samples[k].agents.size(), b[i].samples[k].agents.size());
      for (std::size_t j = 0; j < a[i].samples[k].agents.size(); ++j) {
        const auto& pa = a[i].samples[k].agents[j];
        const auto& pb = b[i].samples[k].agents[j];
        EXPECT_EQ(pa.agent_id, pb.agent_id);
        ASSERT_EQ(pa.states.size(), pb.states.size());
        for (std::size_t t = 0; t < pa.states.size(); ++t) {
          EXPECT_NEAR(pa.states[t].x, pb.states[t].x, 1e-12);
          EXPECT_NEAR(pa.states[t].y, pb.states[t].y, 1e-12);
          EXPECT_NEAR(pa.states[t].psi, pb.states[t].psi, 1e-12);
          EXPECT_NEAR(pa.states[t].v, pb.states[t].v, 1e-12);
        }
      }
    }
  }
}

}  // namespace

TEST(ExportRollouts, RowCountAndRoundTrip) {
  const std::vector<sim::RolloutResult> res{fake_result(4, 6, 3, 30, 1)};
  const ExportMeta meta{7, "generative", 0xdeadbeefULL};
  const auto csv = tmp("roll.csv").string();
  export_rollouts(res, meta, csv, ExportFormat::Csv);
  EXPECT_EQ(data_rows(csv), 540);
  const auto back = import_rollouts(csv);
  EXPECT_EQ(back.meta.seed, 7u);
  EXPECT_EQ(back.meta.mode, "generative");
  EXPECT_EQ(back.meta.model_checksum, 0xdeadbeefULL);
  expect_same(res, back.results);
  const auto js = tmp("roll.json").string();
  export_rollouts(res, meta, js, ExportFormat::Json);
  const auto back2 = import_rollouts(js);
  EXPECT_EQ(back2.meta.model_checksum, 0xdeadbeefULL);
  expect_same(res, back2.results);
}

TEST(ExportRollouts, MultipleScenesRoundTrip) {
  const std::vector<sim::RolloutResult> res{fake_result(1, 2, 2, 5, 2), fake_result(2, 3, 1, 5, 3)};
  const auto csv = tmp("multi.csv").string();
  export_rollouts(res, {}, csv, format_for_path(csv));
  expect_same(res, import_rollouts(csv).results);
}

TEST(ExportRollouts, EmptyResultIsHeaderOnly) {
  const auto csv = tmp("empty.csv").string();
  export_rollouts({}, {}, csv, ExportFormat::Csv);
  EXPECT_EQ(data_rows(csv), 0);
  EXPECT_TRUE(import_rollouts(csv).results.empty());
}

TEST(ExportRollouts, UnwritablePath) {
  EXPECT_THROW(export_rollouts({}, {}, "/nonexistent/dir/x.csv", ExportFormat::Csv), Error);
}

TEST(Synth, StraightHasZeroSteering) {
  const auto d = synth_dataset(SynthKind::Straight, 50, 3);
  for (const auto& sc : d.scenes) {
    for (const auto& a : sc.agents) {
      for (const auto& act : fitting::recover_actions(a.trajectory, a.attributes.rear_axis_offset)) {
        EXPECT_LT(std::abs(act.beta), 1e-9);
      }
    }
  }
}

TEST(Synth, ForkBranchRatio) {
  const auto d = synth_dataset(SynthKind::Fork, 1000, 11);
  int left = 0;
  for (const auto& i : d.info) left += i.branch > 0;
  EXPECT_GE(left / 1000.0, 0.45);
  EXPECT_LE(left / 1000.0, 0.55);
}

TEST(Synth, AllKindsFitExactly) {
  for (auto kind : {SynthKind::Straight, SynthKind::Fork, SynthKind::RoundaboutLite}) {
    const auto d = synth_dataset(kind, 15, 5);
    for (const auto& sc : d.scenes) {
      validate(sc);
      for (const auto& a : sc.agents) {
        const auto fit = fitting::fit(a.trajectory, a.attributes.length);
        EXPECT_LT(fit.fit_loss, 1e-9) << to_string(kind);
        double steer = 0.0;
        for (const auto& act : fit.actions) steer = std::max(steer, std::abs(act.beta));
        // l_r is only identifiable when the vehicle steers.
        if (steer > 1e-3) {
          EXPECT_LE(std::abs(fit.l_r - a.attributes.rear_axis_offset), fitting::kLrGridStep + 1e-12)
              << to_string(kind);
        }
        for (std::size_t t = 0; t < a.trajectory.size(); ++t) {
          EXPECT_LT(std::hypot(fit.replayed.states[t].x - a.trajectory.states[t].x,
                               fit.replayed.states[t].y - a.trajectory.states[t].y),
                    1e-9);
        }
      }
    }
  }
}

TEST(Synth, ForkScenesReachJunction) {
  const auto d = synth_dataset(SynthKind::Fork, 200, 9);
  int at_fork = 0;
  for (std::size_t i = 0; i < d.scenes.size(); ++i) {
    const auto& tr = d.scenes[i].agents[0].trajectory.states;
    if (d.info[i].at_fork) {
      ++at_fork;
      EXPECT_GT(tr.back().x, 0.0);
      EXPECT_GT(tr.back().y * d.info[i].branch, 0.0);
    } else {
      EXPECT_LE(tr.back().x, -8.0 + 1e-9);
    }
  }
  EXPECT_GT(at_fork, 120);
  EXPECT_LT(at_fork, 190);
}

TEST(Synth, Deterministic) {
  const auto a = synth_dataset(SynthKind::Straight, 5, 42);
  const auto b = synth_dataset(SynthKind::Straight, 5, 42);
  const auto c = synth_dataset(SynthKind::Straight, 5, 43);
  EXPECT_EQ(a.scenes[3].agents[0].trajectory.states[7].x, b.scenes[3].agents[0].trajectory.states[7].x);
  EXPECT_NE(a.scenes[3].agents[0].trajectory.states[7].x, c.scenes[3].agents[0].trajectory.states[7].x);
  EXPECT_THROW(synth_dataset(SynthKind::Fork, 0, 1), Error);
}

TEST(Synth, TrackFileRoundTrip) {
  const auto d = synth_dataset(SynthKind::Straight, 6, 8);
  const auto p = tmp("tracks.csv").string();
  save_tracks(d.scenes, p);
  const auto back = load_tracks(p, {}, d.map);
  ASSERT_EQ(back.size(), d.scenes.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].id, d.scenes[i].id);
    ASSERT_EQ(back[i].agents.size(), d.scenes[i].agents.size());
    for (std::size_t j = 0; j < back[i].agents.size(); ++j) {
      const auto& x = back[i].agents[j];
      const auto& y = d.scenes[i].agents[j];
      EXPECT_EQ(x.id, y.id);
      EXPECT_EQ(x.attributes.rear_axis_offset, y.attributes.rear_axis_offset);
      for (std::size_t t = 0; t < x.trajectory.size(); ++t) {
        EXPECT_EQ(x.trajectory.states[t].x, y.trajectory.states[t].x);
        EXPECT_NEAR(x.trajectory.states[t].v, y.trajectory.states[t].v, 1e-12);
      }
    }
  }
}

TEST(Synth, FittedLrWhenColumnMissing) {
  const auto d = synth_dataset(SynthKind::Fork, 3, 4);
  std::ostringstream text;
  text << kHeader;
  long long frame = 0;
  for (const auto& sc : d.scenes) {
    const auto& a = sc.agents[0];
    for (std::size_t t = 0; t < a.trajectory.size(); ++t, ++frame) {
      const auto& s = a.trajectory.states[t];
      char buf[512];
      std::snprintf(buf, sizeof buf, "%d,%lld,%lld,car,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", a.id,
                    frame, frame * 100, s.x, s.y, s.v * std::cos(s.psi), s.v * std::sin(s.psi), s.psi,
                    a.attributes.length, a.attributes.width);
      text << buf;
    }
  }
  std::istringstream in(text.str());
  const auto back = parse_tracks(in, {}, {});
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_LE(std::abs(back[i].agents[0].attributes.rear_axis_offset -
                       d.scenes[i].agents[0].attributes.rear_axis_offset),
              fitting::kLrGridStep + 1e-12);
  }
}
