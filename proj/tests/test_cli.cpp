#include <gtest/gtest.h>
#include <png.h>
#include <sys/wait.h>

#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dsim/io.hpp"
#include "dsim/rasterizer.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(DSIM_CLI_PATH) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return {-1, ""};
  std::string out;
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) out.append(buf.data(), n);
  const int st = pclose(p);
  return {WIFEXITED(st) ? WEXITSTATUS(st) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("dsim_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  fs::path dir_;
};

struct Png {
  int w = 0, h = 0;
  std::vector<unsigned char> rgb;
  std::array<int, 3> at(int r, int c) const {
    const auto* p = &rgb[static_cast<std::size_t>((r * w + c) * 3)];
    return {p[0], p[1], p[2]};
  }
};

Png read_png(const std::string& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  Png out;
  if (!png_image_begin_read_from_file(&img, path.c_str())) return out;
  img.format = PNG_FORMAT_RGB;
  out.w = static_cast<int>(img.width);
  out.h = static_cast<int>(img.height);
  out.rgb.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.rgb.data(), 0, nullptr)) out.w = out.h = 0;
  return out;
}

void write_single_agent(const std::string& path) {
  std::ofstream f(path);
  f << "track_id,frame_id,timestamp_ms,agent_type,x,y,vx,vy,psi_rad,length,width\n";
  for (int i = 0; i < 5; ++i) {
    f << "7," << i << ',' << i * 100 << ",car," << 3.0 + i << ",2.0,10,0,0.3,4.6,1.8\n";
  }
}

}  // namespace

TEST_F(CliTest, HelpDocumentsEveryFlag) {
  const std::map<std::string, std::vector<std::string>> flags = {
      {"", {"--seed", "--threads", "--log-level", "--config"}},
      {"fit-kinematics", {"--tracks", "--dt", "--out", "--hist", "--bins"}},
      {"render",
       {"--tracks", "--map", "--frame", "--ego", "--out", "--hard", "--dt", "--resolution",
        "--extent", "--sigma", "--gamma"}},
      {"train",
       {"--tracks", "--map", "--synth", "--scenes", "--synth-seed", "--dt", "--t-obs",
        "--horizon", "--stride", "--no-fit-lr", "--out", "--init", "--log", "--kinematic-mode",
        "--resolution", "--obs-sigma", "--epochs", "--batch-size", "--lr", "--clip-norm", "--mode",
        "--no-differentiable-birdview"}},
      {"rollout",
       {"--tracks", "--synth", "--model", "--out", "--format", "--k", "--mode", "--ego-index",
        "--noise-on-states", "--no-warmup", "--max-abs-alpha", "--max-abs-beta"}},
      {"evaluate", {"--tracks", "--synth", "--rollouts", "--k", "--ade-form", "--out", "--json"}},
      {"gradcheck", {"--suite", "--points"}},
      {"synth", {"--kind", "--scenes", "--t-obs", "--horizon", "--out", "--map-out"}},
  };
  const auto top = run("--help");
  ASSERT_EQ(top.code, 0);
  for (const auto& [sub, list] : flags) {
    if (!sub.empty()) EXPECT_NE(top.out.find(sub), std::string::npos) << sub;
    const auto h = run(sub.empty() ? "--help" : sub + " --help");
    ASSERT_EQ(h.code, 0) << sub;
    for (const auto& f : list) {
      const auto pos = h.out.find(f + " ");
      EXPECT_NE(pos, std::string::npos) << sub << ' ' << f;
    }
    // every option carries a description after its type and env annotations
    for (const auto& f : list) {
      const auto pos = h.out.find(f + " ");
      if (pos == std::string::npos) continue;
      auto end = h.out.find("\n  -", pos);
      std::string block = h.out.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
      const auto env = block.find("(Env:");
      if (env != std::string::npos) block = block.substr(block.find(')', env) + 1);
      else block = block.substr(block.find(' '));
      int letters = 0;
      for (char ch : block) letters += std::islower(static_cast<unsigned char>(ch)) ? 1 : 0;
      EXPECT_GT(letters, 3) << sub << ' ' << f;
    }
  }
}

TEST_F(CliTest, ExitCodes) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("bogus").code, 2);
  EXPECT_EQ(run("fit-kinematics --tracks " + path("missing.csv") + " --out " + path("o.csv")).code,
            2);
  ASSERT_EQ(run("synth --kind straight --scenes 3 --out " + path("s.csv")).code, 0);
  EXPECT_EQ(run("fit-kinematics --tracks " + path("s.csv") + " --dt 0 --out " + path("o.csv")).code,
            2);
  EXPECT_EQ(run("fit-kinematics --tracks " + path("s.csv") + " --out /nonexistent/dir/o.csv").code,
            3);
  EXPECT_EQ(run("render --tracks " + path("s.csv") + " --frame 3 --ego 4242 --out " + path("a.png"))
                .code,
            2);
  EXPECT_EQ(run("gradcheck --suite nope").code, 2);
  EXPECT_EQ(run("--threads 0 gradcheck").code, 2);
  EXPECT_EQ(run("rollout --model " + path("none.json") + " --synth fork --out " + path("r.csv"))
                .code,
            2);
}

TEST_F(CliTest, FitStraightIsExact) {
  ASSERT_EQ(run("--seed 4 synth --kind straight --scenes 8 --out " + path("s.csv")).code, 0);
  const auto r = run("fit-kinematics --tracks " + path("s.csv") + " --out " + path("fit.csv") +
                     " --hist " + path("h.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  std::ifstream f(path("fit.csv"));
  std::string line;
  std::getline(f, line);
  EXPECT_EQ(line, "track_id,length,l_r,l_r_ratio,fit_loss,steps");
  int rows = 0;
  while (std::getline(f, line)) {
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
    ASSERT_EQ(cols.size(), 6u);
    EXPECT_LT(std::stod(cols[4]), 1e-9) << line;
    ++rows;
  }
  EXPECT_GT(rows, 0);
  EXPECT_TRUE(fs::exists(path("h.csv")));
}

TEST_F(CliTest, RenderSingleAgentRedBoxCentred) {
  write_single_agent(path("one.csv"));
  ASSERT_EQ(run("render --tracks " + path("one.csv") + " --frame 2 --ego 7 --out " + path("a.png"))
                .code,
            0);
  const Png img = read_png(path("a.png"));
  ASSERT_EQ(img.w, 64);
  ASSERT_EQ(img.h, 64);
  const std::array<int, 3> red{255, 51, 51}, white{255, 255, 255};
  for (int r = 31; r <= 32; ++r)
    for (int c = 31; c <= 32; ++c) EXPECT_EQ(img.at(r, c), red);
  EXPECT_EQ(img.at(0, 0), white);
  EXPECT_EQ(img.at(63, 63), white);
  EXPECT_EQ(img.at(5, 32), white);
  ASSERT_EQ(run("render --hard --tracks " + path("one.csv") + " --frame 2 --ego 7 --out " +
                path("h.png"))
                .code,
            0);
  const Png hard = read_png(path("h.png"));
  ASSERT_EQ(hard.w, 64);
  // box is symmetric about the image centre and covers about length x width pixels
  int count = 0;
  for (int r = 0; r < 64; ++r)
    for (int c = 0; c < 64; ++c) {
      if (hard.at(r, c) == red) {
        ++count;
        EXPECT_EQ(hard.at(63 - r, 63 - c), red) << r << ',' << c;
        EXPECT_EQ(img.at(r, c), red) << r << ',' << c;
      }
    }
  EXPECT_NEAR(count, 4.6 * 1.8, 4.0);
}

TEST_F(CliTest, RenderSoftMatchesHardAwayFromEdges) {
  ASSERT_EQ(run("--seed 2 synth --kind fork --scenes 2 --out " + path("f.csv") + " --map-out " +
                path("f.map"))
                .code,
            0);
  const std::string base = "render --tracks " + path("f.csv") + " --map " + path("f.map") +
                           " --frame 12 --ego 1 --sigma 1e-6 --gamma 1e-4 ";
  ASSERT_EQ(run(base + "--out " + path("soft.png")).code, 0);
  ASSERT_EQ(run(base + "--hard --out " + path("hard.png")).code, 0);
  const Png s = read_png(path("soft.png")), h = read_png(path("hard.png"));
  ASSERT_EQ(s.w, h.w);
  ASSERT_EQ(s.w, 64);
  // interior: pixel centre at least 2 px from every primitive boundary
  const auto map = dsim::io::load_map(path("f.map"));
  std::vector<dsim::raster::AgentView> views;
  std::size_t ego = 0;
  for (const auto& t : dsim::io::read_tracks(path("f.csv"), 0.1)) {
    const long long k = 12 - t.first_frame;
    if (k < 0 || !t.trajectory.is_valid(static_cast<std::size_t>(k))) continue;
    if (t.id == 1) ego = views.size();
    views.push_back({t.id, t.attributes, t.trajectory.states[static_cast<std::size_t>(k)], true});
  }
  const auto prims = dsim::raster::build_primitives(map, views, ego);
  const auto cfg = dsim::raster::toy_config();
  int interior = 0;
  for (int r = 0; r < 64; ++r)
    for (int c = 0; c < 64; ++c) {
      const auto q = dsim::raster::pixel_center(r, c, cfg);
      bool near = false;
      for (const auto& p : prims) near |= std::abs(dsim::raster::signed_distance(q, p)) < 2 * cfg.pixel_m();
      if (near) continue;
      ++interior;
      EXPECT_EQ(s.at(r, c), h.at(r, c)) << r << ',' << c;
    }
  EXPECT_GT(interior, 1000);
}

TEST_F(CliTest, RepeatedInvocationsAreByteIdentical) {
  const std::string data = " --synth fork --scenes 3 --t-obs 4 --horizon 10 --synth-seed 5";
  for (int i = 0; i < 2; ++i) {
    const std::string s = std::to_string(i);
    ASSERT_EQ(run("--seed 7 synth --kind fork --scenes 3 --out " + path("s" + s + ".csv") +
                  " --map-out " + path("s" + s + ".map"))
                  .code,
              0);
    ASSERT_EQ(run("fit-kinematics --tracks " + path("s0.csv") + " --out " + path("f" + s + ".csv"))
                  .code,
              0);
    ASSERT_EQ(run("render --tracks " + path("s0.csv") + " --map " + path("s0.map") +
                  " --frame 3 --ego 1 --out " + path("p" + s + ".png"))
                  .code,
              0);
    ASSERT_EQ(run("--seed 3 --threads " + std::to_string(1 + i) + " train" + data +
                  " --epochs 2 --batch-size 2 --out " + path("m" + s + ".json") + " --log " +
                  path("l" + s + ".csv"))
                  .code,
              0);
    ASSERT_EQ(run("--seed 7 rollout --k 6" + data + " --model " + path("m0.json") + " --out " +
                  path("r" + s + ".csv"))
                  .code,
              0);
    ASSERT_EQ(run("--seed 7 rollout --k 6" + data + " --model " + path("m0.json") + " --out " +
                  path("r" + s + ".json"))
                  .code,
              0);
    ASSERT_EQ(run("evaluate --k 6" + data + " --rollouts " + path("r0.csv") + " --out " +
                  path("e" + s + ".csv") + " --json " + path("e" + s + ".json"))
                  .code,
              0);
  }
  for (const char* stem : {"s", "f", "p", "m", "l", "r", "e"}) {
    for (const char* ext : {".csv", ".map", ".png", ".json"}) {
      const fs::path a = dir_ / (std::string(stem) + "0" + ext), b = dir_ / (std::string(stem) + "1" + ext);
      if (!fs::exists(a)) continue;
      ASSERT_TRUE(fs::exists(b)) << b;
      EXPECT_EQ(slurp(a), slurp(b)) << a;
    }
  }
  EXPECT_NE(slurp(dir_ / "r0.csv"), "");
}

TEST_F(CliTest, EvaluateGroundTruthIsZero) {
  const auto d = dsim::io::synth_dataset(dsim::io::SynthKind::Fork, 3, 11, 5, 12);
  std::vector<dsim::sim::RolloutResult> results;
  for (const auto& s : d.scenes) {
    dsim::sim::RolloutResult r;
    r.scene_id = s.id;
    r.t_obs = s.t_obs;
    r.horizon = s.horizon;
    for (int k = 0; k < 6; ++k) {
      dsim::sim::SampleResult sr;
      for (std::size_t i = 0; i < s.agents.size(); ++i) {
        dsim::sim::AgentPrediction p;
        p.agent_id = s.agents[i].id;
        p.agent_index = i;
        const auto& st = s.agents[i].trajectory.states;
        p.states.assign(st.begin() + s.t_obs, st.end());
        sr.agents.push_back(std::move(p));
      }
      r.samples.push_back(std::move(sr));
    }
    results.push_back(std::move(r));
  }
  dsim::io::export_rollouts(results, {11, "generative", 0}, path("gt.csv"),
                            dsim::io::ExportFormat::Csv);
  const auto r = run("evaluate --synth fork --scenes 3 --synth-seed 11 --t-obs 5 --horizon 12 "
                     "--k 6 --rollouts " + path("gt.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("minADE_6 0.000000 minFDE_6 0.000000 MFD_6 0.000000"), std::string::npos)
      << r.out;
}

TEST_F(CliTest, GradcheckKinematics) {
  const auto r = run("gradcheck --suite kinematics --points 20");
  EXPECT_EQ(r.code, 0);
  const auto pos = r.out.find("max_error ");
  ASSERT_NE(pos, std::string::npos);
  EXPECT_LT(std::stod(r.out.substr(pos + 10)), 1e-6);
}

TEST_F(CliTest, ConfigAndEnvironmentPrecedence) {
  {
    std::ofstream c(path("c.ini"));
    c << "[gradcheck]\npoints = 2\nsuite = kinematics\n";
  }
  auto r = run("--config " + path("c.ini") + " gradcheck");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("kinematics points 2 "), std::string::npos) << r.out;
  r = run("--config " + path("c.ini") + " gradcheck --points 3");
  EXPECT_NE(r.out.find("kinematics points 3 "), std::string::npos) << r.out;
  r = run("gradcheck --suite kinematics --points 4");
  EXPECT_NE(r.out.find("points 4 "), std::string::npos);
  const std::string env = "env DSIM_POINTS=5 " + std::string(DSIM_CLI_PATH);
  FILE* p = popen((env + " gradcheck --suite kinematics").c_str(), "r");
  ASSERT_NE(p, nullptr);
  char buf[256] = {};
  const std::size_t n = fread(buf, 1, sizeof buf - 1, p);
  pclose(p);
  EXPECT_NE(std::string(buf, n).find("points 5 "), std::string::npos);
}
