#include "dsim/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>

#include <json.hpp>

namespace dsim::metrics {

AdeForm parse_ade_form(const std::string& name) {
  if (name == "rms") return AdeForm::Rms;
  if (name == "mean-distance") return AdeForm::MeanDistance;
  throw Error("unknown ADE form '" + name + "' (expected rms or mean-distance)");
}

std::string to_string(AdeForm form) { return form == AdeForm::Rms ? "rms" : "mean-distance"; }

namespace {

void check_lengths(std::span<const Vec2> pred, std::span<const Vec2> gt) {
  if (pred.size() != gt.size()) {
    throw Error("metrics: prediction has " + std::to_string(pred.size()) +
                " steps, ground truth " + std::to_string(gt.size()));
  }
}

}  // namespace

double ade(std::span<const Vec2> pred, std::span<const Vec2> gt, AdeForm form,
           const std::vector<bool>& mask) {
  check_lengths(pred, gt);
  if (!mask.empty() && mask.size() != gt.size()) throw Error("ade: mask length mismatch");
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < pred.size(); ++t) {
    if (!mask.empty() && !mask[t]) continue;
    const double dx = pred[t].x - gt[t].x;
    const double dy = pred[t].y - gt[t].y;
    acc += form == AdeForm::Rms ? dx * dx + dy * dy : std::hypot(dx, dy);
    ++n;
  }
  if (n == 0) throw Error("ade: empty horizon");
  const double mean = acc / static_cast<double>(n);
  return form == AdeForm::Rms ? std::sqrt(mean) : mean;
}

double fde(std::span<const Vec2> pred, std::span<const Vec2> gt) {
  check_lengths(pred, gt);
  if (pred.empty()) throw Error("fde: empty horizon");
  return norm(pred.back() - gt.back());
}

double min_ade(const Samples& samples, std::span<const Vec2> gt, AdeForm form,
               const std::vector<bool>& mask) {
  if (samples.empty()) throw Error("min_ade: need at least one sample");
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s : samples) best = std::min(best, ade(s, gt, form, mask));
  return best;
}

double min_fde(const Samples& samples, std::span<const Vec2> gt) {
  if (samples.empty()) throw Error("min_fde: need at least one sample");
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s : samples) best = std::min(best, fde(s, gt));
  return best;
}

double mfd(const Samples& samples) {
  double best = 0.0;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    if (samples[k].empty()) throw Error("mfd: empty sample");
    for (std::size_t l = k + 1; l < samples.size(); ++l) {
      if (samples[l].empty()) throw Error("mfd: empty sample");
      best = std::max(best, norm(samples[k].back() - samples[l].back()));
    }
  }
  return best;
}

MetricReport evaluate(const std::vector<Scene>& scenes,
                      const std::vector<sim::RolloutResult>& results, AdeForm form) {
  std::map<int, const Scene*> by_id;
  for (const auto& s : scenes) by_id[s.id] = &s;
  MetricReport rep;
  rep.form = form;
  double ade_sum = 0.0, fde_sum = 0.0, mfd_sum = 0.0;
  std::size_t n_ade = 0, n_final = 0;
  for (const auto& r : results) {
    const auto it = by_id.find(r.scene_id);
    if (it == by_id.end()) throw Error("evaluate: no scene with id " + std::to_string(r.scene_id));
    const Scene& sc = *it->second;
    if (r.samples.empty()) continue;
    if (rep.k == 0) rep.k = static_cast<int>(r.samples.size());
    SceneMetrics sm;
    sm.scene_id = r.scene_id;
    int scene_final = 0;
    for (std::size_t j = 0; j < r.samples[0].agents.size(); ++j) {
      const int agent_id = r.samples[0].agents[j].agent_id;
      const SceneAgent* ag = nullptr;
      for (const auto& a : sc.agents) {
        if (a.id == agent_id) ag = &a;
      }
      if (!ag) {
        throw Error("evaluate: scene " + std::to_string(sc.id) + " has no agent " +
                    std::to_string(agent_id));
      }
      std::vector<Vec2> gt;
      std::vector<bool> mask;
      for (int t = r.t_obs; t < r.horizon; ++t) {
        const auto ut = static_cast<std::size_t>(t);
        gt.push_back({ag->trajectory.states.at(ut).x, ag->trajectory.states.at(ut).y});
        mask.push_back(ag->trajectory.is_valid(ut));
      }
      Samples samples;
      for (const auto& s : r.samples) {
        if (j >= s.agents.size() || s.agents[j].agent_id != agent_id) {
          throw Error("evaluate: samples of scene " + std::to_string(sc.id) + " disagree on agents");
        }
        std::vector<Vec2> p;
        for (const auto& st : s.agents[j].states) p.push_back({st.x, st.y});
        samples.push_back(std::move(p));
      }
      if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; })) continue;
      AgentMetrics am;
      am.scene_id = sc.id;
      am.agent_id = agent_id;
      am.min_ade = min_ade(samples, gt, form, mask);
      am.has_final = mask.back();
      if (am.has_final) {
        am.min_fde = min_fde(samples, gt);
        am.mfd = mfd(samples);
        fde_sum += am.min_fde;
        mfd_sum += am.mfd;
        ++n_final;
        sm.min_fde += am.min_fde;
        sm.mfd += am.mfd;
        ++scene_final;
      }
      ade_sum += am.min_ade;
      ++n_ade;
      sm.min_ade += am.min_ade;
      ++sm.agents;
      rep.agents.push_back(am);
    }
    if (sm.agents > 0) sm.min_ade /= sm.agents;
    if (scene_final > 0) {
      sm.min_fde /= scene_final;
      sm.mfd /= scene_final;
    }
    rep.scenes.push_back(sm);
  }
  if (n_ade > 0) rep.min_ade = ade_sum / static_cast<double>(n_ade);
  if (n_final > 0) {
    rep.min_fde = fde_sum / static_cast<double>(n_final);
    rep.mfd = mfd_sum / static_cast<double>(n_final);
  }
  return rep;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_report_csv(const MetricReport& rep, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write report '" + path + "'");
  const std::string k = std::to_string(rep.k);
  out << "# ade_form=" << to_string(rep.form) << "\n";
  out << "scene_id,agents,minADE_" << k << ",minFDE_" << k << ",MFD_" << k << "\n";
  for (const auto& s : rep.scenes) {
    out << s.scene_id << ',' << s.agents << ',' << fmt(s.min_ade) << ',' << fmt(s.min_fde) << ','
        << fmt(s.mfd) << '\n';
  }
  out << "all," << rep.agents.size() << ',' << fmt(rep.min_ade) << ',' << fmt(rep.min_fde) << ','
      << fmt(rep.mfd) << '\n';
  if (!out) throw RuntimeError("failed writing report '" + path + "'");
}

void write_report_json(const MetricReport& rep, const std::string& path) {
  nlohmann::json j;
  j["k"] = rep.k;
  j["ade_form"] = to_string(rep.form);
  j["minADE"] = rep.min_ade;
  j["minFDE"] = rep.min_fde;
  j["MFD"] = rep.mfd;
  auto& sc = j["scenes"] = nlohmann::json::array();
  for (const auto& s : rep.scenes) {
    sc.push_back({{"scene_id", s.scene_id}, {"agents", s.agents}, {"minADE", s.min_ade},
                  {"minFDE", s.min_fde}, {"MFD", s.mfd}});
  }
  auto& ag = j["agents"] = nlohmann::json::array();
  for (const auto& a : rep.agents) {
    ag.push_back({{"scene_id", a.scene_id}, {"agent_id", a.agent_id}, {"minADE", a.min_ade},
                  {"minFDE", a.min_fde}, {"MFD", a.mfd}, {"has_final", a.has_final}});
  }
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write report '" + path + "'");
  out << j.dump(1) << '\n';
  if (!out) throw RuntimeError("failed writing report '" + path + "'");
}

}  // namespace dsim::metrics
