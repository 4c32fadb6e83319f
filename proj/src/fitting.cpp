#include "dsim/fitting.hpp"

#include <cmath>

#include "dsim/parallel.hpp"

namespace dsim::fitting {

Recovery recover(std::span<const AgentState> gt, double l_r, double dt) {
  if (gt.size() < 2) throw Error("recover_actions: need at least 2 valid steps");
  if (!(dt > 0.0)) throw Error("recover_actions: dt must be positive");
  if (!(l_r > 0.0)) throw Error("recover_actions: l_r must be positive");
  Recovery r;
  r.actions.reserve(gt.size() - 1);
  r.replayed.reserve(gt.size());
  r.replayed.push_back(gt[0]);
  for (std::size_t t = 1; t < gt.size(); ++t) {
    const AgentState& prev = r.replayed.back();
    const BicycleAction a =
        displacement_to_bicycle(prev, gt[t].x - prev.x, gt[t].y - prev.y, dt);
    r.actions.push_back(a);
    r.replayed.push_back(bicycle_step(prev, a, l_r, dt));
  }
  return r;
}

std::vector<AgentState> valid_states(const Trajectory& traj) {
  std::size_t first = 0;
  while (first < traj.size() && !traj.is_valid(first)) ++first;
  std::size_t last = first;
  while (last < traj.size() && traj.is_valid(last)) ++last;
  for (std::size_t t = last; t < traj.size(); ++t) {
    if (traj.is_valid(t)) throw Error("fitting: trajectory has gaps");
  }
  return {traj.states.begin() + static_cast<std::ptrdiff_t>(first),
          traj.states.begin() + static_cast<std::ptrdiff_t>(last)};
}

std::vector<BicycleAction> recover_actions(const Trajectory& traj, double l_r) {
  return recover(valid_states(traj), l_r, traj.dt).actions;
}

Trajectory replay(const AgentState& start, std::span<const BicycleAction> actions,
                  double l_r, double dt) {
  Trajectory out;
  out.dt = dt;
  out.states.reserve(actions.size() + 1);
  out.states.push_back(start);
  for (const BicycleAction& a : actions) {
    out.states.push_back(bicycle_step(out.states.back(), a, l_r, dt));
  }
  out.valid.assign(out.states.size(), true);
  return out;
}

double fit_loss(std::span<const double> replayed_psi,
                std::span<const double> gt_psi) {
  if (replayed_psi.size() != gt_psi.size()) {
    throw Error("fit_loss: sequence lengths differ");
  }
  double worst = 0.0;
  for (std::size_t t = 0; t < gt_psi.size(); ++t) {
    worst = std::max(worst, 2.0 * (1.0 - std::cos(replayed_psi[t] - gt_psi[t])));
  }
  return worst;
}

std::vector<double> lr_candidates(double length) {
  if (!(length > 0.0)) throw Error("grid_search_lr: length must be positive");
  const auto count =
      static_cast<long>(std::floor(length / 2.0 / kLrGridStep + 1e-9));
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(std::max(count, 0L)));
  for (long k = 1; k <= count; ++k) out.push_back(kLrGridStep * static_cast<double>(k));
  if (out.empty()) throw Error("grid_search_lr: vehicle shorter than one grid step");
  return out;
}

namespace {

double loss_for(std::span<const AgentState> gt, double l_r, double dt) {
  const Recovery r = recover(gt, l_r, dt);
  double worst = 0.0;
  for (std::size_t t = 1; t < gt.size(); ++t) {
    worst = std::max(worst, 2.0 * (1.0 - std::cos(r.replayed[t].psi - gt[t].psi)));
  }
  return worst;
}

}  // namespace

GridSearchResult grid_search_lr(const Trajectory& traj, double length,
                                int threads) {
  const std::vector<AgentState> gt = valid_states(traj);
  if (gt.size() < 2) throw Error("grid_search_lr: need at least 2 valid steps");
  const std::vector<double> grid = lr_candidates(length);
  std::vector<double> losses(grid.size());
  parallel_for(grid.size(), threads,
               [&](std::size_t i) { losses[i] = loss_for(gt, grid[i], traj.dt); });
  GridSearchResult best{grid[0], losses[0]};
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (losses[i] <= best.fit_loss) best = {grid[i], losses[i]};
  }
  return best;
}

FitResult fit(const Trajectory& traj, double length, int threads) {
  const GridSearchResult g = grid_search_lr(traj, length, threads);
  const std::vector<AgentState> gt = valid_states(traj);
  Recovery r = recover(gt, g.l_r, traj.dt);
  FitResult out;
  out.actions = std::move(r.actions);
  out.l_r = g.l_r;
  out.fit_loss = g.fit_loss;
  out.replayed.dt = traj.dt;
  out.replayed.states = std::move(r.replayed);
  out.replayed.valid.assign(out.replayed.states.size(), true);
  return out;
}

std::vector<HistogramBin> histogram(std::span<const double> values, int bins,
                                    double lo, double hi) {
  if (bins <= 0 || !(hi > lo)) throw Error("histogram: bad bin specification");
  std::vector<HistogramBin> out(static_cast<std::size_t>(bins));
  const double width = (hi - lo) / bins;
  for (int b = 0; b < bins; ++b) {
    out[static_cast<std::size_t>(b)].lo = lo + b * width;
    out[static_cast<std::size_t>(b)].hi = lo + (b + 1) * width;
  }
  for (double v : values) {
    if (v < lo || v > hi) continue;
    auto b = static_cast<int>((v - lo) / width);
    if (b >= bins) b = bins - 1;
    ++out[static_cast<std::size_t>(b)].count;
  }
  return out;
}

}  // namespace dsim::fitting
