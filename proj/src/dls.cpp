#include "mimmx/dls.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mimmx {

double alpha_y(const ScheduleState& s) {
  if (s.n_epoch <= 0) throw std::invalid_argument("alpha_y: n_epoch must be positive");
  return s.alpha_y_initial + (static_cast<double>(s.epoch) / s.n_epoch) * s.beta_y;
}

std::vector<double> gammas(std::span<const double> losses, double alpha_y_now, double alpha_z) {
  if (losses.empty()) throw std::invalid_argument("gammas: no task losses");
  for (double l : losses) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw std::invalid_argument("gammas: losses must be finite and >= 0");
  }
  const double mean = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
  std::vector<double> g(losses.size(), 1.0);
  if (mean <= 0.0) return g;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    g[i] = std::pow(losses[i] / mean, i == 0 ? alpha_y_now : alpha_z);
  }
  return g;
}

LossBreakdown total_loss(std::span<const double> task_losses, std::span<const double> g,
                         double mi_penalty, double lambda) {
  if (task_losses.size() != g.size()) throw std::invalid_argument("total_loss: one gamma per task loss");
  LossBreakdown out;
  out.task_losses.assign(task_losses.begin(), task_losses.end());
  out.gammas.assign(g.begin(), g.end());
  out.mi_penalty = mi_penalty;
  out.lambda = lambda;
  for (std::size_t i = 0; i < g.size(); ++i) out.total += g[i] * task_losses[i];
  out.total += lambda * mi_penalty;
  if (!std::isfinite(out.total)) throw std::invalid_argument("total_loss: non-finite inputs");
  return out;
}

}  // namespace mimmx
