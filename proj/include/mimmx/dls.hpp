#pragma once

#include <span>
#include <vector>

namespace mimmx {

struct ScheduleState {
  int epoch = 0;
  int n_epoch = 1;
  double alpha_y_initial = 0.3;
  double beta_y = 0.01;
  double alpha_z = 0.8;
};

/// Primary-task exponent, growing linearly from alpha_y_initial to
/// alpha_y_initial + beta_y over the run.
double alpha_y(const ScheduleState& state);

/// Dynamic loss scales: gamma_i = (L_i / mean(L))^alpha, alpha_y for the
/// primary loss (index 0) and alpha_z for the rest. All-zero losses give 1.
std::vector<double> gammas(std::span<const double> task_losses, double alpha_y_now, double alpha_z);

struct LossBreakdown {
  std::vector<double> task_losses;  // L_0..L_N
  std::vector<double> gammas;       // gamma_0..gamma_N
  double mi_penalty = 0.0;
  double lambda = 0.0;
  double total = 0.0;
};

/// sum_i gamma_i L_i + lambda * penalty. Throws on non-finite inputs.
LossBreakdown total_loss(std::span<const double> task_losses, std::span<const double> gammas,
                         double mi_penalty, double lambda);

}  // namespace mimmx
