#pragma once

#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "mimmx/layers.hpp"
#include "mimmx/tensor.hpp"

namespace mimmx {

struct DependenceEstimate {
  double value = 0.0;  // nats for MINE, [0, 1] for dCor
  std::size_t n = 0;
};

/// Raised when a MINE step produces non-finite statistics.
class MineOverflowError : public std::runtime_error {
 public:
  MineOverflowError(const std::string& what, double max_t)
      : std::runtime_error(what), max_t_(max_t) {}
  double max_t() const { return max_t_; }

 private:
  double max_t_;
};

/// T(x, z): two ELU hidden layers to a scalar.
class StatisticsNetwork {
 public:
  struct Cache {
    Tensor input, pre1, act1, pre2, act2;
  };

  StatisticsNetwork() = default;
  StatisticsNetwork(std::size_t input_dim, std::size_t hidden, Rng& rng);

  /// [batch, input_dim] -> [batch, 1]
  Tensor forward(const Tensor& input, Cache* cache) const;
  /// dT/dinput; parameter gradients are accumulated only if `accumulate`.
  Tensor backward(const Tensor& grad_t, const Cache& cache, bool accumulate);
  std::vector<Param*> params();

  std::size_t input_dim() const { return l1.in_features(); }

  Linear l1, l2, l3;
};

/// MINE estimator state: statistics network, moving-average denominator
/// and its optimizer.
class MineState {
 public:
  MineState(std::size_t x_dim, std::size_t z_dim, std::size_t hidden, double ema_decay,
            std::uint64_t seed, bool standardize_inputs = true);

  std::size_t x_dim() const { return x_dim_; }
  std::size_t z_dim() const { return z_dim_; }

  StatisticsNetwork net;
  double ema = 0.0;  // running E[e^T] under the product of marginals
  bool ema_initialized = false;
  double ema_decay = 0.99;
  Adam optimizer;
  // Per-batch, per-column standardization of x and z before T. MI is
  // unchanged by it, and the encoder cannot lower the bound by rescaling.
  bool standardize_inputs = true;

 private:
  std::size_t x_dim_ = 0, z_dim_ = 0;
};

/// Upper clip on T before exponentiation.
inline constexpr double kMineClip = 30.0;

/// Donsker-Varadhan estimate with marginal pairs (x_i, z_{(i+1) mod B}).
DependenceEstimate mine_estimate(const Tensor& x, const Tensor& z, const MineState& state);

struct MineGradient {
  DependenceEstimate estimate;
  Tensor grad_x;  // d estimate / d x
  Tensor grad_z;  // d estimate / d z
};

/// Estimate plus its gradient w.r.t. both inputs; network parameters are
/// left untouched.
MineGradient mine_estimate_with_grad(const Tensor& x, const Tensor& z, MineState& state);

/// One ascent step on the DV bound using the moving-average denominator
/// in the log-term gradient. Returns the batch estimate before the step.
DependenceEstimate mine_update(const Tensor& x, const Tensor& z, MineState& state,
                               double learning_rate);

/// Distance correlation (V-statistic, double-centered Euclidean distances).
DependenceEstimate dcor(const Tensor& a, const Tensor& b);

struct DcorGradient {
  DependenceEstimate estimate;
  Tensor grad_a;
  Tensor grad_b;
};
DcorGradient dcor_with_grad(const Tensor& a, const Tensor& b);

/// MI in nats of d independent bivariate Gaussian pairs with correlation rho.
double gaussian_mi(double rho, int d);

/// n samples of (x, z), each [n, d], with corr(x_j, z_j) = rho and
/// independent coordinates.
std::pair<Tensor, Tensor> correlated_gaussians(std::size_t n, double rho, std::size_t d,
                                               std::uint64_t seed);

struct MineFitOptions {
  std::size_t steps = 2000;
  std::size_t batch = 256;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

/// Trains `state` on minibatches of (x, z); returns per-step batch estimates.
std::vector<double> fit_mine(const Tensor& x, const Tensor& z, MineState& state,
                             const MineFitOptions& options);

/// Gathers rows `rows` of a rank-2 tensor.
Tensor take_rows(const Tensor& t, const std::vector<std::size_t>& rows);

}  // namespace mimmx
