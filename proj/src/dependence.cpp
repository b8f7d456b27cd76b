#include "mimmx/dependence.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>

#include "mimmx/kernels.hpp"

namespace mimmx {

// ---------------------------------------------------------------------------
// Statistics network

StatisticsNetwork::StatisticsNetwork(std::size_t input_dim, std::size_t hidden, Rng& rng)
    : l1("mine.fc1", input_dim, hidden), l2("mine.fc2", hidden, hidden), l3("mine.fc3", hidden, 1) {
  l1.init(rng, 1.0);
  l2.init(rng, 1.0);
  l3.init(rng, 0.5);
}

Tensor StatisticsNetwork::forward(const Tensor& input, Cache* cache) const {
  Tensor pre1 = l1.forward(input);
  Tensor act1 = elu(pre1);
  Tensor pre2 = l2.forward(act1);
  Tensor act2 = elu(pre2);
  Tensor t = l3.forward(act2);
  if (cache != nullptr) {
    cache->input = input;
    cache->pre1 = std::move(pre1);
    cache->act1 = std::move(act1);
    cache->pre2 = std::move(pre2);
    cache->act2 = std::move(act2);
  }
  return t;
}

Tensor StatisticsNetwork::backward(const Tensor& grad_t, const Cache& c, bool accumulate) {
  // Parameter gradients land in the Param buffers; restore them afterwards
  // when the caller only wants input gradients.
  std::vector<Tensor> saved;
  if (!accumulate) {
    for (Param* p : params()) saved.push_back(p->grad);
  }
  Tensor g = l3.backward(c.act2, grad_t);
  g = l2.backward(c.act1, elu_backward(c.pre2, g));
  g = l1.backward(c.input, elu_backward(c.pre1, g));
  if (!accumulate) {
    auto ps = params();
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->grad = std::move(saved[i]);
  }
  return g;
}

std::vector<Param*> StatisticsNetwork::params() {
  return {&l1.weight, &l1.bias, &l2.weight, &l2.bias, &l3.weight, &l3.bias};
}

MineState::MineState(std::size_t x_dim, std::size_t z_dim, std::size_t hidden, double decay,
                     std::uint64_t seed, bool standardize)
    : ema_decay(decay), standardize_inputs(standardize), x_dim_(x_dim), z_dim_(z_dim) {
  Rng rng(seed);
  net = StatisticsNetwork(x_dim + z_dim, hidden, rng);
}

// ---------------------------------------------------------------------------
// MINE

namespace {

constexpr double kStandardizeEps = 1e-5;

struct Standardized {
  Tensor u;
  std::vector<double> inv_std;
};

Standardized standardize(const Tensor& v) {
  const std::size_t n = v.rows(), d = v.cols();
  Standardized s{Tensor({n, d}), std::vector<double>(d)};
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += v(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (v(i, j) - mean) * (v(i, j) - mean);
    var /= static_cast<double>(n);
    s.inv_std[j] = 1.0 / std::sqrt(var + kStandardizeEps);
    for (std::size_t i = 0; i < n; ++i) s.u(i, j) = (v(i, j) - mean) * s.inv_std[j];
  }
  return s;
}

// d/dv given d/du for u = standardize(v).
Tensor standardize_backward(const Standardized& s, const Tensor& g) {
  const std::size_t n = g.rows(), d = g.cols();
  Tensor out({n, d});
  for (std::size_t j = 0; j < d; ++j) {
    double mg = 0.0, mgu = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mg += g(i, j);
      mgu += g(i, j) * s.u(i, j);
    }
    mg /= static_cast<double>(n);
    mgu /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) out(i, j) = s.inv_std[j] * (g(i, j) - mg - s.u(i, j) * mgu);
  }
  return out;
}

void check_inputs(const Tensor& x, const Tensor& z, const MineState& s) {
  if (x.rank() != 2 || z.rank() != 2 || x.rows() != z.rows()) {
    throw std::invalid_argument("MINE inputs must be [batch, dim] with equal batch sizes");
  }
  if (x.rows() < 2) throw std::invalid_argument("MINE needs a batch of at least 2 for the marginal shuffle");
  if (x.cols() != s.x_dim() || z.cols() != s.z_dim()) {
    throw std::invalid_argument("MINE input widths do not match the statistics network");
  }
}

struct PairedInputs {
  Tensor joint;
  Tensor marginal;
};

// Expects already checked (and, if configured, standardized) inputs.
PairedInputs pair_inputs(const Tensor& x, const Tensor& z) {
  const std::size_t b = x.rows(), dx = x.cols(), dz = z.cols();
  PairedInputs p{Tensor({b, dx + dz}), Tensor({b, dx + dz})};
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t shifted = (i + 1) % b;
    for (std::size_t j = 0; j < dx; ++j) p.joint(i, j) = p.marginal(i, j) = x(i, j);
    for (std::size_t j = 0; j < dz; ++j) {
      p.joint(i, dx + j) = z(i, j);
      p.marginal(i, dx + j) = z(shifted, j);
    }
  }
  return p;
}

double max_value(const Tensor& t) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : t.values()) m = std::max(m, v);
  return m;
}

void check_finite(const Tensor& tj, const Tensor& tm) {
  for (const Tensor* t : {&tj, &tm}) {
    for (double v : t->values()) {
      if (!std::isfinite(v)) {
        throw MineOverflowError("MINE statistics are not finite (max T " +
                                    std::to_string(std::max(max_value(tj), max_value(tm))) + ")",
                                std::max(max_value(tj), max_value(tm)));
      }
    }
  }
}

// mean(T_joint) - log mean exp(min(T_marginal, clip)); also the softmax
// weights of the marginal term.
double dv_bound(const Tensor& tj, const Tensor& tm, std::vector<double>* softmax) {
  const std::size_t b = tj.rows();
  double mean_j = 0.0;
  for (std::size_t i = 0; i < b; ++i) mean_j += tj[i];
  mean_j /= static_cast<double>(b);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < b; ++i) mx = std::max(mx, std::min(tm[i], kMineClip));
  double s = 0.0;
  std::vector<double> e(b);
  for (std::size_t i = 0; i < b; ++i) s += (e[i] = std::exp(std::min(tm[i], kMineClip) - mx));
  if (softmax != nullptr) {
    softmax->resize(b);
    for (std::size_t i = 0; i < b; ++i) (*softmax)[i] = tm[i] > kMineClip ? 0.0 : e[i] / s;
  }
  return mean_j - (mx + std::log(s / static_cast<double>(b)));
}

}  // namespace

DependenceEstimate mine_estimate(const Tensor& x, const Tensor& z, const MineState& state) {
  check_inputs(x, z, state);
  const PairedInputs p = state.standardize_inputs ? pair_inputs(standardize(x).u, standardize(z).u)
                                                  : pair_inputs(x, z);
  const Tensor tj = state.net.forward(p.joint, nullptr);
  const Tensor tm = state.net.forward(p.marginal, nullptr);
  check_finite(tj, tm);
  return {dv_bound(tj, tm, nullptr), x.rows()};
}

MineGradient mine_estimate_with_grad(const Tensor& x, const Tensor& z, MineState& state) {
  check_inputs(x, z, state);
  std::optional<Standardized> sx, sz;
  if (state.standardize_inputs) {
    sx = standardize(x);
    sz = standardize(z);
  }
  const PairedInputs p = sx ? pair_inputs(sx->u, sz->u) : pair_inputs(x, z);
  StatisticsNetwork::Cache cj, cm;
  const Tensor tj = state.net.forward(p.joint, &cj);
  const Tensor tm = state.net.forward(p.marginal, &cm);
  check_finite(tj, tm);
  std::vector<double> w;
  MineGradient out;
  out.estimate = {dv_bound(tj, tm, &w), x.rows()};

  const std::size_t b = x.rows(), dx = x.cols(), dz = z.cols();
  Tensor gj({b, 1}), gm({b, 1});
  for (std::size_t i = 0; i < b; ++i) {
    gj[i] = 1.0 / static_cast<double>(b);
    gm[i] = -w[i];
  }
  const Tensor in_j = state.net.backward(gj, cj, false);
  const Tensor in_m = state.net.backward(gm, cm, false);
  out.grad_x = Tensor({b, dx});
  out.grad_z = Tensor({b, dz});
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t shifted = (i + 1) % b;
    for (std::size_t j = 0; j < dx; ++j) out.grad_x(i, j) = in_j(i, j) + in_m(i, j);
    for (std::size_t j = 0; j < dz; ++j) {
      out.grad_z(i, j) += in_j(i, dx + j);
      out.grad_z(shifted, j) += in_m(i, dx + j);
    }
  }
  if (sx) {
    out.grad_x = standardize_backward(*sx, out.grad_x);
    out.grad_z = standardize_backward(*sz, out.grad_z);
  }
  return out;
}

DependenceEstimate mine_update(const Tensor& x, const Tensor& z, MineState& state,
                               double learning_rate) {
  check_inputs(x, z, state);
  const PairedInputs p = state.standardize_inputs ? pair_inputs(standardize(x).u, standardize(z).u)
                                                  : pair_inputs(x, z);
  StatisticsNetwork::Cache cj, cm;
  const Tensor tj = state.net.forward(p.joint, &cj);
  const Tensor tm = state.net.forward(p.marginal, &cm);
  check_finite(tj, tm);
  const DependenceEstimate before{dv_bound(tj, tm, nullptr), x.rows()};

  const std::size_t b = x.rows();
  const double inv_b = 1.0 / static_cast<double>(b);
  std::vector<double> e(b);
  double mean_exp = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    e[i] = tm[i] > kMineClip ? 0.0 : std::exp(tm[i]);
    mean_exp += std::exp(std::min(tm[i], kMineClip)) * inv_b;
  }
  if (!std::isfinite(mean_exp)) {
    throw MineOverflowError("MINE exponential term overflowed", std::max(max_value(tj), max_value(tm)));
  }
  state.ema = state.ema_initialized ? state.ema_decay * state.ema + (1.0 - state.ema_decay) * mean_exp
                                    : mean_exp;
  state.ema_initialized = true;

  // Minimize -(mean T_joint - mean e^{T_marginal} / ema), ema held fixed.
  Tensor gj({b, 1}), gm({b, 1});
  for (std::size_t i = 0; i < b; ++i) {
    gj[i] = -inv_b;
    gm[i] = e[i] * inv_b / state.ema;
  }
  auto params = state.net.params();
  zero_grads(params);
  state.net.backward(gj, cj, true);
  state.net.backward(gm, cm, true);
  state.optimizer.step(params, learning_rate);
  return before;
}

Tensor take_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
  Tensor out({rows.size(), t.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(t.row(rows[i]).begin(), t.cols(), out.row(i).begin());
  }
  return out;
}

std::vector<double> fit_mine(const Tensor& x, const Tensor& z, MineState& state,
                             const MineFitOptions& options) {
  const std::size_t n = x.rows();
  Rng rng(options.seed);
  std::vector<double> trace;
  trace.reserve(options.steps);
  std::vector<std::size_t> order = permutation(n, rng);
  std::size_t cursor = 0;
  for (std::size_t step = 0; step < options.steps; ++step) {
    if (cursor + options.batch > n) {
      order = permutation(n, rng);
      cursor = 0;
    }
    std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                  order.begin() + static_cast<std::ptrdiff_t>(cursor + options.batch));
    cursor += options.batch;
    trace.push_back(mine_update(take_rows(x, rows), take_rows(z, rows), state, options.learning_rate).value);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Distance correlation

namespace {

struct Centered {
  std::vector<double> dist;      // raw distances
  std::vector<double> centered;  // double-centered
};

Centered double_center(const Tensor& x) {
  const std::size_t n = x.rows();
  Centered c;
  c.dist.resize(n * n);
  kernels::pairwise_distances(x.data(), n, x.cols(), c.dist.data());
  std::vector<double> row_mean(n, 0.0);
  double grand = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) row_mean[i] += c.dist[i * n + j];
    grand += row_mean[i];
    row_mean[i] /= static_cast<double>(n);
  }
  grand /= static_cast<double>(n * n);
  c.centered.resize(n * n);
  // Distance matrices are symmetric, so column means equal row means.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      c.centered[i * n + j] = c.dist[i * n + j] - row_mean[i] - row_mean[j] + grand;
    }
  }
  return c;
}

double mean_product(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s / static_cast<double>(a.size());
}

void check_dcor_inputs(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows()) {
    throw std::invalid_argument("dcor inputs must be [n, dim] with equal n");
  }
  if (a.rows() < 2) throw std::invalid_argument("dcor needs at least 2 samples");
}

// Gradient of the distances' contribution: g_x[k] = 2 sum_l G_kl (x_k - x_l)/|x_k - x_l|.
Tensor distance_backward(const Tensor& x, const std::vector<double>& dist, const std::vector<double>& g) {
  const std::size_t n = x.rows(), d = x.cols();
  Tensor out({n, d});
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t l = 0; l < n; ++l) {
      const double r = dist[k * n + l];
      if (k == l || r <= 0.0) continue;
      const double coef = 2.0 * g[k * n + l] / r;
      for (std::size_t j = 0; j < d; ++j) out(k, j) += coef * (x(k, j) - x(l, j));
    }
  }
  return out;
}

}  // namespace

DependenceEstimate dcor(const Tensor& a, const Tensor& b) {
  return dcor_with_grad(a, b).estimate;
}

DcorGradient dcor_with_grad(const Tensor& a, const Tensor& b) {
  check_dcor_inputs(a, b);
  const std::size_t n = a.rows();
  const Centered ca = double_center(a);
  const Centered cb = double_center(b);
  const double dcov2 = std::max(0.0, mean_product(ca.centered, cb.centered));
  const double var_a = mean_product(ca.centered, ca.centered);
  const double var_b = mean_product(cb.centered, cb.centered);

  DcorGradient out;
  out.grad_a = Tensor(a.shape());
  out.grad_b = Tensor(b.shape());
  out.estimate.n = n;
  if (var_a <= 0.0 || var_b <= 0.0) return out;
  const double s = std::sqrt(var_a * var_b);
  const double ratio = dcov2 / s;
  const double value = std::sqrt(ratio);
  out.estimate.value = std::min(1.0, value);
  if (value <= 0.0) return out;

  // d dCor / dA = (B~/s - R A~/var_a) / (2 dCor n^2), and symmetrically for B.
  const double scale = 1.0 / (2.0 * value * static_cast<double>(n * n));
  std::vector<double> ga(n * n), gb(n * n);
  for (std::size_t i = 0; i < n * n; ++i) {
    ga[i] = scale * (cb.centered[i] / s - ratio * ca.centered[i] / var_a);
    gb[i] = scale * (ca.centered[i] / s - ratio * cb.centered[i] / var_b);
  }
  out.grad_a = distance_backward(a, ca.dist, ga);
  out.grad_b = distance_backward(b, cb.dist, gb);
  return out;
}

double gaussian_mi(double rho, int d) {
  if (!(std::abs(rho) < 1.0)) throw std::invalid_argument("gaussian_mi: |rho| must be below 1");
  if (d < 1) throw std::invalid_argument("gaussian_mi: d must be >= 1");
  return -0.5 * static_cast<double>(d) * std::log1p(-rho * rho);
}

std::pair<Tensor, Tensor> correlated_gaussians(std::size_t n, double rho, std::size_t d,
                                               std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor x({n, d}), z({n, d});
  const double c = std::sqrt(1.0 - rho * rho);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const double u = normal(rng);
      const double e = normal(rng);
      x(i, j) = u;
      z(i, j) = rho * u + c * e;
    }
  }
  return {x, z};
}

}  // namespace mimmx
