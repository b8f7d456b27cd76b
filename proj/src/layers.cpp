#include "mimmx/layers.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace mimmx {

void zero_grads(std::span<Param* const> params) {
  for (Param* p : params) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(const std::string& name, std::size_t in, std::size_t out)
    : weight(name + ".weight", {out, in}), bias(name + ".bias", {out}) {}

void Linear::init(Rng& rng, double gain) {
  std::normal_distribution<double> n(0.0, gain * std::sqrt(2.0 / static_cast<double>(in_features())));
  for (double& w : weight.value.values()) w = n(rng);
  bias.value.fill(0.0);
}

Tensor Linear::forward(const Tensor& x) const {
  if (x.rank() != 2 || x.cols() != in_features()) {
    throw std::invalid_argument(weight.name + ": expected " + std::to_string(in_features()) +
                                " input features");
  }
  const std::size_t b = x.rows(), out = out_features();
  Tensor y({b, out});
  kernels::matmul_nt(x.data(), weight.value.data(), y.data(), b, out, in_features(), false);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < out; ++j) y(i, j) += bias.value[j];
  }
  return y;
}

Tensor Linear::backward(const Tensor& x, const Tensor& grad_y) {
  const std::size_t b = x.rows(), in = in_features(), out = out_features();
  kernels::matmul_tn(grad_y.data(), x.data(), weight.grad.data(), out, in, b, true);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < out; ++j) bias.grad[j] += grad_y(i, j);
  }
  Tensor gx({b, in});
  kernels::matmul_nn(grad_y.data(), weight.value.data(), gx.data(), b, in, out, false);
  return gx;
}

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(const std::string& name, std::size_t in_channels, std::size_t out_channels,
               std::size_t kernel, std::size_t stride, std::size_t pad)
    : weight(name + ".weight", {out_channels, in_channels, kernel, kernel}),
      bias(name + ".bias", {out_channels}),
      in_channels_(in_channels),
      out_channels_(out_channels),
      kernel_(kernel),
      stride_(stride),
      pad_(pad) {}

void Conv2d::init(Rng& rng) {
  const double fan_in = static_cast<double>(in_channels_ * kernel_ * kernel_);
  std::normal_distribution<double> n(0.0, std::sqrt(2.0 / fan_in));
  for (double& w : weight.value.values()) w = n(rng);
  bias.value.fill(0.0);
}

kernels::ConvGeometry Conv2d::geometry(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != in_channels_) {
    throw std::invalid_argument(weight.name + ": expected [batch, " + std::to_string(in_channels_) +
                                ", H, W] input");
  }
  kernels::ConvGeometry g;
  g.batch = x.dim(0);
  g.in_channels = in_channels_;
  g.in_h = x.dim(2);
  g.in_w = x.dim(3);
  g.out_channels = out_channels_;
  g.kernel = kernel_;
  g.stride = stride_;
  g.pad = pad_;
  return g;
}

Tensor Conv2d::forward(const Tensor& x) const {
  const auto g = geometry(x);
  Tensor y({g.batch, g.out_channels, g.out_h(), g.out_w()});
  kernels::conv2d_forward(g, x.data(), weight.value.data(), bias.value.data(), y.data());
  return y;
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& grad_y, bool need_input_grad) {
  const auto g = geometry(x);
  Tensor gx = need_input_grad ? Tensor(x.shape()) : Tensor();
  kernels::conv2d_backward(g, x.data(), weight.value.data(), grad_y.data(),
                           need_input_grad ? gx.data() : nullptr, weight.grad.data(), bias.grad.data());
  return gx;
}

// ---------------------------------------------------------------------------
// BatchNorm1d

BatchNorm1d::BatchNorm1d(const std::string& name, std::size_t features, double m, double e)
    : gamma(name + ".gamma", {features}),
      beta(name + ".beta", {features}),
      running_mean({features}, 0.0),
      running_var({features}, 1.0),
      momentum(m),
      eps(e) {
  gamma.value.fill(1.0);
}

Tensor BatchNorm1d::forward_batch_stats(const Tensor& x, Cache& cache) const {
  const std::size_t b = x.rows(), f = x.cols();
  if (b < 2) throw std::invalid_argument("batch normalization needs at least 2 samples in train mode");
  cache.normalized = Tensor({b, f});
  cache.inv_std.assign(f, 0.0);
  Tensor y({b, f});
  for (std::size_t j = 0; j < f; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < b; ++i) mean += x(i, j);
    mean /= static_cast<double>(b);
    double var = 0.0;
    for (std::size_t i = 0; i < b; ++i) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= static_cast<double>(b);
    const double inv = 1.0 / std::sqrt(var + eps);
    cache.inv_std[j] = inv;
    for (std::size_t i = 0; i < b; ++i) {
      const double xh = (x(i, j) - mean) * inv;
      cache.normalized(i, j) = xh;
      y(i, j) = gamma.value[j] * xh + beta.value[j];
    }
  }
  return y;
}

Tensor BatchNorm1d::forward_train(const Tensor& x, Cache& cache) {
  Tensor y = forward_batch_stats(x, cache);
  const std::size_t b = x.rows(), f = x.cols();
  for (std::size_t j = 0; j < f; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < b; ++i) mean += x(i, j);
    mean /= static_cast<double>(b);
    const double biased_var = 1.0 / (cache.inv_std[j] * cache.inv_std[j]) - eps;
    const double unbiased = biased_var * static_cast<double>(b) / static_cast<double>(b - 1);
    running_mean[j] = (1.0 - momentum) * running_mean[j] + momentum * mean;
    running_var[j] = (1.0 - momentum) * running_var[j] + momentum * unbiased;
  }
  return y;
}

Tensor BatchNorm1d::forward_eval(const Tensor& x) const {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const double xh = (x(i, j) - running_mean[j]) / std::sqrt(running_var[j] + eps);
      y(i, j) = gamma.value[j] * xh + beta.value[j];
    }
  }
  return y;
}

Tensor BatchNorm1d::backward(const Tensor& grad_y, const Cache& cache) {
  const std::size_t b = grad_y.rows(), f = grad_y.cols();
  const double nb = static_cast<double>(b);
  Tensor gx({b, f});
  for (std::size_t j = 0; j < f; ++j) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      sum_g += grad_y(i, j);
      sum_gx += grad_y(i, j) * cache.normalized(i, j);
    }
    gamma.grad[j] += sum_gx;
    beta.grad[j] += sum_g;
    const double scale = gamma.value[j] * cache.inv_std[j] / nb;
    for (std::size_t i = 0; i < b; ++i) {
      gx(i, j) = scale * (nb * grad_y(i, j) - sum_g - cache.normalized(i, j) * sum_gx);
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Activations and losses

Tensor relu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& grad_y) {
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > 0.0 ? grad_y[i] : 0.0;
  return g;
}

Tensor elu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : std::expm1(x[i]);
  return y;
}

Tensor elu_backward(const Tensor& x, const Tensor& grad_y) {
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > 0.0 ? grad_y[i] : grad_y[i] * std::exp(x[i]);
  return g;
}

Tensor log_softmax(const Tensor& logits) {
  Tensor out(logits.shape());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto row = logits.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : row) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : row) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < row.size(); ++j) out(i, j) = row[j] - lse;
  }
  return out;
}

ClassificationLoss cross_entropy(const Tensor& log_probs, std::span<const int> labels) {
  const std::size_t b = log_probs.rows(), k = log_probs.cols();
  if (labels.size() != b) throw std::invalid_argument("cross_entropy: label count mismatch");
  ClassificationLoss out;
  out.grad_logits = Tensor({b, k});
  const double inv_b = 1.0 / static_cast<double>(b);
  for (std::size_t i = 0; i < b; ++i) {
    const auto label = static_cast<std::size_t>(labels[i]);
    if (label >= k) throw std::invalid_argument("cross_entropy: label out of range");
    out.loss -= log_probs(i, label);
    for (std::size_t j = 0; j < k; ++j) {
      out.grad_logits(i, j) = (std::exp(log_probs(i, j)) - (j == label ? 1.0 : 0.0)) * inv_b;
    }
  }
  out.loss *= inv_b;
  return out;
}

std::vector<int> argmax_rows(const Tensor& scores) {
  std::vector<int> out(scores.rows());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < scores.cols(); ++j) {
      if (scores(i, j) > scores(i, best)) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam

void Adam::step(std::span<Param* const> params, double learning_rate) {
  if (m_.empty()) {
    for (Param* p : params) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }
  if (m_.size() != params.size()) throw std::logic_error("Adam: parameter list changed");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& w = params[k]->value;
    const Tensor& g = params[k]->grad;
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= learning_rate * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

}  // namespace mimmx
