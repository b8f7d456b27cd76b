#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mimmx/kernels.hpp"
#include "mimmx/tensor.hpp"

namespace mimmx {

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param() = default;
  Param(std::string n, std::vector<std::size_t> shape)
      : name(std::move(n)), value(shape), grad(std::move(shape)) {}
  void zero_grad() { grad.fill(0.0); }
};

void zero_grads(std::span<Param* const> params);

/// y = x W^T + b on [batch, in] inputs.
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out);

  /// He-style normal init scaled by `gain`, zero bias.
  void init(Rng& rng, double gain = 1.0);
  Tensor forward(const Tensor& x) const;
  /// Accumulates parameter gradients; returns dL/dx.
  Tensor backward(const Tensor& x, const Tensor& grad_y);
  std::vector<Param*> params() { return {&weight, &bias}; }

  std::size_t in_features() const { return weight.value.dim(1); }
  std::size_t out_features() const { return weight.value.dim(0); }

  Param weight;
  Param bias;
};

/// Square-kernel 2-d convolution on [batch, C, H, W].
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, std::size_t in_channels, std::size_t out_channels,
         std::size_t kernel, std::size_t stride, std::size_t pad);

  void init(Rng& rng);
  kernels::ConvGeometry geometry(const Tensor& x) const;
  Tensor forward(const Tensor& x) const;
  /// Accumulates parameter gradients; returns dL/dx when `need_input_grad`.
  Tensor backward(const Tensor& x, const Tensor& grad_y, bool need_input_grad);
  std::vector<Param*> params() { return {&weight, &bias}; }

  Param weight;
  Param bias;

 private:
  std::size_t in_channels_ = 0, out_channels_ = 0, kernel_ = 3, stride_ = 1, pad_ = 0;
};

/// Per-feature batch normalization over [batch, features].
class BatchNorm1d {
 public:
  struct Cache {
    Tensor normalized;
    std::vector<double> inv_std;
  };

  BatchNorm1d() = default;
  BatchNorm1d(const std::string& name, std::size_t features, double momentum, double eps = 1e-5);

  /// Batch statistics; updates running mean/var. Throws on batch size 1.
  Tensor forward_train(const Tensor& x, Cache& cache);
  /// Batch statistics without touching running stats (for gradient checks).
  Tensor forward_batch_stats(const Tensor& x, Cache& cache) const;
  Tensor forward_eval(const Tensor& x) const;
  Tensor backward(const Tensor& grad_y, const Cache& cache);
  std::vector<Param*> params() { return {&gamma, &beta}; }

  Param gamma;
  Param beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

Tensor relu(const Tensor& x);
/// grad_y masked by x > 0.
Tensor relu_backward(const Tensor& x, const Tensor& grad_y);
Tensor elu(const Tensor& x);
Tensor elu_backward(const Tensor& x, const Tensor& grad_y);

/// Row-wise log-softmax of [batch, classes].
Tensor log_softmax(const Tensor& logits);

struct ClassificationLoss {
  double loss = 0.0;   // mean negative log-likelihood (nats)
  Tensor grad_logits;  // d loss / d logits
};

/// Cross-entropy of log-probabilities against integer labels.
ClassificationLoss cross_entropy(const Tensor& log_probs, std::span<const int> labels);

/// Argmax per row; ties go to the lowest class index.
std::vector<int> argmax_rows(const Tensor& scores);

/// Adam with per-parameter moment buffers.
class Adam {
 public:
  Adam() = default;
  explicit Adam(double beta1, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::span<Param* const> params, double learning_rate);
  std::size_t steps() const { return t_; }

  // Serialization access.
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  void set_steps(std::size_t t) { t_ = t; }

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

}  // namespace mimmx
