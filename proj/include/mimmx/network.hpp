#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mimmx/config.hpp"
#include "mimmx/layers.hpp"
#include "mimmx/tensor.hpp"

namespace mimmx {

enum class Mode { train, eval };

/// Maps a [batch, C, H, W] image tensor to [batch, output_dim] features.
/// `forward` keeps the activations needed by the following `backward`;
/// `infer` is side-effect free.
class Encoder {
 public:
  virtual ~Encoder() = default;
  virtual Tensor infer(const Tensor& images) const = 0;
  virtual Tensor forward(const Tensor& images) = 0;
  virtual void backward(const Tensor& grad_features) = 0;
  virtual std::vector<Param*> params() = 0;
  virtual std::size_t output_dim() const = 0;
};

/// Four stride-2 3x3 convolutions with ReLU, global average pooling and an
/// affine map to the feature vector.
class ConvEncoder final : public Encoder {
 public:
  ConvEncoder(std::size_t image_channels, std::span<const int> widths, std::size_t output_dim,
              Rng& rng);

  Tensor infer(const Tensor& images) const override;
  Tensor forward(const Tensor& images) override;
  void backward(const Tensor& grad_features) override;
  std::vector<Param*> params() override;
  std::size_t output_dim() const override { return head_.out_features(); }

 private:
  struct Activations {
    std::array<Tensor, 4> inputs;  // input of each conv
    std::array<Tensor, 4> pre;     // conv outputs before ReLU
    Tensor pooled;
  };
  Tensor run(const Tensor& images, Activations* acts) const;

  std::array<Conv2d, 4> convs_;
  Linear head_;
  Activations cache_;
};

/// Encoder output split into f_y and the N spurious subvectors.
struct FeatureBundle {
  Tensor f_y;               // [batch, d]
  std::vector<Tensor> f_z;  // N x [batch, d]
  Tensor stacked_f_z;       // [batch, N*d]

  std::size_t batch() const { return f_y.rows(); }
};

/// Index-contiguous split: [f_y | f_z1 | ... | f_zN].
FeatureBundle partition(const Tensor& features, std::size_t n_spurious, std::size_t subvector_dim);
/// Inverse of partition.
Tensor join(const FeatureBundle& bundle);

/// Softmax of the CAW logits.
std::vector<double> caw_weights(std::span<const double> logits);

class PrimaryHead {
 public:
  PrimaryHead() = default;
  PrimaryHead(std::size_t subvector_dim, std::size_t classes, Rng& rng);

  Tensor logits(const Tensor& f_y) const { return affine.forward(f_y); }
  /// Returns dL/df_y.
  Tensor backward(const Tensor& f_y, const Tensor& grad_logits) { return affine.backward(f_y, grad_logits); }
  std::vector<Param*> params() { return affine.params(); }

  Linear affine;
};

/// BN over stacked f_Z, CAW block scaling, one affine map per factor.
class SpuriousHead {
 public:
  struct Cache {
    BatchNorm1d::Cache bn;
    Tensor normalized;  // BN output
    Tensor weighted;    // after CAW scaling
    std::vector<double> weights;
  };

  SpuriousHead() = default;
  SpuriousHead(std::size_t n_spurious, std::size_t subvector_dim, std::span<const int> classes,
               bool use_caw, double bn_momentum, Rng& rng);

  /// Per-factor logits. Train mode uses batch statistics and updates the
  /// running stats unless `update_stats` is false.
  std::vector<Tensor> logits(const Tensor& stacked_f_z, Mode mode, Cache* cache,
                             bool update_stats = true);
  std::vector<Tensor> logits_eval(const Tensor& stacked_f_z) const;
  /// Returns dL/d(stacked f_Z); accumulates head, BN and CAW gradients.
  Tensor backward(std::span<const Tensor> grad_logits, const Cache& cache);
  std::vector<Param*> params();
  std::vector<double> weights() const;

  std::size_t n_spurious() const { return heads.size(); }

  BatchNorm1d bn;
  Param caw_logits;
  std::vector<Linear> heads;
  bool use_caw = true;

 private:
  std::size_t subvector_dim_ = 0;
  std::vector<Tensor> apply_heads(const Tensor& weighted) const;
  Tensor scale_blocks(const Tensor& normalized, std::span<const double> w) const;
};

/// Encoder, partition, primary head and spurious head.
class MimmxModel {
 public:
  MimmxModel(const ModelSpec& spec, const std::vector<FactorSpec>& ordered_factors,
             std::size_t subvector_dim, bool use_caw, double bn_momentum, std::uint64_t init_seed);

  std::size_t num_spurious() const { return spurious.n_spurious(); }
  std::size_t subvector_dim() const { return subvector_dim_; }
  const ModelSpec& spec() const { return spec_; }

  Encoder& encoder() { return *encoder_; }
  const Encoder& encoder() const { return *encoder_; }

  /// Every trainable parameter (encoder, heads, BN affine, CAW logits).
  std::vector<Param*> params();
  std::vector<Param*> encoder_params() { return encoder_->params(); }
  /// Parameters plus BN running statistics, by stable name.
  std::vector<std::pair<std::string, Tensor*>> state();

  PrimaryHead primary;
  SpuriousHead spurious;

 private:
  ModelSpec spec_;
  std::size_t subvector_dim_;
  std::unique_ptr<Encoder> encoder_;
};

/// Encodes and partitions. Eval mode is side-effect free; train mode keeps
/// encoder activations for a following backward pass.
FeatureBundle encode(MimmxModel& model, const Tensor& images, Mode mode);
FeatureBundle encode(const MimmxModel& model, const Tensor& images);

/// Log-probabilities of the primary task from f_y.
Tensor predict_primary(const MimmxModel& model, const Tensor& f_y);

/// Log-probabilities of every spurious factor from the stacked f_Z.
std::vector<Tensor> predict_spurious(MimmxModel& model, const Tensor& stacked_f_z, Mode mode);

}  // namespace mimmx
