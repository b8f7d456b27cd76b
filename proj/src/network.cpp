#include "mimmx/network.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace mimmx {

// ---------------------------------------------------------------------------
// ConvEncoder

ConvEncoder::ConvEncoder(std::size_t image_channels, std::span<const int> widths,
                         std::size_t output_dim, Rng& rng) {
  if (widths.size() != 4) throw std::invalid_argument("ConvEncoder needs four channel widths");
  std::size_t in = image_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto out = static_cast<std::size_t>(widths[i]);
    convs_[i] = Conv2d("encoder.conv" + std::to_string(i + 1), in, out, 3, 2, 1);
    convs_[i].init(rng);
    in = out;
  }
  head_ = Linear("encoder.fc", in, output_dim);
  head_.init(rng, 1.0);
}

Tensor ConvEncoder::run(const Tensor& images, Activations* acts) const {
  Tensor x = images;
  for (std::size_t i = 0; i < 4; ++i) {
    Tensor pre = convs_[i].forward(x);
    if (acts != nullptr) acts->inputs[i] = std::move(x);
    x = relu(pre);
    if (acts != nullptr) acts->pre[i] = std::move(pre);
  }
  const std::size_t b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor pooled({b, c});
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* p = x.data() + (n * c + ch) * plane;
      double s = 0.0;
      for (std::size_t k = 0; k < plane; ++k) s += p[k];
      pooled(n, ch) = s / static_cast<double>(plane);
    }
  }
  Tensor features = head_.forward(pooled);
  if (acts != nullptr) acts->pooled = std::move(pooled);
  return features;
}

Tensor ConvEncoder::infer(const Tensor& images) const { return run(images, nullptr); }

Tensor ConvEncoder::forward(const Tensor& images) { return run(images, &cache_); }

void ConvEncoder::backward(const Tensor& grad_features) {
  if (cache_.pooled.empty()) throw std::logic_error("ConvEncoder::backward without forward");
  const Tensor g_pooled = head_.backward(cache_.pooled, grad_features);
  const Tensor& last = cache_.pre[3];
  const std::size_t b = last.dim(0), c = last.dim(1), plane = last.dim(2) * last.dim(3);
  Tensor g(last.shape());
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double v = g_pooled(n, ch) / static_cast<double>(plane);
      double* p = g.data() + (n * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) p[k] = v;
    }
  }
  for (std::size_t i = 4; i-- > 0;) {
    const Tensor g_pre = relu_backward(cache_.pre[i], g);
    g = convs_[i].backward(cache_.inputs[i], g_pre, i > 0);
  }
}

std::vector<Param*> ConvEncoder::params() {
  std::vector<Param*> out;
  for (auto& c : convs_) {
    for (Param* p : c.params()) out.push_back(p);
  }
  for (Param* p : head_.params()) out.push_back(p);
  return out;
}

// ---------------------------------------------------------------------------
// Partition and CAW

FeatureBundle partition(const Tensor& features, std::size_t n_spurious, std::size_t d) {
  if (features.rank() != 2 || features.cols() != (n_spurious + 1) * d) {
    throw std::invalid_argument("feature width " + std::to_string(features.cols()) +
                                " is not (N+1)*subvector_dim = " +
                                std::to_string((n_spurious + 1) * d));
  }
  FeatureBundle b;
  b.f_y = features.slice_cols(0, d);
  b.stacked_f_z = features.slice_cols(d, n_spurious * d);
  for (std::size_t i = 0; i < n_spurious; ++i) b.f_z.push_back(features.slice_cols(d * (i + 1), d));
  return b;
}

Tensor join(const FeatureBundle& bundle) {
  std::vector<Tensor> blocks{bundle.f_y};
  blocks.insert(blocks.end(), bundle.f_z.begin(), bundle.f_z.end());
  return concat_cols(blocks);
}

std::vector<double> caw_weights(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("caw_weights: need at least one logit");
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) mx = std::max(mx, v);
  std::vector<double> w(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) s += (w[i] = std::exp(logits[i] - mx));
  for (double& v : w) v /= s;
  return w;
}

// ---------------------------------------------------------------------------
// Heads

PrimaryHead::PrimaryHead(std::size_t subvector_dim, std::size_t classes, Rng& rng)
    : affine("head_y", subvector_dim, classes) {
  affine.init(rng, 0.5);
}

SpuriousHead::SpuriousHead(std::size_t n_spurious, std::size_t subvector_dim,
                           std::span<const int> classes, bool caw, double bn_momentum, Rng& rng)
    : bn("head_z.bn", n_spurious * subvector_dim, bn_momentum),
      caw_logits("caw.logits", {n_spurious}),
      use_caw(caw),
      subvector_dim_(subvector_dim) {
  for (std::size_t i = 0; i < n_spurious; ++i) {
    heads.emplace_back("head_z" + std::to_string(i + 1), n_spurious * subvector_dim,
                       static_cast<std::size_t>(classes[i]));
    heads.back().init(rng, 0.5);
  }
}

std::vector<double> SpuriousHead::weights() const {
  if (!use_caw) return std::vector<double>(n_spurious(), 1.0);
  return caw_weights(caw_logits.value.values());
}

Tensor SpuriousHead::scale_blocks(const Tensor& normalized, std::span<const double> w) const {
  Tensor out(normalized.shape());
  for (std::size_t r = 0; r < normalized.rows(); ++r) {
    for (std::size_t c = 0; c < normalized.cols(); ++c) {
      out(r, c) = w[c / subvector_dim_] * normalized(r, c);
    }
  }
  return out;
}

std::vector<Tensor> SpuriousHead::apply_heads(const Tensor& weighted) const {
  std::vector<Tensor> out;
  for (const auto& h : heads) out.push_back(h.forward(weighted));
  return out;
}

std::vector<Tensor> SpuriousHead::logits(const Tensor& stacked_f_z, Mode mode, Cache* cache,
                                         bool update_stats) {
  if (mode == Mode::eval) return logits_eval(stacked_f_z);
  Cache local;
  Cache& c = cache != nullptr ? *cache : local;
  c.normalized = update_stats ? bn.forward_train(stacked_f_z, c.bn) : bn.forward_batch_stats(stacked_f_z, c.bn);
  c.weights = weights();
  c.weighted = scale_blocks(c.normalized, c.weights);
  return apply_heads(c.weighted);
}

std::vector<Tensor> SpuriousHead::logits_eval(const Tensor& stacked_f_z) const {
  return apply_heads(scale_blocks(bn.forward_eval(stacked_f_z), weights()));
}

Tensor SpuriousHead::backward(std::span<const Tensor> grad_logits, const Cache& cache) {
  Tensor g_weighted(cache.weighted.shape());
  for (std::size_t i = 0; i < heads.size(); ++i) {
    const Tensor g = heads[i].backward(cache.weighted, grad_logits[i]);
    for (std::size_t k = 0; k < g.size(); ++k) g_weighted[k] += g[k];
  }
  const std::size_t n = n_spurious();
  std::vector<double> g_w(n, 0.0);
  Tensor g_norm(cache.normalized.shape());
  for (std::size_t r = 0; r < g_weighted.rows(); ++r) {
    for (std::size_t c = 0; c < g_weighted.cols(); ++c) {
      const std::size_t block = c / subvector_dim_;
      g_w[block] += g_weighted(r, c) * cache.normalized(r, c);
      g_norm(r, c) = cache.weights[block] * g_weighted(r, c);
    }
  }
  if (use_caw) {
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) dot += cache.weights[i] * g_w[i];
    for (std::size_t i = 0; i < n; ++i) caw_logits.grad[i] += cache.weights[i] * (g_w[i] - dot);
  }
  return bn.backward(g_norm, cache.bn);
}

std::vector<Param*> SpuriousHead::params() {
  std::vector<Param*> out{&bn.gamma, &bn.beta};
  if (use_caw) out.push_back(&caw_logits);
  for (auto& h : heads) {
    for (Param* p : h.params()) out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

namespace {

std::vector<int> spurious_classes(const std::vector<FactorSpec>& ordered) {
  std::vector<int> out;
  for (std::size_t i = 1; i < ordered.size(); ++i) out.push_back(ordered[i].cardinality);
  return out;
}

}  // namespace

MimmxModel::MimmxModel(const ModelSpec& spec, const std::vector<FactorSpec>& ordered_factors,
                       std::size_t subvector_dim, bool use_caw, double bn_momentum,
                       std::uint64_t init_seed)
    : spec_(spec), subvector_dim_(subvector_dim) {
  if (ordered_factors.size() < 2) throw std::invalid_argument("model needs a primary and >=1 spurious factor");
  const std::size_t n = ordered_factors.size() - 1;
  Rng rng(init_seed);
  encoder_ = std::make_unique<ConvEncoder>(static_cast<std::size_t>(spec.image_channels), spec.channels,
                                           (n + 1) * subvector_dim, rng);
  primary = PrimaryHead(subvector_dim, static_cast<std::size_t>(ordered_factors[0].cardinality), rng);
  const auto classes = spurious_classes(ordered_factors);
  spurious = SpuriousHead(n, subvector_dim, classes, use_caw, bn_momentum, rng);
}

std::vector<Param*> MimmxModel::params() {
  std::vector<Param*> out = encoder_->params();
  for (Param* p : primary.params()) out.push_back(p);
  for (Param* p : spurious.params()) out.push_back(p);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> MimmxModel::state() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (Param* p : encoder_->params()) out.emplace_back(p->name, &p->value);
  for (Param* p : primary.params()) out.emplace_back(p->name, &p->value);
  out.emplace_back(spurious.bn.gamma.name, &spurious.bn.gamma.value);
  out.emplace_back(spurious.bn.beta.name, &spurious.bn.beta.value);
  out.emplace_back("head_z.bn.running_mean", &spurious.bn.running_mean);
  out.emplace_back("head_z.bn.running_var", &spurious.bn.running_var);
  out.emplace_back(spurious.caw_logits.name, &spurious.caw_logits.value);
  for (auto& h : spurious.heads) {
    for (Param* p : h.params()) out.emplace_back(p->name, &p->value);
  }
  return out;
}

namespace {

void check_images(const MimmxModel& model, const Tensor& images) {
  const auto& spec = model.spec();
  if (images.rank() != 4 || images.dim(1) != static_cast<std::size_t>(spec.image_channels) ||
      images.dim(2) != static_cast<std::size_t>(spec.image_size) ||
      images.dim(3) != static_cast<std::size_t>(spec.image_size)) {
    throw std::invalid_argument("image batch shape does not match the model's image spec");
  }
}

}  // namespace

FeatureBundle encode(MimmxModel& model, const Tensor& images, Mode mode) {
  if (mode == Mode::eval) return encode(static_cast<const MimmxModel&>(model), images);
  check_images(model, images);
  return partition(model.encoder().forward(images), model.num_spurious(), model.subvector_dim());
}

FeatureBundle encode(const MimmxModel& model, const Tensor& images) {
  check_images(model, images);
  return partition(model.encoder().infer(images), model.num_spurious(), model.subvector_dim());
}

Tensor predict_primary(const MimmxModel& model, const Tensor& f_y) {
  if (f_y.rank() != 2 || f_y.cols() != model.subvector_dim()) {
    throw std::invalid_argument("predict_primary: f_y width must equal subvector_dim");
  }
  return log_softmax(model.primary.logits(f_y));
}

std::vector<Tensor> predict_spurious(MimmxModel& model, const Tensor& stacked_f_z, Mode mode) {
  auto logits = model.spurious.logits(stacked_f_z, mode, nullptr);
  for (auto& l : logits) l = log_softmax(l);
  return logits;
}

}  // namespace mimmx
