#include "mimmx/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <stdexcept>

namespace mimmx {

namespace {

std::size_t element_count(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> values) {
  if (element_count(shape) != values.size()) {
    throw std::invalid_argument("Tensor::from: value count does not match shape");
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(values);
  return t;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::reshape(std::vector<std::size_t> shape) {
  if (element_count(shape) != data_.size()) {
    throw std::invalid_argument("Tensor::reshape: element count mismatch");
  }
  shape_ = std::move(shape);
}

Tensor Tensor::slice_cols(std::size_t begin, std::size_t count) const {
  if (rank() != 2 || begin + count > cols()) {
    throw std::out_of_range("Tensor::slice_cols: range outside tensor");
  }
  Tensor out({rows(), count});
  for (std::size_t r = 0; r < rows(); ++r) {
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(r * cols() + begin), count,
                out.data_.begin() + static_cast<std::ptrdiff_t>(r * count));
  }
  return out;
}

void Tensor::add_cols(std::size_t begin, const Tensor& block) {
  if (rank() != 2 || block.rank() != 2 || block.rows() != rows() ||
      begin + block.cols() > cols()) {
    throw std::out_of_range("Tensor::add_cols: block does not fit");
  }
  for (std::size_t r = 0; r < rows(); ++r) {
    for (std::size_t c = 0; c < block.cols(); ++c) {
      (*this)(r, begin + c) += block(r, c);
    }
  }
}

Tensor concat_cols(std::span<const Tensor> blocks) {
  if (blocks.empty()) return {};
  const std::size_t n = blocks.front().rows();
  std::size_t total = 0;
  for (const auto& b : blocks) {
    if (b.rank() != 2 || b.rows() != n) {
      throw std::invalid_argument("concat_cols: row count mismatch");
    }
    total += b.cols();
  }
  Tensor out({n, total});
  std::size_t offset = 0;
  for (const auto& b : blocks) {
    out.add_cols(offset, b);
    offset += b.cols();
  }
  return out;
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view label) {
  return splitmix64(base ^ fnv1a(label));
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view label, std::uint64_t index) {
  return splitmix64(derive_seed(base, label) + splitmix64(index));
}

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

}  // namespace mimmx
