#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mimmx/config.hpp"
#include "mimmx/tensor.hpp"

namespace mimmx {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ImageShape {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t pixels() const { return channels * height * width; }
  bool operator==(const ImageShape&) const = default;
};

/// Immutable block of float32 images shared by every manifest derived from it.
class ImageStore {
 public:
  ImageStore(ImageShape shape, std::vector<float> pixels);

  const ImageShape& shape() const { return shape_; }
  std::size_t count() const { return count_; }
  std::span<const float> image(std::size_t index) const;
  const std::vector<float>& pixels() const { return pixels_; }

 private:
  ImageShape shape_;
  std::size_t count_ = 0;
  std::vector<float> pixels_;
};

struct SampleRecord {
  std::string id;
  std::size_t image = 0;  // index into the manifest's ImageStore
  int y = 0;
  std::vector<int> z;
  std::string origin;  // source id for rebalance duplicates, else empty

  bool operator==(const SampleRecord&) const = default;
};

/// Mixed-radix indexing of joint (y, z_1..z_N) cells.
class CellIndex {
 public:
  explicit CellIndex(const std::vector<FactorSpec>& ordered_factors);

  std::size_t cells() const { return total_; }
  std::size_t cells_per_class() const { return total_ / radix_.front(); }
  std::size_t primary_cardinality() const { return radix_.front(); }
  std::size_t of(int y, std::span<const int> z) const;
  /// (y, z) of a cell.
  std::pair<int, std::vector<int>> decode(std::size_t cell) const;
  std::string describe(std::size_t cell) const;

 private:
  std::vector<std::size_t> radix_;
  std::size_t total_ = 1;
};

struct DatasetManifest {
  std::vector<FactorSpec> factors;  // primary first, then z_1..z_N
  std::vector<SampleRecord> records;
  nlohmann::json provenance = nlohmann::json::object();
  std::shared_ptr<const ImageStore> images;

  std::size_t size() const { return records.size(); }
  std::size_t num_spurious() const { return factors.empty() ? 0 : factors.size() - 1; }
  CellIndex cells() const { return CellIndex(factors); }
  std::size_t cell_of(const SampleRecord& r) const { return cells().of(r.y, r.z); }
  /// Record counts per joint cell.
  std::vector<std::size_t> cell_counts() const;
  std::span<const float> image(const SampleRecord& r) const { return images->image(r.image); }
  /// Record fields, factors and provenance match, and pixel contents agree.
  bool equivalent(const DatasetManifest& other) const;
};

struct SplitBundle {
  DatasetManifest train;
  DatasetManifest val;
  DatasetManifest inverted;
  DatasetManifest balanced;
};

struct SplitSizes {
  std::size_t val = 0;
  std::size_t inverted = 0;
  std::size_t balanced = 0;
};

/// Renders `count_per_cell` images for every joint cell. Ids are
/// `<id_prefix><n>`; per-sample noise is seeded from (seed, id).
DatasetManifest generate_synthetic(const std::vector<FactorSpec>& ordered_factors,
                                   std::size_t count_per_cell, std::size_t image_size,
                                   double noise_sigma, std::uint64_t seed,
                                   const std::string& id_prefix = "s");

/// Target per-cell sample counts for one call of induce_correlation.
std::vector<std::size_t> correlation_cell_targets(const std::vector<FactorSpec>& ordered_factors,
                                                  const CorrelationSpec& corr,
                                                  std::span<const std::size_t> per_class_budget);

DatasetManifest induce_correlation(const DatasetManifest& manifest, const CorrelationSpec& corr,
                                   std::size_t per_class_budget, std::uint64_t seed);

/// Majority assignment with every factor deranged by +1 (mod cardinality).
CorrelationSpec inverted_correlation(const CorrelationSpec& corr,
                                     const std::vector<FactorSpec>& ordered_factors);

SplitBundle build_eval_splits(const DatasetManifest& source, const CorrelationSpec& corr,
                              const SplitSizes& sizes, std::uint64_t seed);

DatasetManifest rebalance(const DatasetManifest& train, std::uint64_t seed);

/// Spreads `total` over `weights` proportionally; remainders go to the
/// largest fractional parts, ties to the lowest index.
std::vector<std::size_t> largest_remainder(std::size_t total, std::span<const double> weights);

/// Writes `<stem>.csv`, `<stem>.f32` and `<stem>.json`.
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& csv_path);

/// Reads a manifest CSV. With a sidecar `<stem>.json` the image column
/// indexes `<stem>.f32`; otherwise it names image files (PGM) and
/// `factors` must be supplied.
DatasetManifest load_manifest(const std::filesystem::path& csv_path,
                              const std::optional<std::vector<FactorSpec>>& factors = {});

void write_splits(const SplitBundle& splits, const std::filesystem::path& dir);
SplitBundle load_splits(const std::filesystem::path& dir);

/// Restricts a manifest to the primary factor and one spurious factor (1-based).
DatasetManifest project_to_factor(const DatasetManifest& manifest, int spurious_index);

/// Returns a manifest copy holding only `indices` (in that order).
DatasetManifest subset(const DatasetManifest& manifest, std::span<const std::size_t> indices);

/// Stacks the images of records [begin, begin+count) of `order` into a
/// [count, C, H, W] tensor.
Tensor gather_images(const DatasetManifest& manifest, std::span<const std::size_t> order);

}  // namespace mimmx
