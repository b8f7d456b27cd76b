#include "mimmx/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

namespace mimmx {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// ImageStore / CellIndex / DatasetManifest

ImageStore::ImageStore(ImageShape shape, std::vector<float> pixels)
    : shape_(shape), pixels_(std::move(pixels)) {
  if (shape_.pixels() == 0 || pixels_.size() % shape_.pixels() != 0) {
    throw DataError("image store size is not a multiple of the image shape");
  }
  count_ = pixels_.size() / shape_.pixels();
}

std::span<const float> ImageStore::image(std::size_t index) const {
  if (index >= count_) throw DataError("image index " + std::to_string(index) + " out of range");
  return {pixels_.data() + index * shape_.pixels(), shape_.pixels()};
}

CellIndex::CellIndex(const std::vector<FactorSpec>& ordered_factors) {
  if (ordered_factors.empty()) throw DataError("no factors declared");
  for (const auto& f : ordered_factors) {
    radix_.push_back(static_cast<std::size_t>(f.cardinality));
    total_ *= radix_.back();
  }
}

std::size_t CellIndex::of(int y, std::span<const int> z) const {
  if (z.size() + 1 != radix_.size()) throw DataError("label arity does not match factors");
  std::size_t cell = static_cast<std::size_t>(y);
  for (std::size_t i = 0; i < z.size(); ++i) cell = cell * radix_[i + 1] + static_cast<std::size_t>(z[i]);
  return cell;
}

std::pair<int, std::vector<int>> CellIndex::decode(std::size_t cell) const {
  std::vector<int> z(radix_.size() - 1);
  for (std::size_t i = radix_.size() - 1; i >= 1; --i) {
    z[i - 1] = static_cast<int>(cell % radix_[i]);
    cell /= radix_[i];
  }
  return {static_cast<int>(cell), z};
}

std::string CellIndex::describe(std::size_t cell) const {
  auto [y, z] = decode(cell);
  std::string s = "(y=" + std::to_string(y) + ", z=(";
  for (std::size_t i = 0; i < z.size(); ++i) s += (i ? "," : "") + std::to_string(z[i]);
  return s + "))";
}

std::vector<std::size_t> DatasetManifest::cell_counts() const {
  const CellIndex idx = cells();
  std::vector<std::size_t> counts(idx.cells(), 0);
  for (const auto& r : records) ++counts[idx.of(r.y, r.z)];
  return counts;
}

bool DatasetManifest::equivalent(const DatasetManifest& other) const {
  if (factors != other.factors || provenance != other.provenance ||
      records.size() != other.records.size()) {
    return false;
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& a = records[i];
    const auto& b = other.records[i];
    if (a.id != b.id || a.y != b.y || a.z != b.z || a.origin != b.origin) return false;
    const auto pa = image(a);
    const auto pb = other.image(b);
    if (!std::equal(pa.begin(), pa.end(), pb.begin(), pb.end())) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Synthetic renderer

namespace {

struct Canvas {
  std::size_t size;
  std::vector<float> px;
  explicit Canvas(std::size_t s) : size(s), px(s * s, 0.0f) {}
  float& at(std::size_t r, std::size_t c) { return px[r * size + c]; }
};

bool inside_shape(int cls, double dx, double dy, double radius) {
  switch (cls % 4) {
    case 0:  // disc
      return dx * dx + dy * dy <= radius * radius;
    case 1: {  // square of equal area
      const double h = radius * std::sqrt(std::numbers::pi) / 2.0;
      return std::abs(dx) <= h && std::abs(dy) <= h;
    }
    case 2: {  // upward equilateral triangle of equal area, centred on its centroid
      const double side = radius * std::sqrt(4.0 * std::numbers::pi / std::sqrt(3.0));
      const double height = side * std::sqrt(3.0) / 2.0;
      const double top = -2.0 * height / 3.0;
      const double bottom = height / 3.0;
      if (dy < top || dy > bottom) return false;
      const double half_width = (dy - top) / height * side / 2.0;
      return std::abs(dx) <= half_width;
    }
    default: {  // diamond of equal area
      const double a = radius * std::sqrt(std::numbers::pi / 2.0);
      return std::abs(dx) + std::abs(dy) <= a;
    }
  }
}

void render_factor(Canvas& canvas, const FactorSpec& f, int cls, Rng& rng) {
  const double s = static_cast<double>(canvas.size);
  const std::string kind = f.generator_kind();
  const int k = f.cardinality;
  if (kind == "shape") {
    const double radius = f.param("size", 0.22) * s;
    const double contrast = f.param("contrast", 0.6);
    const double jitter = f.param("jitter", 0.0) * s;
    double cx = s / 2.0, cy = s / 2.0;
    if (jitter > 0) {
      std::uniform_real_distribution<double> u(-jitter, jitter);
      cx += u(rng);
      cy += u(rng);
    }
    for (std::size_t r = 0; r < canvas.size; ++r) {
      for (std::size_t c = 0; c < canvas.size; ++c) {
        if (inside_shape(cls, c + 0.5 - cx, r + 0.5 - cy, radius)) {
          canvas.at(r, c) += static_cast<float>(contrast);
        }
      }
    }
  } else if (kind == "intensity") {
    const double amp = f.param("amplitude", 0.4);
    const double offset = amp * (static_cast<double>(cls) / (k - 1) - 0.5);
    for (auto& p : canvas.px) p += static_cast<float>(offset);
  } else if (kind == "stripes") {
    const double amp = f.param("amplitude", 0.3);
    const double period = f.param("period", 8.0);
    const double theta = cls * std::numbers::pi / k;
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t r = 0; r < canvas.size; ++r) {
      for (std::size_t c = 0; c < canvas.size; ++c) {
        const double u = (c + 0.5) * ct + (r + 0.5) * st;
        canvas.at(r, c) += static_cast<float>(0.5 * amp * std::sin(2.0 * std::numbers::pi * u / period));
      }
    }
  } else if (kind == "corner") {
    if (cls == 0) return;
    const double amp = f.param("amplitude", 0.6);
    const std::size_t side = std::max<std::size_t>(2, canvas.size / 8);
    const std::size_t inset = 2;
    const int corner = (cls - 1) % 4;
    const std::size_t r0 = (corner >= 2) ? canvas.size - inset - side : inset;
    const std::size_t c0 = (corner % 2 == 1) ? canvas.size - inset - side : inset;
    for (std::size_t r = r0; r < r0 + side; ++r) {
      for (std::size_t c = c0; c < c0 + side; ++c) canvas.at(r, c) += static_cast<float>(amp);
    }
  } else {
    throw DataError("unknown generator kind '" + kind + "' for factor '" + f.name + "'");
  }
}

std::string make_id(const std::string& prefix, std::size_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu", n);
  return prefix + buf;
}

}  // namespace

DatasetManifest generate_synthetic(const std::vector<FactorSpec>& ordered_factors,
                                   std::size_t count_per_cell, std::size_t image_size,
                                   double noise_sigma, std::uint64_t seed,
                                   const std::string& id_prefix) {
  if (count_per_cell < 1) throw DataError("count_per_joint_cell must be >= 1");
  if (image_size < 16) {
    throw DataError("image_size " + std::to_string(image_size) +
                    " too small to render all factors (minimum 16)");
  }
  if (ordered_factors.empty() || ordered_factors.front().role != FactorRole::primary) {
    throw DataError("factor list must start with the primary factor");
  }
  const CellIndex cells(ordered_factors);
  const std::size_t n = cells.cells() * count_per_cell;
  const ImageShape shape{1, image_size, image_size};

  DatasetManifest m;
  m.factors = ordered_factors;
  m.records.resize(n);
  std::vector<float> pixels(n * shape.pixels());

#pragma omp parallel for schedule(dynamic, 16)
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cell = i / count_per_cell;
    auto [y, z] = cells.decode(cell);
    SampleRecord& rec = m.records[i];
    rec.id = make_id(id_prefix, i);
    rec.image = i;
    rec.y = y;
    rec.z = z;

    Rng rng(derive_seed(seed, rec.id));
    Canvas canvas(image_size);
    for (std::size_t f = 1; f < ordered_factors.size(); ++f) {
      render_factor(canvas, ordered_factors[f], z[f - 1], rng);
    }
    render_factor(canvas, ordered_factors[0], y, rng);
    if (noise_sigma > 0) {
      std::normal_distribution<double> noise(0.0, noise_sigma);
      for (auto& p : canvas.px) p += static_cast<float>(noise(rng));
    }
    std::copy(canvas.px.begin(), canvas.px.end(), pixels.begin() + static_cast<std::ptrdiff_t>(i * shape.pixels()));
  }

  m.images = std::make_shared<ImageStore>(shape, std::move(pixels));
  m.provenance = {{"operation", "generate"},
                  {"seed", seed},
                  {"count_per_cell", count_per_cell},
                  {"image_size", image_size},
                  {"noise_sigma", noise_sigma}};
  return m;
}

// ---------------------------------------------------------------------------
// Correlation induction and splits

std::vector<std::size_t> largest_remainder(std::size_t total, std::span<const double> weights) {
  std::vector<std::size_t> out(weights.size(), 0);
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (weights.empty() || sum <= 0 || total == 0) return out;
  std::vector<double> frac(weights.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double quota = static_cast<double>(total) * weights[i] / sum;
    out[i] = static_cast<std::size_t>(std::floor(quota + 1e-9));
    frac[i] = quota - static_cast<double>(out[i]);
    assigned += out[i];
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return frac[a] > frac[b] + 1e-12;
  });
  for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++out[order[i % order.size()]];
  return out;
}

std::vector<std::size_t> correlation_cell_targets(const std::vector<FactorSpec>& ordered_factors,
                                                  const CorrelationSpec& corr,
                                                  std::span<const std::size_t> per_class_budget) {
  const CellIndex cells(ordered_factors);
  const std::size_t per_class = cells.cells_per_class();
  const std::size_t k_y = cells.primary_cardinality();
  if (per_class_budget.size() != k_y) throw DataError("one budget per primary class required");
  if (corr.assignment.size() != k_y) throw DataError("assignment must cover every primary class");

  std::vector<std::size_t> targets(cells.cells(), 0);
  for (std::size_t c = 0; c < k_y; ++c) {
    const std::size_t budget = per_class_budget[c];
    const std::size_t first = c * per_class;
    if (corr.mode == CorrelationMode::joint) {
      const std::size_t major = cells.of(static_cast<int>(c), corr.assignment[c]);
      const auto n_major = static_cast<std::size_t>(std::llround(corr.skew * static_cast<double>(budget)));
      targets[major] = n_major;
      if (per_class > 1) {
        std::vector<double> w(per_class, 1.0);
        w[major - first] = 0.0;
        const auto rest = largest_remainder(budget - n_major, w);
        for (std::size_t j = 0; j < per_class; ++j) {
          if (first + j != major) targets[first + j] = rest[j];
        }
      } else {
        targets[major] = budget;
      }
    } else {
      // Independent marginal skew per factor.
      std::vector<double> w(per_class, 1.0);
      for (std::size_t j = 0; j < per_class; ++j) {
        const auto z = cells.decode(first + j).second;
        for (std::size_t i = 0; i < z.size(); ++i) {
          const int k = ordered_factors[i + 1].cardinality;
          w[j] *= z[i] == corr.assignment[c][i] ? corr.skew : (1.0 - corr.skew) / (k - 1);
        }
      }
      const auto counts = largest_remainder(budget, w);
      for (std::size_t j = 0; j < per_class; ++j) targets[first + j] = counts[j];
    }
  }
  return targets;
}

namespace {

using CellPools = std::vector<std::vector<std::size_t>>;

CellPools pools_by_cell(const DatasetManifest& m) {
  const CellIndex cells = m.cells();
  CellPools pools(cells.cells());
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    pools[cells.of(m.records[i].y, m.records[i].z)].push_back(i);
  }
  return pools;
}

// Draws targets[cell] records from each pool without replacement and
// removes them from the pool.
std::vector<std::size_t> draw(const DatasetManifest& m, CellPools& pools,
                              const std::vector<std::size_t>& targets, std::uint64_t seed) {
  const CellIndex cells = m.cells();
  std::vector<std::string> shortfalls;
  for (std::size_t cell = 0; cell < targets.size(); ++cell) {
    if (targets[cell] > pools[cell].size()) {
      shortfalls.push_back("cell " + cells.describe(cell) + " needs " +
                           std::to_string(targets[cell]) + ", has " +
                           std::to_string(pools[cell].size()) + " (shortfall " +
                           std::to_string(targets[cell] - pools[cell].size()) + ")");
    }
  }
  if (!shortfalls.empty()) {
    std::string msg = "insufficient samples:";
    for (const auto& s : shortfalls) msg += " " + s + ";";
    throw DataError(msg);
  }
  std::vector<std::size_t> picked;
  for (std::size_t cell = 0; cell < targets.size(); ++cell) {
    auto& pool = pools[cell];
    Rng rng(derive_seed(seed, "cell", cell));
    const auto perm = permutation(pool.size(), rng);
    std::vector<std::size_t> chosen, kept;
    for (std::size_t j = 0; j < perm.size(); ++j) {
      (j < targets[cell] ? chosen : kept).push_back(pool[perm[j]]);
    }
    std::sort(kept.begin(), kept.end());
    pool = std::move(kept);
    picked.insert(picked.end(), chosen.begin(), chosen.end());
  }
  return picked;
}

std::vector<std::size_t> split_evenly(std::size_t total, std::size_t parts) {
  const std::vector<double> w(parts, 1.0);
  return largest_remainder(total, w);
}

}  // namespace

DatasetManifest subset(const DatasetManifest& manifest, std::span<const std::size_t> indices) {
  DatasetManifest out;
  out.factors = manifest.factors;
  out.images = manifest.images;
  out.provenance = manifest.provenance;
  out.records.reserve(indices.size());
  for (std::size_t i : indices) out.records.push_back(manifest.records.at(i));
  return out;
}

DatasetManifest induce_correlation(const DatasetManifest& manifest, const CorrelationSpec& corr,
                                   std::size_t per_class_budget, std::uint64_t seed) {
  const std::vector<std::size_t> budgets(manifest.cells().primary_cardinality(), per_class_budget);
  const auto targets = correlation_cell_targets(manifest.factors, corr, budgets);
  CellPools pools = pools_by_cell(manifest);
  const auto picked = draw(manifest, pools, targets, seed);
  DatasetManifest out = subset(manifest, picked);
  out.provenance = {{"operation", "induce"},
                    {"seed", seed},
                    {"skew", corr.skew},
                    {"mode", to_string(corr.mode)},
                    {"per_class_budget", per_class_budget},
                    {"source", manifest.provenance}};
  return out;
}

CorrelationSpec inverted_correlation(const CorrelationSpec& corr,
                                     const std::vector<FactorSpec>& ordered_factors) {
  CorrelationSpec inv = corr;
  for (auto& tuple : inv.assignment) {
    for (std::size_t i = 0; i < tuple.size(); ++i) {
      tuple[i] = (tuple[i] + 1) % ordered_factors.at(i + 1).cardinality;
    }
  }
  return inv;
}

SplitBundle build_eval_splits(const DatasetManifest& source, const CorrelationSpec& corr,
                              const SplitSizes& sizes, std::uint64_t seed) {
  const CellIndex cells = source.cells();
  const std::size_t k_y = cells.primary_cardinality();
  CellPools pools = pools_by_cell(source);

  auto make = [&](const std::vector<std::size_t>& targets, const char* name,
                  json extra) -> DatasetManifest {
    const auto picked = draw(source, pools, targets, derive_seed(seed, name));
    DatasetManifest out = subset(source, picked);
    extra["operation"] = std::string("split:") + name;
    extra["seed"] = seed;
    extra["source"] = source.provenance;
    out.provenance = std::move(extra);
    return out;
  };

  SplitBundle b;
  b.val = make(correlation_cell_targets(source.factors, corr, split_evenly(sizes.val, k_y)), "val",
               {{"skew", corr.skew}, {"mode", to_string(corr.mode)}});
  const CorrelationSpec inv = inverted_correlation(corr, source.factors);
  b.inverted = make(correlation_cell_targets(source.factors, inv, split_evenly(sizes.inverted, k_y)),
                    "inverted", {{"skew", inv.skew}, {"mode", to_string(inv.mode)}});
  b.balanced = make(split_evenly(sizes.balanced, cells.cells()), "balanced", json::object());
  return b;
}

DatasetManifest rebalance(const DatasetManifest& train, std::uint64_t seed) {
  const CellIndex cells = train.cells();
  const std::size_t per_class = cells.cells_per_class();
  const CellPools pools = pools_by_cell(train);

  DatasetManifest out = train;
  std::size_t duplicates = 0;
  for (std::size_t c = 0; c < cells.primary_cardinality(); ++c) {
    std::size_t max_count = 0;
    for (std::size_t j = 0; j < per_class; ++j) max_count = std::max(max_count, pools[c * per_class + j].size());
    if (max_count == 0) {
      throw DataError("primary class " + std::to_string(c) + " has no samples in any cell");
    }
    for (std::size_t j = 0; j < per_class; ++j) {
      const std::size_t cell = c * per_class + j;
      const auto& pool = pools[cell];
      if (pool.empty()) {
        throw DataError("cell " + cells.describe(cell) + " is empty and cannot be oversampled");
      }
      Rng rng(derive_seed(seed, "rebalance", cell));
      for (std::size_t k = pool.size(); k < max_count; ++k) {
        const auto& src = train.records[pool[static_cast<std::size_t>(rng() % pool.size())]];
        SampleRecord dup = src;
        dup.id = src.id + "#r" + std::to_string(k - pool.size());
        dup.origin = src.origin.empty() ? src.id : src.origin;
        out.records.push_back(std::move(dup));
        ++duplicates;
      }
    }
  }
  out.provenance = {{"operation", "rebalance"},
                    {"seed", seed},
                    {"input_size", train.size()},
                    {"output_size", out.size()},
                    {"duplicates", duplicates},
                    {"growth_factor", static_cast<double>(out.size()) / static_cast<double>(train.size())},
                    {"source", train.provenance}};
  return out;
}

DatasetManifest project_to_factor(const DatasetManifest& manifest, int spurious_index) {
  if (spurious_index < 1 || static_cast<std::size_t>(spurious_index) > manifest.num_spurious()) {
    throw DataError("spurious factor index " + std::to_string(spurious_index) + " out of range");
  }
  DatasetManifest out = manifest;
  out.factors = {manifest.factors[0], manifest.factors[static_cast<std::size_t>(spurious_index)]};
  for (auto& r : out.records) r.z = {r.z[static_cast<std::size_t>(spurious_index) - 1]};
  return out;
}

Tensor gather_images(const DatasetManifest& manifest, std::span<const std::size_t> order) {
  const ImageShape s = manifest.images->shape();
  Tensor out({order.size(), s.channels, s.height, s.width});
  double* dst = out.data();
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto px = manifest.image(manifest.records.at(order[i]));
    std::copy(px.begin(), px.end(), dst + i * s.pixels());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest I/O

namespace {

fs::path with_ext(const fs::path& csv_path, const char* ext) {
  fs::path p = csv_path;
  return p.replace_extension(ext);
}

json factors_to_json(const std::vector<FactorSpec>& factors) {
  json arr = json::array();
  for (const auto& f : factors) {
    arr.push_back({{"name", f.name},
                   {"cardinality", f.cardinality},
                   {"role", f.role == FactorRole::primary ? "primary" : "spurious"},
                   {"generator", f.generator_params}});
  }
  return arr;
}

std::vector<FactorSpec> factors_from_json(const json& arr) {
  std::vector<FactorSpec> out;
  for (const auto& j : arr) {
    FactorSpec f;
    f.name = j.at("name").get<std::string>();
    f.cardinality = j.at("cardinality").get<int>();
    f.role = j.at("role").get<std::string>() == "primary" ? FactorRole::primary : FactorRole::spurious;
    f.generator_params = j.value("generator", std::map<std::string, std::string>{});
    out.push_back(std::move(f));
  }
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    cells.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

void write_f32(const fs::path& path, const std::vector<float>& values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(float)));
  } else {
    for (float v : values) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      bits = ((bits & 0xffu) << 24) | ((bits & 0xff00u) << 8) | ((bits >> 8) & 0xff00u) | (bits >> 24);
      out.write(reinterpret_cast<const char*>(&bits), 4);
    }
  }
}

std::vector<float> read_f32(const fs::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<float> values(count);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != count * sizeof(float)) {
    throw DataError(path.string() + " is shorter than its shape header");
  }
  if constexpr (std::endian::native != std::endian::little) {
    for (auto& v : values) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      bits = ((bits & 0xffu) << 24) | ((bits & 0xff00u) << 8) | ((bits >> 8) & 0xff00u) | (bits >> 24);
      v = std::bit_cast<float>(bits);
    }
  }
  return values;
}

// Reads a binary (P5) or ASCII (P2) greymap scaled to [0, 1].
std::optional<std::pair<ImageShape, std::vector<float>>> read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::string magic;
  in >> magic;
  auto next_int = [&in]() {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
      in >> std::ws;
    }
    long v = 0;
    in >> v;
    return v;
  };
  const long w = next_int(), h = next_int(), maxval = next_int();
  if ((magic != "P5" && magic != "P2") || w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) {
    throw DataError(path.string() + " is not a supported PGM image");
  }
  const auto n = static_cast<std::size_t>(w * h);
  std::vector<float> px(n);
  if (magic == "P2") {
    for (auto& p : px) p = static_cast<float>(next_int()) / static_cast<float>(maxval);
  } else {
    in.get();
    const bool wide = maxval > 255;
    for (auto& p : px) {
      unsigned v = static_cast<unsigned char>(in.get());
      if (wide) v = (v << 8) | static_cast<unsigned char>(in.get());
      p = static_cast<float>(v) / static_cast<float>(maxval);
    }
    if (!in) throw DataError(path.string() + " is truncated");
  }
  return std::make_pair(ImageShape{1, static_cast<std::size_t>(h), static_cast<std::size_t>(w)}, std::move(px));
}

}  // namespace

void write_manifest(const DatasetManifest& m, const fs::path& csv_path) {
  if (csv_path.has_parent_path()) fs::create_directories(csv_path.parent_path());
  // Compact the referenced images in first-use order; duplicates share a slot.
  std::map<std::size_t, std::size_t> slot;
  std::vector<float> pixels;
  const std::size_t n_z = m.num_spurious();
  std::ofstream csv(csv_path);
  if (!csv) throw DataError("cannot write " + csv_path.string());
  csv << "id,image,y";
  for (std::size_t i = 1; i <= n_z; ++i) csv << ",z" << i;
  csv << ",origin\n";
  for (const auto& r : m.records) {
    auto [it, inserted] = slot.try_emplace(r.image, slot.size());
    if (inserted) {
      const auto px = m.image(r);
      pixels.insert(pixels.end(), px.begin(), px.end());
    }
    csv << r.id << ',' << it->second << ',' << r.y;
    for (int z : r.z) csv << ',' << z;
    csv << ',' << r.origin << '\n';
  }
  const ImageShape s = m.images ? m.images->shape() : ImageShape{};
  write_f32(with_ext(csv_path, ".f32"), pixels);
  json sidecar = {{"shape", {slot.size(), s.channels, s.height, s.width}},
                  {"dtype", "float32"},
                  {"endian", "little"},
                  {"factors", factors_to_json(m.factors)},
                  {"provenance", m.provenance}};
  std::ofstream(with_ext(csv_path, ".json")) << sidecar.dump(2) << '\n';
}

DatasetManifest load_manifest(const fs::path& csv_path,
                              const std::optional<std::vector<FactorSpec>>& factors) {
  std::ifstream csv(csv_path);
  if (!csv) throw DataError("cannot read manifest " + csv_path.string());

  DatasetManifest m;
  const fs::path sidecar_path = with_ext(csv_path, ".json");
  const bool array_mode = fs::exists(sidecar_path);
  json sidecar;
  if (array_mode) {
    std::ifstream(sidecar_path) >> sidecar;
    m.factors = factors_from_json(sidecar.at("factors"));
    m.provenance = sidecar.value("provenance", json::object());
  } else if (factors) {
    m.factors = *factors;
  } else {
    throw DataError(csv_path.string() + " has no sidecar; factor specs must be supplied");
  }
  const std::size_t n_z = m.num_spurious();

  std::string line;
  if (!std::getline(csv, line)) throw DataError(csv_path.string() + " is empty");
  const auto header = split_csv_line(line);
  std::size_t z_cols = 0;
  for (const auto& h : header) z_cols += (h.size() > 1 && h[0] == 'z' && std::isdigit(static_cast<unsigned char>(h[1])));
  if (header.size() < 3 || header[0] != "id" || header[1] != "image" || header[2] != "y") {
    throw DataError(csv_path.string() + ": header must start with id,image,y");
  }
  if (z_cols != n_z) {
    throw DataError(csv_path.string() + ": " + std::to_string(z_cols) + " z columns, expected " +
                    std::to_string(n_z));
  }
  const bool has_origin = header.size() > 3 + n_z && header[3 + n_z] == "origin";

  std::vector<std::string> image_refs;
  std::size_t line_no = 1;
  while (std::getline(csv, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() < 3 + n_z) {
      throw DataError(csv_path.string() + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(3 + n_z) + " columns, found " + std::to_string(cells.size()));
    }
    SampleRecord r;
    r.id = cells[0];
    image_refs.push_back(cells[1]);
    try {
      r.y = std::stoi(cells[2]);
      for (std::size_t i = 0; i < n_z; ++i) r.z.push_back(std::stoi(cells[3 + i]));
    } catch (const std::exception&) {
      throw DataError(csv_path.string() + ":" + std::to_string(line_no) + ": non-integer label");
    }
    if (has_origin && cells.size() > 3 + n_z) r.origin = cells[3 + n_z];
    if (r.y < 0 || r.y >= m.factors[0].cardinality) {
      throw DataError("record " + r.id + ": y=" + std::to_string(r.y) + " out of range");
    }
    for (std::size_t i = 0; i < n_z; ++i) {
      if (r.z[i] < 0 || r.z[i] >= m.factors[i + 1].cardinality) {
        throw DataError("record " + r.id + ": z" + std::to_string(i + 1) + " out of range");
      }
    }
    m.records.push_back(std::move(r));
  }

  std::set<std::string> ids;
  for (const auto& r : m.records) {
    if (!ids.insert(r.id).second) throw DataError("duplicate id " + r.id);
  }

  if (array_mode) {
    const auto shape = sidecar.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 4) throw DataError("sidecar shape must be (count, channels, H, W)");
    const ImageShape s{shape[1], shape[2], shape[3]};
    auto pixels = read_f32(with_ext(csv_path, ".f32"), shape[0] * s.pixels());
    m.images = std::make_shared<ImageStore>(s, std::move(pixels));
    for (std::size_t i = 0; i < m.records.size(); ++i) {
      m.records[i].image = std::stoul(image_refs[i]);
      if (m.records[i].image >= shape[0]) {
        throw DataError("record " + m.records[i].id + ": image index out of range");
      }
    }
  } else {
    std::vector<std::string> missing;
    std::optional<ImageShape> shape;
    std::vector<float> pixels;
    for (std::size_t i = 0; i < m.records.size(); ++i) {
      fs::path p = image_refs[i];
      if (p.is_relative()) p = csv_path.parent_path() / p;
      auto img = read_pgm(p);
      if (!img) {
        missing.push_back(m.records[i].id);
        continue;
      }
      if (!shape) shape = img->first;
      if (!(img->first == *shape)) {
        throw DataError("record " + m.records[i].id + ": image shape differs from the first image");
      }
      m.records[i].image = pixels.size() / shape->pixels();
      pixels.insert(pixels.end(), img->second.begin(), img->second.end());
    }
    if (!missing.empty()) {
      std::string msg = "missing image files for ids:";
      for (const auto& id : missing) msg += " " + id;
      throw DataError(msg);
    }
    if (!shape) throw DataError(csv_path.string() + " has no records");
    m.images = std::make_shared<ImageStore>(*shape, std::move(pixels));
    m.provenance = {{"operation", "ingest"}, {"source", csv_path.string()}};
  }
  return m;
}

void write_splits(const SplitBundle& splits, const fs::path& dir) {
  fs::create_directories(dir);
  write_manifest(splits.train, dir / "train.csv");
  write_manifest(splits.val, dir / "val.csv");
  write_manifest(splits.inverted, dir / "inverted.csv");
  write_manifest(splits.balanced, dir / "balanced.csv");
}

SplitBundle load_splits(const fs::path& dir) {
  SplitBundle b;
  b.train = load_manifest(dir / "train.csv");
  b.val = load_manifest(dir / "val.csv");
  b.inverted = load_manifest(dir / "inverted.csv");
  b.balanced = load_manifest(dir / "balanced.csv");
  return b;
}

}  // namespace mimmx
