#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mimmx/data.hpp"

using namespace mimmx;
namespace fs = std::filesystem;

namespace {

std::vector<FactorSpec> factors(std::vector<int> z_cards, int y_card = 2) {
  std::vector<FactorSpec> f{{"y", y_card, FactorRole::primary, {{"kind", "shape"}}}};
  const char* kinds[] = {"intensity", "stripes", "corner"};
  for (std::size_t i = 0; i < z_cards.size(); ++i) {
    f.push_back({"z" + std::to_string(i + 1), z_cards[i], FactorRole::spurious, {{"kind", kinds[i % 3]}}});
  }
  return f;
}

CorrelationSpec diagonal(const std::vector<FactorSpec>& f, double skew,
                         CorrelationMode mode = CorrelationMode::joint) {
  CorrelationSpec c;
  c.skew = skew;
  c.mode = mode;
  for (int y = 0; y < f[0].cardinality; ++y) {
    std::vector<int> t;
    for (std::size_t i = 1; i < f.size(); ++i) t.push_back(y % f[i].cardinality);
    c.assignment.push_back(t);
  }
  return c;
}

// All z tuples in lexicographic order (z1 slowest).
std::vector<std::vector<int>> tuples(const std::vector<FactorSpec>& f) {
  std::vector<std::vector<int>> out{{}};
  for (std::size_t i = 1; i < f.size(); ++i) {
    std::vector<std::vector<int>> next;
    for (const auto& t : out)
      for (int k = 0; k < f[i].cardinality; ++k) {
        auto u = t;
        u.push_back(k);
        next.push_back(u);
      }
    out = next;
  }
  return out;
}

// Joint-mode oracle: round(skew*budget) in the majority tuple, the rest
// spread evenly, leftover units to the earliest other tuples.
std::map<std::pair<int, std::vector<int>>, std::size_t> joint_oracle(const std::vector<FactorSpec>& f,
                                                                     const CorrelationSpec& c,
                                                                     std::size_t budget) {
  std::map<std::pair<int, std::vector<int>>, std::size_t> out;
  const auto all = tuples(f);
  for (int y = 0; y < f[0].cardinality; ++y) {
    const std::size_t major = static_cast<std::size_t>(std::llround(c.skew * static_cast<double>(budget)));
    const std::size_t others = all.size() - 1;
    const std::size_t rest = budget - major;
    std::size_t extra = rest % others;
    for (const auto& t : all) {
      if (t == c.assignment[static_cast<std::size_t>(y)]) {
        out[{y, t}] = major;
      } else {
        out[{y, t}] = rest / others + (extra > 0 ? 1 : 0);
        if (extra > 0) --extra;
      }
    }
  }
  return out;
}

std::map<std::pair<int, std::vector<int>>, std::size_t> observed(const DatasetManifest& m) {
  std::map<std::pair<int, std::vector<int>>, std::size_t> out;
  for (const auto& t : tuples(m.factors))
    for (int y = 0; y < m.factors[0].cardinality; ++y) out[{y, t}] = 0;
  for (const auto& r : m.records) ++out[{r.y, r.z}];
  return out;
}

std::set<std::string> ids(const DatasetManifest& m) {
  std::set<std::string> s;
  for (const auto& r : m.records) s.insert(r.id);
  return s;
}

bool disjoint(const DatasetManifest& a, const DatasetManifest& b) {
  const auto sa = ids(a);
  for (const auto& r : b.records)
    if (sa.count(r.id)) return false;
  return true;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("mimmx_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("generate_synthetic counts, determinism and zero noise") {
  const auto f = factors({2, 2});
  const auto m = generate_synthetic(f, 50, 32, 0.2, 5);
  CHECK(m.size() == 400);
  for (std::size_t c : m.cell_counts()) CHECK(c == 50);
  CHECK(ids(m).size() == 400);

  const auto again = generate_synthetic(f, 50, 32, 0.2, 5);
  CHECK(again.records == m.records);
  CHECK(again.images->pixels() == m.images->pixels());
  CHECK(generate_synthetic(f, 50, 32, 0.2, 6).images->pixels() != m.images->pixels());

  const auto clean = generate_synthetic(f, 4, 32, 0.0, 5);
  for (std::size_t i = 0; i < clean.size(); i += 4) {
    const auto first = clean.image(clean.records[i]);
    for (std::size_t j = i + 1; j < i + 4; ++j) {
      const auto other = clean.image(clean.records[j]);
      CHECK(std::equal(first.begin(), first.end(), other.begin()));
    }
  }
  CHECK_THROWS_AS(generate_synthetic(f, 1, 15, 0.0, 1), DataError);
  CHECK_THROWS_AS(generate_synthetic(f, 0, 32, 0.0, 1), DataError);
}

TEST_CASE("each factor changes the rendered image") {
  const auto f = factors({2, 2});
  const auto m = generate_synthetic(f, 1, 32, 0.0, 1);
  // Cells differing in exactly one factor must render differently.
  for (std::size_t a = 0; a < m.size(); ++a)
    for (std::size_t b = a + 1; b < m.size(); ++b) {
      const auto& ra = m.records[a];
      const auto& rb = m.records[b];
      int diff = (ra.y != rb.y) + (ra.z[0] != rb.z[0]) + (ra.z[1] != rb.z[1]);
      if (diff != 1) continue;
      const auto ia = m.image(ra), ib = m.image(rb);
      CHECK_FALSE(std::equal(ia.begin(), ia.end(), ib.begin()));
    }
}

TEST_CASE("induce_correlation matches the closed-form counts on a grid") {
  const std::vector<std::vector<int>> shapes{{2, 2}, {3, 2}, {2}, {2, 2, 2}};
  for (const auto& shape : shapes) {
    const auto f = factors(shape);
    const auto pool = generate_synthetic(f, 400, 16, 0.0, 2);
    for (double skew : {0.5, 0.6, 0.75, 0.9, 0.95, 1.0}) {
      for (std::size_t budget : {1, 7, 100, 333}) {
        const auto c = diagonal(f, skew);
        const auto out = induce_correlation(pool, c, budget, 9);
        CHECK(out.size() == budget * 2);
        CHECK(observed(out) == joint_oracle(f, c, budget));
      }
    }
  }
}

TEST_CASE("induce_correlation at skew 0.9: 90 majority and 10 spread over three cells") {
  const auto f = factors({2, 2});
  const auto pool = generate_synthetic(f, 100, 16, 0.0, 3);
  const auto out = induce_correlation(pool, diagonal(f, 0.9), 100, 1);
  const auto obs = observed(out);
  CHECK(obs.at({0, {0, 0}}) == 90);
  CHECK(obs.at({0, {0, 1}}) + obs.at({0, {1, 0}}) + obs.at({0, {1, 1}}) == 10);
  CHECK(obs.at({1, {1, 1}}) == 90);
  CHECK(ids(out).size() == out.size());  // without replacement
}

TEST_CASE("induce_correlation per-factor mode at skew 0.5 is uniform") {
  const auto f = factors({2, 2});
  const auto pool = generate_synthetic(f, 300, 16, 0.0, 3);
  const auto out = induce_correlation(pool, diagonal(f, 0.5, CorrelationMode::per_factor), 800, 4);
  // Chi-square against the uniform multinomial, 3 degrees of freedom per class.
  for (int y = 0; y < 2; ++y) {
    double chi2 = 0;
    for (const auto& t : tuples(f)) {
      const double o = static_cast<double>(observed(out).at({y, t}));
      chi2 += (o - 200.0) * (o - 200.0) / 200.0;
    }
    CHECK(chi2 < 11.34);  // chi2_{0.99}(3)
  }
}

TEST_CASE("induce_correlation per-factor marginals follow the skew") {
  const auto f = factors({2, 2});
  const auto pool = generate_synthetic(f, 700, 16, 0.0, 3);
  const auto out = induce_correlation(pool, diagonal(f, 0.8, CorrelationMode::per_factor), 1000, 4);
  for (int y = 0; y < 2; ++y)
    for (int i = 0; i < 2; ++i) {
      std::size_t hit = 0;
      for (const auto& r : out.records)
        if (r.y == y && r.z[static_cast<std::size_t>(i)] == y) ++hit;
      CHECK(hit == 800);
    }
}

TEST_CASE("induce_correlation reports the short cell") {
  const auto f = factors({2, 2});
  const auto pool = generate_synthetic(f, 10, 16, 0.0, 3);
  try {
    induce_correlation(pool, diagonal(f, 0.9), 100, 1);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("y=0") != std::string::npos);
  }
}

TEST_CASE("eval splits: val skew, flipped inverted, uniform balanced, disjoint") {
  const auto f = factors({2, 2});
  const auto pool = generate_synthetic(f, 200, 16, 0.0, 3);
  const auto c = diagonal(f, 0.9);
  const auto s = build_eval_splits(pool, c, {200, 200, 160}, 8);

  CHECK(observed(s.val) == joint_oracle(f, c, 100));
  CorrelationSpec flipped = c;
  flipped.assignment = {{1, 1}, {0, 0}};
  CHECK(inverted_correlation(c, f) == flipped);
  CHECK(observed(s.inverted) == joint_oracle(f, flipped, 100));
  for (const auto& [cell, n] : observed(s.balanced)) CHECK(n == 20);

  CHECK(disjoint(s.val, s.inverted));
  CHECK(disjoint(s.val, s.balanced));
  CHECK(disjoint(s.inverted, s.balanced));
}

TEST_CASE("inverted assignment for cardinality above two is the +1 derangement") {
  const auto f = factors({3, 2}, 3);
  CorrelationSpec c;
  c.assignment = {{0, 0}, {1, 1}, {2, 0}};
  const auto inv = inverted_correlation(c, f);
  CHECK(inv.assignment == std::vector<std::vector<int>>{{1, 1}, {2, 0}, {0, 1}});
}

TEST_CASE("rebalance equalizes cells to the class maximum") {
  const auto f = factors({2, 2});
  const auto pool = generate_synthetic(f, 200, 16, 0.0, 3);

  // Hand-built cell counts [90, 4, 3, 3] for y=0 and [5, 7, 6, 80] for y=1.
  const std::map<std::pair<int, std::vector<int>>, std::size_t> want{
      {{0, {0, 0}}, 90}, {{0, {0, 1}}, 4}, {{0, {1, 0}}, 3}, {{0, {1, 1}}, 3},
      {{1, {0, 0}}, 5},  {{1, {0, 1}}, 7}, {{1, {1, 0}}, 6}, {{1, {1, 1}}, 80}};
  std::map<std::pair<int, std::vector<int>>, std::size_t> taken;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto key = std::make_pair(pool.records[i].y, pool.records[i].z);
    if (taken[key] < want.at(key)) {
      ++taken[key];
      keep.push_back(i);
    }
  }
  const auto train = subset(pool, keep);
  const auto out = rebalance(train, 5);
  const auto obs = observed(out);
  for (const auto& [cell, n] : obs) CHECK(n == (cell.first == 0 ? 90u : 80u));
  CHECK(out.size() == 360 + 320);

  // Originals kept verbatim, duplicates carry fresh ids and an origin link.
  for (std::size_t i = 0; i < train.size(); ++i) CHECK(out.records[i] == train.records[i]);
  CHECK(ids(out).size() == out.size());
  std::map<std::string, const SampleRecord*> by_id;
  for (const auto& r : train.records) by_id[r.id] = &r;
  for (std::size_t i = train.size(); i < out.size(); ++i) {
    const auto& dup = out.records[i];
    REQUIRE(by_id.count(dup.origin) == 1);
    const SampleRecord& src = *by_id[dup.origin];
    CHECK(dup.image == src.image);
    CHECK(dup.y == src.y);
    CHECK(dup.z == src.z);
  }
  CHECK(out.provenance["output_size"] == out.size());
}

TEST_CASE("rebalance fixed point, P(y) and the skew-0.9 growth") {
  const auto f = factors({2, 2});
  const auto pool = generate_synthetic(f, 40, 16, 0.0, 3);
  const auto same = rebalance(pool, 1);
  CHECK(same.records == pool.records);

  const auto big = generate_synthetic(f, 1400, 16, 0.0, 3);
  const auto train = induce_correlation(big, diagonal(f, 0.9), 1500, 2);
  const auto out = rebalance(train, 1);
  std::size_t y0_in = 0, y0_out = 0;
  for (const auto& r : train.records) y0_in += r.y == 0;
  for (const auto& r : out.records) y0_out += r.y == 0;
  CHECK(static_cast<double>(y0_in) / train.size() == doctest::Approx(static_cast<double>(y0_out) / out.size()));
  CHECK(static_cast<double>(out.size()) / train.size() >= 2.5);
  CHECK(out.size() == 4 * 1350 * 2);
}

TEST_CASE("rebalance rejects an empty cell") {
  const auto f = factors({2, 2});
  const auto pool = generate_synthetic(f, 5, 16, 0.0, 3);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (!(pool.records[i].y == 0 && pool.records[i].z == std::vector<int>{1, 1})) keep.push_back(i);
  CHECK_THROWS_AS(rebalance(subset(pool, keep), 1), DataError);
}

TEST_CASE("manifest write/load round-trip") {
  const auto dir = scratch("manifest");
  const auto f = factors({2, 3});
  auto m = generate_synthetic(f, 20, 16, 0.3, 4);
  m = rebalance(induce_correlation(m, diagonal(f, 0.5), 30, 1), 2);
  write_manifest(m, dir / "m.csv");
  const auto back = load_manifest(dir / "m.csv");
  CHECK(back.equivalent(m));
  // The image store is compacted on write, so indices may move; pixels
  // are compared by equivalent().
  REQUIRE(back.size() == m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    CHECK(back.records[i].id == m.records[i].id);
    CHECK(back.records[i].y == m.records[i].y);
    CHECK(back.records[i].z == m.records[i].z);
    CHECK(back.records[i].origin == m.records[i].origin);
  }
  CHECK(back.factors == m.factors);
  CHECK(back.provenance == m.provenance);

  const auto bundle = build_eval_splits(generate_synthetic(f, 10, 16, 0.1, 1), diagonal(f, 0.9), {12, 12, 12}, 3);
  SplitBundle sb{m, bundle.val, bundle.inverted, bundle.balanced};
  write_splits(sb, dir / "splits");
  const auto sb2 = load_splits(dir / "splits");
  CHECK(sb2.train.equivalent(sb.train));
  CHECK(sb2.balanced.equivalent(sb.balanced));
  fs::remove_all(dir);
}

TEST_CASE("manifest schema errors") {
  const auto dir = scratch("schema");
  const auto f = factors({2, 2});
  write_manifest(generate_synthetic(f, 1, 16, 0.0, 1), dir / "m.csv");
  {
    std::ofstream out(dir / "m.csv", std::ios::app);
    out << "extra,0,1,0\n";  // one z column short
  }
  CHECK_THROWS_AS(load_manifest(dir / "m.csv"), DataError);
  fs::remove_all(dir);
}

TEST_CASE("external CSV with PGM images is ingested field by field") {
  const auto dir = scratch("pgm");
  const auto write_pgm = [&](const std::string& name, int shade) {
    std::ofstream out(dir / name, std::ios::binary);
    out << "P5\n# fixture\n4 3\n255\n";
    for (int i = 0; i < 12; ++i) out.put(static_cast<char>(shade + i));
  };
  write_pgm("a.pgm", 10);
  write_pgm("b.pgm", 100);
  {
    std::ofstream csv(dir / "ext.csv");
    csv << "id,image,y,z1,z2\n"
        << "alpha,a.pgm,0,1,0\n"
        << "beta,b.pgm,1,0,1\n";
  }
  const auto m = load_manifest(dir / "ext.csv", factors({2, 2}));
  REQUIRE(m.size() == 2);
  CHECK(m.records[0].id == "alpha");
  CHECK(m.records[0].y == 0);
  CHECK(m.records[0].z == std::vector<int>{1, 0});
  CHECK(m.records[1].id == "beta");
  CHECK(m.records[1].y == 1);
  CHECK(m.records[1].z == std::vector<int>{0, 1});
  CHECK(m.images->shape() == ImageShape{1, 3, 4});
  CHECK(m.image(m.records[0])[0] == doctest::Approx(10.0 / 255.0));
  CHECK(m.image(m.records[1])[11] == doctest::Approx(111.0 / 255.0));

  {
    std::ofstream csv(dir / "missing.csv");
    csv << "id,image,y,z1,z2\n"
        << "gamma,nope.pgm,0,1,0\n";
  }
  try {
    load_manifest(dir / "missing.csv", factors({2, 2}));
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("gamma") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("projection keeps the primary and one spurious factor") {
  const auto f = factors({2, 3});
  const auto m = generate_synthetic(f, 2, 16, 0.0, 1);
  const auto p = project_to_factor(m, 2);
  CHECK(p.factors.size() == 2);
  CHECK(p.factors[1].name == "z2");
  for (std::size_t i = 0; i < m.size(); ++i) CHECK(p.records[i].z == std::vector<int>{m.records[i].z[1]});
  CHECK_THROWS_AS(project_to_factor(m, 3), DataError);
}

TEST_CASE("largest remainder rounding") {
  const std::vector<double> w{1, 1, 1};
  CHECK(largest_remainder(10, w) == std::vector<std::size_t>{4, 3, 3});
  const std::vector<double> v{0.5, 0.3, 0.2};
  CHECK(largest_remainder(7, v) == std::vector<std::size_t>{4, 2, 1});
}
