// Acceptance gate: one PASS/FAIL line per criterion.
//
//   acceptance [--only 1,3,6] [--config configs/synthetic.yaml] [--out dir]
//
// Criteria 6, 7 and 10 share one set of training runs (baseline and MIMM-X,
// three seeds). Their artifacts land under --out.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mimmx/dependence.hpp"
#include "mimmx/dls.hpp"
#include "mimmx/evaluation.hpp"
#include "mimmx/network.hpp"
#include "mimmx/pipeline.hpp"
#include "mimmx/trainer.hpp"

using namespace mimmx;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Collects failed sub-checks; the first few are kept for the report.
struct Checks {
  std::size_t total = 0, failed = 0;
  std::vector<std::string> notes;

  void expect(bool ok, const std::string& what) {
    ++total;
    if (ok) return;
    ++failed;
    if (notes.size() < 4) notes.push_back(what);
  }
  Outcome outcome(const std::string& summary) const {
    std::string d = summary + " (" + std::to_string(total - failed) + "/" + std::to_string(total) + " checks)";
    for (const auto& n : notes) d += "; failed: " + n;
    return {failed == 0, d};
  }
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = n(rng);
  return t;
}

// ---------------------------------------------------------------------------
// 1. Scalar oracles

Outcome criterion_scalar() {
  const auto t0 = Clock::now();
  Checks c;
  // Hand arithmetic via exp/log so the oracle does not share pow() with gammas.
  const double mean = (2.0 + 1.0 + 1.0) / 3.0;
  const double want0 = std::exp(0.3 * std::log(2.0 / mean));
  const double want1 = std::exp(0.8 * std::log(1.0 / mean));
  const std::vector<double> losses{2, 1, 1};
  const auto g = gammas(losses, 0.3, 0.8);
  c.expect(g.size() == 3, "gammas size");
  const double pinned[] = {1.1293, 0.7945, 0.7945};
  for (std::size_t i = 0; i < 3 && i < g.size(); ++i) {
    c.expect(std::abs(g[i] - pinned[i]) <= 1e-3, "gamma " + std::to_string(i) + " = " + fmt(g[i]));
    c.expect(std::abs(g[i] - (i == 0 ? want0 : want1)) <= 1e-12, "gamma vs arithmetic " + std::to_string(i));
  }

  ScheduleState s{0, 40, 0.3, 0.01, 0.8};
  c.expect(alpha_y(s) == 0.3, "alpha_y at epoch 0");
  s.epoch = 40;
  c.expect(alpha_y(s) == 0.3 + 0.01, "alpha_y at n_epoch");
  ScheduleState odd{0, 17, 0.25, 0.07, 0.8};
  c.expect(alpha_y(odd) == 0.25, "alpha_y start, odd n_epoch");
  odd.epoch = 17;
  c.expect(alpha_y(odd) == 0.25 + 0.07, "alpha_y end, odd n_epoch");

  const auto b = total_loss(losses, g, 0.2, 1.5);
  const double expect = g[0] * 2.0 + g[1] * 1.0 + g[2] * 1.0 + 1.5 * 0.2;
  c.expect(std::abs(b.total - expect) <= 1e-9, "total_loss identity");
  const auto neg = total_loss(losses, std::vector<double>(3, 1.0), -0.4, 1.5);
  c.expect(std::abs(neg.total - 3.4) <= 1e-9, "negative penalty unclamped");

  const double t = seconds_since(t0);
  c.expect(t < 1.0, "runtime " + fmt(t, 3) + " s");
  return c.outcome("gammas [" + fmt(g[0]) + ", " + fmt(g[1]) + ", " + fmt(g[2]) + "], total " + fmt(b.total) +
                   ", " + fmt(t, 3) + " s");
}

// ---------------------------------------------------------------------------
// 2. dCor against a brute-force double-centering oracle

double brute_dcor(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows();
  auto centered = [&](const Tensor& x) {
    std::vector<std::vector<double>> d(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < x.cols(); ++k) s += (x(i, k) - x(j, k)) * (x(i, k) - x(j, k));
        d[i][j] = std::sqrt(s);
      }
    std::vector<double> rm(n, 0), cm(n, 0);
    double gm = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        rm[i] += d[i][j] / n;
        cm[j] += d[i][j] / n;
        gm += d[i][j] / (n * n);
      }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) d[i][j] = d[i][j] - rm[i] - cm[j] + gm;
    return d;
  };
  const auto A = centered(a), B = centered(b);
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      ab += A[i][j] * B[i][j];
      aa += A[i][j] * A[i][j];
      bb += B[i][j] * B[i][j];
    }
  if (aa <= 0 || bb <= 0) return 0.0;
  return std::sqrt(std::max(ab, 0.0) / std::sqrt(aa * bb));
}

template <class F>
double max_rel_fd_error(Tensor& x, const Tensor& analytic, F f, double h = 1e-6) {
  double worst = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double keep = x[k];
    x[k] = keep + h;
    const double up = f();
    x[k] = keep - h;
    const double down = f();
    x[k] = keep;
    const double numeric = (up - down) / (2 * h);
    const double denom = std::max({std::abs(numeric), std::abs(analytic[k]), 1e-3});
    worst = std::max(worst, std::abs(numeric - analytic[k]) / denom);
  }
  return worst;
}

Outcome criterion_dcor() {
  const auto t0 = Clock::now();
  Checks c;
  std::mt19937_64 rng(2024);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng() % 63, da = 1 + rng() % 8, db = 1 + rng() % 8;
    const Tensor a = random_tensor({n, da}, 100 + trial), b = random_tensor({n, db}, 900 + trial);
    const double got = dcor(a, b).value, want = brute_dcor(a, b);
    worst = std::max(worst, std::abs(got - want));
    c.expect(std::abs(got - want) <= 1e-9, "batch " + std::to_string(trial));
  }
  const Tensor x = random_tensor({25, 4}, 7);
  c.expect(std::abs(dcor(x, x).value - 1.0) <= 1e-9, "dcor(x, x) = 1");
  c.expect(dcor(Tensor({25, 3}, 1.25), x).value == 0.0, "constant input gives 0");

  double grad_worst = 0;
  for (std::uint64_t s = 0; s < 3; ++s) {
    Tensor a = random_tensor({10, 3}, 40 + s), b = random_tensor({10, 2}, 50 + s);
    const auto g = dcor_with_grad(a, b);
    grad_worst = std::max(grad_worst, max_rel_fd_error(a, g.grad_a, [&] { return dcor(a, b).value; }));
    grad_worst = std::max(grad_worst, max_rel_fd_error(b, g.grad_b, [&] { return dcor(a, b).value; }));
  }
  c.expect(grad_worst <= 1e-4, "gradient relative error " + sci(grad_worst));

  const double t = seconds_since(t0);
  c.expect(t < 30.0, "runtime " + fmt(t, 1) + " s");
  return c.outcome("max |dcor - oracle| " + sci(worst) + ", gradient rel. error " +
                   sci(grad_worst) + ", " + fmt(t, 2) + " s");
}

// ---------------------------------------------------------------------------
// 3. MINE calibration on correlated Gaussians

Outcome criterion_mine() {
  const auto t0 = Clock::now();
  Checks c;
  std::string summary;
  for (double rho : {0.0, 0.5, 0.9}) {
    for (int d : {1, 4}) {
      std::vector<double> est;
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto [x, z] = correlated_gaussians(10000, rho, static_cast<std::size_t>(d), derive_seed(seed, "gauss"));
        MineState state(static_cast<std::size_t>(d), static_cast<std::size_t>(d), 64, 0.99,
                        derive_seed(seed, "mine_init"));
        MineFitOptions o;
        o.steps = 1500;
        o.batch = 256;
        o.learning_rate = 1e-3;
        o.seed = derive_seed(seed, "mine_batches");
        fit_mine(x, z, state, o);
        est.push_back(mine_estimate(x, z, state).value);
      }
      std::sort(est.begin(), est.end());
      const double median = est[2], truth = gaussian_mi(rho, d);
      const bool ok = rho == 0.0 ? std::abs(median) <= 0.05 : std::abs(median - truth) <= 0.1 * truth;
      const std::string tag = "rho " + fmt(rho, 1) + " d " + std::to_string(d);
      c.expect(ok, tag + ": median " + fmt(median) + " vs " + fmt(truth));
      summary += (summary.empty() ? "" : ", ") + tag + " " + fmt(median, 3) + "/" + fmt(truth, 3);
    }
  }
  const double t = seconds_since(t0);
  c.expect(t < 300.0, "runtime " + fmt(t, 0) + " s");
  return c.outcome("median estimate/true nats: " + summary + ", " + fmt(t, 0) + " s");
}

// ---------------------------------------------------------------------------
// Tiny trainer instance shared by criteria 4 and 5.

ExperimentConfig tiny_config(MethodKind kind, int n_b) {
  ExperimentConfig c = parse_config(R"(
factors:
  - {name: y, role: primary, cardinality: 2, generator: {kind: shape}}
  - {name: z1, role: spurious, cardinality: 2, generator: {kind: intensity}}
  - {name: z2, role: spurious, cardinality: 2, generator: {kind: stripes}}
model: {channels: [2, 3, 4, 4], image_size: 16}
hyperparams: {subvector_dim: 3, batch_size: 4, n_epoch: 2, mine_hidden: 8, seed: 11}
)");
  c.method.kind = kind;
  c.hyper.n_b = n_b;
  return c;
}

SplitBundle tiny_splits(const ExperimentConfig& c, std::size_t per_cell) {
  SplitBundle s;
  s.train = generate_synthetic(c.ordered_factors(), per_cell, 16, 0.2, 1, "t");
  s.val = generate_synthetic(c.ordered_factors(), 2, 16, 0.2, 2, "v");
  s.inverted = generate_synthetic(c.ordered_factors(), 2, 16, 0.2, 3, "i");
  s.balanced = generate_synthetic(c.ordered_factors(), 2, 16, 0.2, 4, "b");
  return s;
}

template <class T>
std::vector<Tensor> snapshot(const std::vector<T>& items) {
  std::vector<Tensor> out;
  for (const auto& it : items) {
    if constexpr (std::is_pointer_v<T>) out.push_back(it->value);
    else out.push_back(*it.second);
  }
  return out;
}

// ---------------------------------------------------------------------------
// 4. Network invariants and the full-model gradient check

Outcome criterion_network() {
  Checks c;
  const Tensor x = random_tensor({7, 15}, 1);
  const FeatureBundle b = partition(x, 4, 3);
  c.expect(join(b) == x, "join(partition(x)) == x");
  c.expect(b.f_y == x.slice_cols(0, 3), "f_y block");
  for (std::size_t i = 0; i < 4; ++i) c.expect(b.f_z[i] == x.slice_cols(3 * (i + 1), 3), "f_z block");

  ModelSpec spec;
  spec.channels = {2, 3, 4, 4};
  spec.image_size = 16;
  const std::vector<FactorSpec> factors{{"y", 2, FactorRole::primary, {}},
                                        {"z1", 2, FactorRole::spurious, {}},
                                        {"z2", 3, FactorRole::spurious, {}}};
  MimmxModel model(spec, factors, 3, true, 0.1, 9);
  const FeatureBundle f = encode(static_cast<const MimmxModel&>(model), random_tensor({6, 1, 16, 16}, 2));
  const Tensor before = predict_primary(model, f.f_y);
  Tensor moved = join(f);
  for (std::size_t r = 0; r < moved.rows(); ++r)
    for (std::size_t k = 3; k < 9; ++k) moved(r, k) += 17.0 * (r + 1) - 3.0 * k;
  c.expect(predict_primary(model, partition(moved, 2, 3).f_y) == before, "head locality");

  Rng rng(3);
  std::normal_distribution<double> n(0, 3);
  double caw_worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> logits(1 + trial % 6);
    for (double& v : logits) v = n(rng);
    const auto w = caw_weights(logits);
    double sum = 0;
    for (double v : w) {
      c.expect(v >= 0.0, "CAW weight non-negative");
      sum += v;
    }
    caw_worst = std::max(caw_worst, std::abs(sum - 1.0));
    auto shifted = logits;
    const double k = 50.0 * n(rng);
    for (double& v : shifted) v += k;
    const auto ws = caw_weights(shifted);
    for (std::size_t i = 0; i < w.size(); ++i) caw_worst = std::max(caw_worst, std::abs(ws[i] - w[i]));
  }
  c.expect(caw_worst <= 1e-6, "CAW simplex/shift " + sci(caw_worst));

  // Every trainable block of the full model, total loss incl. the penalty.
  double worst = 0;
  for (MethodKind kind : {MethodKind::mimmx, MethodKind::dcor}) {
    ExperimentConfig cfg = tiny_config(kind, 3);
    cfg.method.use_dls = false;       // gamma would otherwise depend on the losses
    cfg.hyper.learning_rate = 1e-300;  // main_step applies an update; keep it inert
    const SplitBundle s = tiny_splits(cfg, 2);
    TrainState st = TrainState::create(cfg);
    std::vector<std::size_t> batch(s.train.size());
    for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = i;
    if (st.mine)
      for (int k = 0; k < 5; ++k) mine_step(st, s.train, batch);
    for (Param* p : st.model.params()) {
      const std::size_t stride = std::max<std::size_t>(1, p->value.size() / 3);
      for (std::size_t k = 0; k < p->value.size(); k += stride) {
        main_step(st, s.train, batch);
        const double g = p->grad[k];
        const double keep = p->value[k], h = 1e-5;
        p->value[k] = keep + h;
        const double up = main_step(st, s.train, batch).breakdown.total;
        p->value[k] = keep - h;
        const double dn = main_step(st, s.train, batch).breakdown.total;
        p->value[k] = keep;
        const double num = (up - dn) / (2 * h);
        worst = std::max(worst, std::abs(num - g) / std::max({std::abs(num), std::abs(g), 1e-4}));
      }
    }
  }
  c.expect(worst <= 1e-4, "full-model gradient " + sci(worst));
  return c.outcome("CAW error " + sci(caw_worst) + ", full-model gradient rel. error " +
                   sci(worst));
}

// ---------------------------------------------------------------------------
// 5. Schedule accounting, freezing, determinism

std::string metrics_text(const std::vector<MetricsRecord>& m) {
  std::ostringstream out;
  for (const auto& r : m) out << r.to_json().dump() << '\n';
  return out.str();
}

Outcome criterion_schedule(const fs::path& scratch) {
  Checks c;
  for (int n_b : {2, 5, 6}) {
    // 120 samples at batch 4: 30 batches per epoch, a multiple of every n_b.
    const ExperimentConfig cfg = tiny_config(MethodKind::mimmx, n_b);
    const SplitBundle s = tiny_splits(cfg, 15);
    auto [state, result] = train(cfg, s);
    for (int e = 0; e < cfg.hyper.n_epoch; ++e) {
      std::size_t main = 0, mine = 0;
      for (const auto& r : result.metrics)
        if (r.epoch == e) (r.phase == Phase::main ? main : mine) += 1;
      c.expect(main > 0 && mine == static_cast<std::size_t>(n_b - 1) * main,
               "n_b " + std::to_string(n_b) + " epoch " + std::to_string(e) + ": " + std::to_string(mine) +
                   " MINE vs " + std::to_string(main) + " main");
    }
  }

  const ExperimentConfig cfg = tiny_config(MethodKind::mimmx, 3);
  const SplitBundle s = tiny_splits(cfg, 15);
  TrainState st = TrainState::create(cfg);
  const std::vector<std::size_t> batch{0, 4, 9, 31, 77, 100};
  const auto mine0 = snapshot(st.mine->net.params());
  const double ema0 = st.mine->ema;
  const auto model0 = snapshot(st.model.state());
  main_step(st, s.train, batch);
  c.expect(snapshot(st.mine->net.params()) == mine0 && st.mine->ema == ema0, "main step leaves MINE untouched");
  c.expect(snapshot(st.model.state()) != model0, "main step moves the model");
  const auto model1 = snapshot(st.model.state());
  const auto mine1 = snapshot(st.mine->net.params());
  mine_step(st, s.train, batch);
  c.expect(snapshot(st.model.state()) == model1, "MINE step leaves the model untouched");
  c.expect(snapshot(st.mine->net.params()) != mine1, "MINE step moves MINE");

  const SplitBundle small = tiny_splits(cfg, 4);
  TrainOptions o1, o2;
  o1.out_dir = scratch / "det_a";
  o2.out_dir = scratch / "det_b";
  fs::remove_all(o1.out_dir);
  fs::remove_all(o2.out_dir);
  auto [a, ra] = train(cfg, small, o1);
  auto [b, rb] = train(cfg, small, o2);
  std::ifstream fa(o1.out_dir / "metrics.jsonl"), fb(o2.out_dir / "metrics.jsonl");
  const std::string ta((std::istreambuf_iterator<char>(fa)), {}), tb((std::istreambuf_iterator<char>(fb)), {});
  c.expect(!ta.empty() && ta == tb, "metrics.jsonl identical across same-seed reruns");
  c.expect(metrics_text(ra.metrics) == metrics_text(rb.metrics), "in-memory metrics identical");
  return c.outcome("n_b {2, 5, 6} phase counts, freeze checks, same-seed reruns");
}

// ---------------------------------------------------------------------------
// 6, 7, 10. Synthetic end-to-end experiment

struct SeedRun {
  std::uint64_t seed = 0;
  std::map<std::string, EvalReport> reports;  // baseline, mimmx
  std::map<std::string, double> silhouette_z1;
};

struct Experiment {
  std::vector<SeedRun> seeds;
  double seconds = 0;
  std::string error;
};

Experiment run_synthetic(const ExperimentConfig& base, int n_seeds, const fs::path& out) {
  Experiment ex;
  const auto t0 = Clock::now();
  try {
    ProbeOptions probe_opts;
    probe_opts.steps = base.hyper.probe_steps;
    probe_opts.learning_rate = base.hyper.probe_learning_rate;
    for (int k = 0; k < n_seeds; ++k) {
      ExperimentConfig cfg = base;
      cfg.hyper.seed = base.hyper.seed + static_cast<std::uint64_t>(k);
      const SplitBundle splits = prepare_splits(cfg);
      SeedRun sr;
      sr.seed = cfg.hyper.seed;
      for (MethodKind kind : {MethodKind::baseline, MethodKind::mimmx}) {
        ExperimentConfig run = cfg;
        run.method = standard_variant(kind, cfg);
        const std::string name = to_string(kind);
        const fs::path dir = out / ("seed" + std::to_string(sr.seed)) / name;
        fs::create_directories(dir);
        const auto t_run = Clock::now();
        auto [state, trained] = train(run, splits, {dir, std::nullopt, {}});
        EvalReport report = evaluate(state, splits);
        probe_all(state, splits, report, probe_opts);
        const EmbeddingTable emb = embeddings(state, splits.balanced, 0);
        const double sil = silhouette(emb.features(), emb.labels("z1"));
        report.metadata["silhouette_f_y_z1"] = sil;
        std::ofstream(dir / "eval.json") << report.to_json().dump(2) << '\n';
        std::fprintf(stderr, "  seed %llu %-8s gap %6.2f  inv %6.2f  f_y->z1 %5.1f  f_y->z2 %5.1f  sil %.3f  (%.0f s)\n",
                     static_cast<unsigned long long>(sr.seed), name.c_str(), report.gap_y,
                     report.accuracy.at("y").at("inverted"), report.probe.at("f_y").at("z1"),
                     report.probe.at("f_y").at("z2"), sil, seconds_since(t_run));
        sr.silhouette_z1[name] = sil;
        sr.reports.emplace(name, std::move(report));
      }
      ex.seeds.push_back(std::move(sr));
    }
  } catch (const std::exception& e) {
    ex.error = e.what();
  }
  ex.seconds = seconds_since(t0);

  json summary = json::array();
  for (const auto& sr : ex.seeds)
    for (const auto& [name, r] : sr.reports) summary.push_back({{"seed", sr.seed}, {"method", name}, {"report", r.to_json()}});
  fs::create_directories(out);
  std::ofstream(out / "summary.json") << json{{"runs", summary}, {"seconds", ex.seconds}, {"error", ex.error}}.dump(2)
                                      << '\n';
  return ex;
}

double mean_of(const Experiment& ex, const std::function<double(const SeedRun&)>& f) {
  double s = 0;
  for (const auto& sr : ex.seeds) s += f(sr);
  return s / static_cast<double>(ex.seeds.size());
}

std::string per_seed(const Experiment& ex, const std::function<double(const SeedRun&)>& f) {
  std::string s;
  for (const auto& sr : ex.seeds) s += (s.empty() ? "" : "/") + fmt(f(sr), 1);
  return s;
}

Outcome criterion_end_to_end(const Experiment& ex, int n_seeds) {
  if (!ex.error.empty()) return {false, "experiment failed: " + ex.error};
  Checks c;
  c.expect(static_cast<int>(ex.seeds.size()) == n_seeds, "seed count");
  auto gap = [](const char* m) { return [m](const SeedRun& s) { return s.reports.at(m).gap_y; }; };
  auto inv = [](const char* m) {
    return [m](const SeedRun& s) { return s.reports.at(m).accuracy.at("y").at("inverted"); };
  };
  const double base_gap = mean_of(ex, gap("baseline")), mx_gap = mean_of(ex, gap("mimmx"));
  const double inv_diff = mean_of(ex, inv("mimmx")) - mean_of(ex, inv("baseline"));
  c.expect(base_gap >= 20.0, "baseline gap " + fmt(base_gap, 1) + " < 20");
  c.expect(mx_gap <= 8.0, "MIMM-X gap " + fmt(mx_gap, 1) + " > 8");
  c.expect(inv_diff >= 15.0, "inverted difference " + fmt(inv_diff, 1) + " < 15");
  c.expect(ex.seconds <= 1200.0, "runtime " + fmt(ex.seconds, 0) + " s > 1200 s");
  return c.outcome("mean over " + std::to_string(ex.seeds.size()) + " seeds: baseline gap " + fmt(base_gap, 1) +
                   " [" + per_seed(ex, gap("baseline")) + "], MIMM-X gap " + fmt(mx_gap, 1) + " [" +
                   per_seed(ex, gap("mimmx")) + "], inverted MIMM-X minus baseline " + fmt(inv_diff, 1) + ", " +
                   fmt(ex.seconds, 0) + " s");
}

Outcome criterion_probes(const Experiment& ex) {
  if (!ex.error.empty()) return {false, "experiment failed: " + ex.error};
  Checks c;
  auto probe = [](const char* m, const char* src, const char* tgt) {
    return [=](const SeedRun& s) { return s.reports.at(m).probe.at(src).at(tgt); };
  };
  std::string d;
  for (const char* z : {"z1", "z2"}) {
    const double mx = mean_of(ex, probe("mimmx", "f_y", z)), bl = mean_of(ex, probe("baseline", "f_y", z));
    c.expect(std::abs(mx - 50.0) <= 7.0, std::string("MIMM-X f_y->") + z + " " + fmt(mx, 1));
    c.expect(bl >= 62.0, std::string("baseline f_y->") + z + " " + fmt(bl, 1));
    d += std::string(d.empty() ? "" : ", ") + "f_y->" + z + " MIMM-X " + fmt(mx, 1) + " baseline " + fmt(bl, 1);
  }
  for (const char* src : {"f_z1", "f_z2"})
    for (const char* m : {"mimmx", "baseline"}) {
      const double v = mean_of(ex, probe(m, src, "y"));
      c.expect(std::abs(v - 50.0) <= 10.0, std::string(m) + " " + src + "->y " + fmt(v, 1));
      d += std::string(", ") + src + "->y " + m + " " + fmt(v, 1);
    }
  return c.outcome(d);
}

Outcome criterion_silhouette(const Experiment& ex) {
  if (!ex.error.empty()) return {false, "experiment failed: " + ex.error};
  Checks c;
  const double bl = mean_of(ex, [](const SeedRun& s) { return s.silhouette_z1.at("baseline"); });
  const double mx = mean_of(ex, [](const SeedRun& s) { return s.silhouette_z1.at("mimmx"); });
  c.expect(bl - mx >= 0.1, "baseline minus MIMM-X " + fmt(bl - mx, 3) + " < 0.1");
  return c.outcome("silhouette of f_y by z1 on balanced: baseline " + fmt(bl, 3) + ", MIMM-X " + fmt(mx, 3));
}

// ---------------------------------------------------------------------------
// 8. Rebalance on the skew-0.9 synthetic train set

Outcome criterion_rebalance(const ExperimentConfig& cfg) {
  Checks c;
  const DatasetManifest train = make_training_set(cfg);
  const DatasetManifest out = rebalance(train, derive_seed(cfg.hyper.seed, "rebalance"));
  // Independent recount keyed on (y, z tuple).
  std::map<std::pair<int, std::vector<int>>, std::size_t> in_cells, out_cells;
  std::map<int, std::size_t> in_y, out_y;
  for (const auto& r : train.records) ++in_cells[{r.y, r.z}], ++in_y[r.y];
  for (const auto& r : out.records) ++out_cells[{r.y, r.z}], ++out_y[r.y];
  const std::size_t tuples = train.cells().cells_per_class();
  for (const auto& [y, n] : in_y) {
    std::size_t class_max = 0;
    for (const auto& [cell, k] : in_cells)
      if (cell.first == y) class_max = std::max(class_max, k);
    std::size_t seen = 0;
    for (const auto& [cell, k] : out_cells)
      if (cell.first == y) {
        ++seen;
        c.expect(k == class_max, "cell count " + std::to_string(k) + " != class max " + std::to_string(class_max));
      }
    c.expect(seen == tuples, "every cell present for y=" + std::to_string(y));
    const double p_in = static_cast<double>(n) / static_cast<double>(train.size());
    const double p_out = static_cast<double>(out_y[y]) / static_cast<double>(out.size());
    c.expect(std::abs(p_in - p_out) <= 1e-12, "P(y=" + std::to_string(y) + ") " + fmt(p_in) + " -> " + fmt(p_out));
  }
  const double growth = static_cast<double>(out.size()) / static_cast<double>(train.size());
  c.expect(growth >= 2.5, "growth " + fmt(growth, 3));
  return c.outcome(std::to_string(train.size()) + " -> " + std::to_string(out.size()) + " samples (x" +
                   fmt(growth, 3) + ")");
}

// ---------------------------------------------------------------------------
// 9. Correlation-induction counts against the closed form

std::vector<std::vector<int>> z_tuples(const std::vector<FactorSpec>& f) {
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

Outcome criterion_induce() {
  Checks c;
  const char* kinds[] = {"intensity", "stripes", "corner"};
  std::size_t cases = 0;
  for (const std::vector<int>& shape : std::vector<std::vector<int>>{{2, 2}, {3, 2}, {2}, {2, 2, 2}}) {
    std::vector<FactorSpec> f{{"y", 2, FactorRole::primary, {{"kind", "shape"}}}};
    for (std::size_t i = 0; i < shape.size(); ++i)
      f.push_back({"z" + std::to_string(i + 1), shape[i], FactorRole::spurious, {{"kind", kinds[i % 3]}}});
    const DatasetManifest pool = generate_synthetic(f, 1500, 16, 0.0, 4);
    const auto tuples = z_tuples(f);
    for (double skew : {0.5, 0.6, 0.75, 0.9, 0.95, 1.0}) {
      for (std::size_t budget : {1, 10, 100, 333, 1000, 1500}) {
        CorrelationSpec corr;
        corr.skew = skew;
        for (int y = 0; y < 2; ++y) {
          std::vector<int> t;
          for (std::size_t i = 1; i < f.size(); ++i) t.push_back(y % f[i].cardinality);
          corr.assignment.push_back(t);
        }
        const DatasetManifest out = induce_correlation(pool, corr, budget, 13);
        std::map<std::pair<int, std::vector<int>>, std::size_t> got;
        for (const auto& r : out.records) ++got[{r.y, r.z}];
        // Closed form: round(skew * budget) in the majority tuple, the
        // remainder spread evenly, leftover units to the earliest others.
        bool same = true;
        for (int y = 0; y < 2; ++y) {
          const auto major = static_cast<std::size_t>(std::llround(skew * static_cast<double>(budget)));
          const std::size_t rest = budget - major, others = tuples.size() - 1;
          std::size_t extra = rest % others;
          for (const auto& t : tuples) {
            std::size_t want = rest / others;
            if (t == corr.assignment[static_cast<std::size_t>(y)]) want = major;
            else if (extra > 0) ++want, --extra;
            const auto it = got.find({y, t});
            same = same && (it == got.end() ? 0 : it->second) == want;
          }
        }
        ++cases;
        c.expect(same && out.size() == 2 * budget,
                 "shape " + std::to_string(shape.size()) + " skew " + fmt(skew, 2) + " budget " + std::to_string(budget));
      }
    }
  }
  return c.outcome(std::to_string(cases) + " (shape, skew, budget) cases incl. skew 0.9 at budget 1500");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::string config_path = MIMMX_SOURCE_DIR "/configs/synthetic.yaml";
  std::string out = "acceptance_runs";
  int n_seeds = 3;
  app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',');
  app.add_option("--config", config_path, "Synthetic experiment config");
  app.add_option("--out", out, "Directory for the end-to-end run artifacts");
  app.add_option("--seeds", n_seeds, "Seeds for the end-to-end experiment");
  CLI11_PARSE(app, argc, argv);

  const std::set<int> wanted = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}
                                            : std::set<int>(only.begin(), only.end());
  const fs::path out_dir = fs::absolute(out);
  fs::create_directories(out_dir);

  std::optional<ExperimentConfig> cfg;
  std::string cfg_error;
  try {
    cfg = load_config(config_path);
  } catch (const std::exception& e) {
    cfg_error = e.what();
  }

  std::optional<Experiment> experiment;
  auto shared_runs = [&]() -> const Experiment& {
    if (!experiment) {
      if (!cfg) {
        experiment = Experiment{};
        experiment->error = "config: " + cfg_error;
      } else {
        std::fprintf(stderr, "end-to-end experiment: %d seeds, baseline and mimmx\n", n_seeds);
        experiment = run_synthetic(*cfg, n_seeds, out_dir);
      }
    }
    return *experiment;
  };

  const std::map<int, std::pair<std::string, std::function<Outcome()>>> criteria{
      {1, {"scalar oracles", criterion_scalar}},
      {2, {"dCor oracle", criterion_dcor}},
      {3, {"MINE calibration", criterion_mine}},
      {4, {"network invariants", criterion_network}},
      {5, {"trainer schedule", [&] { return criterion_schedule(out_dir); }}},
      {6, {"end-to-end shortcut mitigation", [&] { return criterion_end_to_end(shared_runs(), n_seeds); }}},
      {7, {"disentanglement probes", [&] { return criterion_probes(shared_runs()); }}},
      {8, {"rebalance", [&]() -> Outcome {
             if (!cfg) return {false, "config: " + cfg_error};
             return criterion_rebalance(*cfg);
           }}},
      {9, {"correlation induction", criterion_induce}},
      {10, {"embedding separation", [&] { return criterion_silhouette(shared_runs()); }}},
  };

  int failed = 0;
  for (const auto& [id, entry] : criteria) {
    if (!wanted.count(id)) continue;
    Outcome o;
    try {
      o = entry.second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %2d %s  %s: %s\n", id, o.pass ? "PASS" : "FAIL", entry.first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
