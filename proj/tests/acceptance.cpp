#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "fdnm/fdnm.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace fdnm;
using namespace fdnm::test;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double max_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Tensor quantize(const Tensor& t) { return decode_pnm(encode_pnm(t), "quantize"); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------

Verdict fourier_correctness() {
  const auto t0 = Clock::now();
  double dft_err = 0.0, trip_err = 0.0, parseval_err = 0.0;
  const std::size_t sizes[] = {2, 3, 4, 8};
  std::uint64_t seed = 0;
  for (std::size_t h : sizes) {
    for (std::size_t w : sizes) {
      const Tensor x = rand_tensor({2, h, w}, ++seed);
      const ComplexTensor z = fft2_complex(x);
      for (std::size_t c = 0; c < 2; ++c) {
        std::vector<std::complex<double>> plane(h * w);
        for (std::size_t i = 0; i < h * w; ++i) plane[i] = x[c * h * w + i];
        const auto ref = naive_dft(plane, h, w);
        double scale = 0.0, err = 0.0;
        for (std::size_t i = 0; i < h * w; ++i) {
          const std::complex<double> got(z.re[c * h * w + i], z.im[c * h * w + i]);
          scale = std::max(scale, std::abs(ref[i]));
          err = std::max(err, std::abs(got - ref[i]));
        }
        dft_err = std::max(dft_err, err / scale);
      }
      const Tensor back = ifft2(z);
      trip_err = std::max(trip_err, max_diff(back.values(), x.values()));
      double e_x = 0.0, e_z = 0.0;
      for (std::size_t i = 0; i < x.numel(); ++i) e_x += x[i] * x[i], e_z += z.re[i] * z.re[i] + z.im[i] * z.im[i];
      parseval_err = std::max(parseval_err, std::abs(e_x - e_z) / e_x);
    }
  }
  const double secs = seconds_since(t0);
  char buf[200];
  std::snprintf(buf, sizeof(buf), "dft rel err %.2e, round trip %.2e, parseval %.2e, %.2fs", dft_err, trip_err,
                parseval_err, secs);
  return {dft_err <= 1e-10 && trip_err <= 1e-10 && parseval_err <= 1e-10 && secs < 5.0, buf};
}

Verdict gradient_suite() {
  const auto t0 = Clock::now();
  const auto results = gradcheck_suite(20, 0);
  const double secs = seconds_since(t0);
  const std::set<std::string> required = {"conv1x1",         "gap",           "sigmoid",     "batch_norm/4d",
                                          "batch_norm/2d",   "instance_norm", "recombine/ifft2", "agp_forward",
                                          "anm_forward",     "cross_entropy", "triplet_batch_hard", "cnm_branch",
                                          "cnm_total",       "total_loss"};
  std::set<std::string> names;
  std::size_t failed = 0;
  double worst = 0.0;
  std::set<std::uint64_t> seeds;
  for (const auto& r : results) {
    names.insert(r.name);
    seeds.insert(r.seed);
    worst = std::max(worst, r.max_rel_err);
    if (!r.passed()) {
      ++failed;
      std::cout << "  gradcheck failure: " << r.name << " seed " << r.seed << " err " << r.max_rel_err << " at "
                << r.worst << "\n";
    }
  }
  std::string missing;
  for (const auto& n : required) {
    if (!names.count(n)) missing += " " + n;
  }
  char buf[240];
  std::snprintf(buf, sizeof(buf), "%zu checks over %zu ops x %zu seeds, %zu failed, max rel err %.2e, %.1fs%s%s",
                results.size(), names.size(), seeds.size(), failed, worst, secs, missing.empty() ? "" : ", missing:",
                missing.c_str());
  return {failed == 0 && missing.empty() && seeds.size() >= 20 && secs < 120.0, buf};
}

CenterSet centers_1d(Branch b, std::vector<double> v) {
  const std::size_t p = v.size();
  std::vector<std::size_t> ids(p);
  for (std::size_t i = 0; i < p; ++i) ids[i] = i + 1;
  return {b, ids, Tensor({p, 1}, std::move(v))};
}

Verdict loss_oracles() {
  const double hand1 = cnm_branch(centers_1d(Branch::v1, {0, 1}), centers_1d(Branch::i1, {2, 1}),
                                  centers_1d(Branch::v2, {0, 1}), 0.2)
                           .item();
  const double hand2 = cnm_branch(centers_1d(Branch::v1, {0, 10}), centers_1d(Branch::i1, {1, 10}),
                                  centers_1d(Branch::v2, {0.5, 10}), 0.2)
                           .item();
  const double single = cnm_branch(centers_1d(Branch::v1, {3}), centers_1d(Branch::i1, {1}),
                                   centers_1d(Branch::v2, {7}), 0.2)
                            .item();

  double trip_err = 0.0;
  Rng r(17, "acceptance-triplet");
  for (int trial = 0; trial < 200; ++trial) {
    // Every label needs a positive and a negative: 2..8 classes of 2..8 samples, at most 16 in total.
    const std::size_t classes = 2 + r.index(7), per = 2 + r.index(std::min<std::size_t>(7, 16 / classes - 1));
    const std::size_t d = 1 + r.index(6);
    std::vector<std::size_t> labels;
    for (std::size_t c = 0; c < classes; ++c) labels.insert(labels.end(), per, 5 * c + 2);
    for (std::size_t i = labels.size(); i-- > 1;) std::swap(labels[i], labels[r.index(i + 1)]);
    const Tensor e = rand_tensor({labels.size(), d}, 1000 + static_cast<std::uint64_t>(trial), -2.0, 2.0);
    const double margin = r.uniform(0.0, 1.0);
    trip_err = std::max(trip_err, std::abs(triplet_batch_hard(e, labels, margin).item() - brute_triplet(e, labels, margin)));
  }
  char buf[200];
  std::snprintf(buf, sizeof(buf), "cnm hand %.12g (3.2) and %.12g (0), P=1 %.3g, triplet max err %.2e over 200 batches",
                hand1, hand2, single, trip_err);
  return {std::abs(hand1 - 3.2) <= 1e-12 && std::abs(hand2) <= 1e-12 && single == 0.0 && trip_err <= 1e-12, buf};
}

Verdict metric_oracle() {
  Rng r(23, "acceptance-metric");
  std::size_t mismatches = 0, not_monotone = 0, not_invariant = 0, instances = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t nq = 1 + r.index(50), ng = 1 + r.index(200);
    RetrievalTable t = random_table(r, nq, ng, trial % 3 == 0);
    const Brute b = brute_force(t);
    if (b.skipped == nq) continue;
    ++instances;
    const CmcResult got = cmc_map(t);
    if (got.cmc != b.cmc || got.map != b.map || got.skipped != b.skipped) ++mismatches;
    for (std::size_t k = 1; k < got.cmc.size(); ++k) {
      if (got.cmc[k] < got.cmc[k - 1]) {
        ++not_monotone;
        break;
      }
    }
    for (const auto& f : std::vector<std::function<double(double)>>{
             [](double d) { return std::exp(d); }, [](double d) { return 3.0 * d + 1.0; },
             [](double d) { return d * d * d; }}) {
      RetrievalTable u = t;
      for (double& d : u.dist.data) d = f(d);
      const CmcResult v = cmc_map(u);
      if (v.cmc != got.cmc || v.map != got.map) ++not_invariant;
    }
  }
  char buf[200];
  std::snprintf(buf, sizeof(buf), "%zu instances: %zu mismatches, %zu non-monotone, %zu transform violations", instances,
                mismatches, not_monotone, not_invariant);
  return {instances >= 90 && mismatches == 0 && not_monotone == 0 && not_invariant == 0, buf};
}

Verdict swap_property() {
  double self_err = 0.0, sym_err = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Tensor a = rand_tensor({3, 6 + s, 5 + s}, 50 + s, 0.0, 1.0);
    const auto [x, y] = swap_components(a, a);
    self_err = std::max({self_err, max_diff(x.values(), a.values()), max_diff(y.values(), a.values())});
    const Tensor amp_only = component_only(a, Component::amplitude);
    const std::size_t h = a.dim(1), w = a.dim(2);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          const double v = amp_only[(c * h + i) * w + j];
          const double m = amp_only[(c * h + (h - i) % h) * w + (w - j) % w];
          sym_err = std::max(sym_err, std::abs(v - m));
        }
      }
    }
  }

  // Same-identity VIS/IR pairs of the synthetic test split, as in the qualitative
  // experiment. The swapped images go through 8-bit files before the second swap.
  const Dataset ds = generate(SynthSpec{});
  std::vector<double> per_pair;
  for (const auto& va : ds.test) {
    if (va.modality != Modality::visible) continue;
    for (const auto& ir : ds.test) {
      if (ir.modality != Modality::infrared || ir.identity != va.identity) continue;
      const Tensor a = quantize(va.image), b = quantize(ir.image);
      const auto [x1, x2] = swap_components(a, b);
      const auto [y1, y2] = swap_components(quantize(x1), quantize(x2));
      per_pair.push_back(std::max(max_diff(quantize(y1).values(), a.values()), max_diff(quantize(y2).values(), b.values())));
    }
  }
  const double worst = *std::max_element(per_pair.begin(), per_pair.end());
  const std::size_t within = static_cast<std::size_t>(
      std::count_if(per_pair.begin(), per_pair.end(), [](double e) { return e <= 2.0 / 255.0 + 1e-9; }));
  char buf[260];
  std::snprintf(buf, sizeof(buf),
                "self-swap %.2e, amp-only symmetry %.2e, double swap over %zu pairs: max %.2f/255, median %.2f/255, "
                "%zu within 2/255",
                self_err, sym_err, per_pair.size(), worst * 255.0, median(per_pair) * 255.0, within);
  return {self_err <= 1e-10 && sym_err <= 1e-8 && worst <= 2.0 / 255.0 + 1e-9, buf};
}

// ---------------------------------------------------------------------------
// Training criteria share one grid of runs.

struct Variant {
  const char* name;
  bool agp, anm_cnm;
};

constexpr Variant kVariants[] = {
    {"baseline", false, false}, {"baseline+AGP", true, false}, {"baseline+ANM+cnm", false, true}, {"FDNM", true, true}};
constexpr std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};

struct RunOutcome {
  double rank1 = 0.0, map = 0.0, gap = 0.0, untrained_gap = 0.0, untrained_rank1 = 0.0, seconds = 0.0;
};

struct Grid {
  // [variant][seed]
  std::vector<std::vector<RunOutcome>> runs;
};

Grid run_grid() {
  Grid g;
  g.runs.resize(std::size(kVariants));
  for (std::size_t v = 0; v < std::size(kVariants); ++v) {
    for (std::uint64_t seed : kSeeds) {
      RunConfig c = RunConfig::desk();
      c.set_seed(seed);
      c.train.use_agp = kVariants[v].agp;
      c.train.use_anm = c.train.use_cnm = kVariants[v].anm_cnm;
      c.train.eval_every = 0;
      c.validate();
      const Dataset ds = generate(c.synth);
      RunOutcome o;
      if (kVariants[v].agp && kVariants[v].anm_cnm) {
        FdnmModel fresh(c.backbone, c.train.switches(), ds.spec.num_identities, seed);
        const EvalReport before = evaluate(fresh, ds.test);
        o.untrained_gap = before.dist.gap();
        o.untrained_rank1 = before.cmc.rank(1);
      }
      const auto t0 = Clock::now();
      const TrainResult r = train(c.train, c.backbone, ds, {});
      o.seconds = seconds_since(t0);
      o.rank1 = r.final_eval.cmc.rank(1);
      o.map = r.final_eval.cmc.map;
      o.gap = r.final_eval.dist.gap();
      std::printf("  %-17s seed %llu: rank1 %.4f mAP %.4f gap %.4f (%.0fs)\n", kVariants[v].name,
                  static_cast<unsigned long long>(seed), o.rank1, o.map, o.gap, o.seconds);
      std::fflush(stdout);
      g.runs[v].push_back(o);
    }
  }
  return g;
}

Verdict toy_training(const Grid& g) {
  const auto& runs = g.runs[3];
  std::size_t ok = 0;
  double slowest = 0.0;
  std::string per_seed;
  for (const auto& o : runs) {
    ok += o.rank1 >= 0.90 && o.map >= 0.80;
    slowest = std::max(slowest, o.seconds);
    char b[48];
    std::snprintf(b, sizeof(b), " %.3f/%.3f", o.rank1, o.map);
    per_seed += b;
  }
  char buf[240];
  std::snprintf(buf, sizeof(buf), "FDNM rank1/mAP per seed:%s; %zu/5 meet 0.90/0.80; slowest run %.0fs", per_seed.c_str(),
                ok, slowest);
  return {ok >= 4 && slowest < 600.0, buf};
}

Verdict ablation_direction(const Grid& g) {
  double med[std::size(kVariants)];
  for (std::size_t v = 0; v < std::size(kVariants); ++v) {
    std::vector<double> maps;
    for (const auto& o : g.runs[v]) maps.push_back(o.map);
    med[v] = median(maps);
  }
  const double base = med[0], agp = med[1], anm = med[2], full = med[3];
  char buf[240];
  std::snprintf(buf, sizeof(buf), "median mAP baseline %.6f, +AGP %.6f, +ANM+cnm %.6f, FDNM %.6f", base, agp, anm, full);
  return {full >= agp && agp >= base && full >= anm && anm >= base, buf};
}

Verdict separation(const Grid& g) {
  const auto& runs = g.runs[3];
  double min_after = INFINITY, max_before = -INFINITY, chance = 0.0;
  for (const auto& o : runs) {
    min_after = std::min(min_after, o.gap);
    max_before = std::max(max_before, o.untrained_gap);
    chance += o.untrained_rank1 / static_cast<double>(runs.size());
  }
  char buf[240];
  std::snprintf(buf, sizeof(buf),
                "inter - intra cosine distance: trained min %.4f, random init max %.4f (random init rank1 mean %.3f)",
                min_after, max_before, chance);
  return {min_after >= 0.05 && max_before < 0.05, buf};
}

// ---------------------------------------------------------------------------

Verdict determinism() {
  const fs::path root = fs::temp_directory_path() / "fdnm_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  for (const char* run : {"a", "b"}) {
    const std::string cmd = std::string(FDNM_CLI_PATH) + " train --desk --seed 7 --out " + (root / run).string() +
                            " > " + (root / (std::string(run) + ".log")).string() + " 2>&1";
    if (std::system(cmd.c_str()) != 0) return {false, "train command failed, see " + (root / run).string() + ".log"};
  }
  std::size_t files = 0, checkpoints = 0, differ = 0;
  for (const auto& e : fs::directory_iterator(root / "a")) {
    const fs::path other = root / "b" / e.path().filename();
    ++files;
    checkpoints += e.path().extension() == ".fdnm";
    if (!fs::exists(other) || read_file(e.path().string()) != read_file(other.string())) ++differ;
  }
  std::size_t files_b = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(root / "b")) ++files_b;
  const bool has_metrics = fs::exists(root / "a" / "metrics.csv");
  char buf[200];
  std::snprintf(buf, sizeof(buf), "%zu files (%zu checkpoints, metrics.csv %s), %zu differ", files, checkpoints,
                has_metrics ? "present" : "missing", differ + (files_b != files));
  return {has_metrics && checkpoints > 0 && differ == 0 && files_b == files, buf};
}

Verdict hyperparameter_wiring() {
  const RunConfig c;
  const TrainConfig& t = c.train;
  std::vector<std::string> wrong;
  auto expect = [&](bool ok, const char* what) {
    if (!ok) wrong.push_back(what);
  };
  expect(t.weights.lambda1 == 1.0, "lambda1");
  expect(t.weights.lambda2 == 0.5, "lambda2");
  expect(t.weights.margin_cnm == 0.2, "margin_cnm");
  expect(t.P == 6, "P");
  expect(t.K == 4, "K");
  expect(t.momentum == 0.9, "momentum");
  expect(t.epochs == 150, "epochs");
  expect(t.init_lr == 1e-2 && t.base_lr == 1e-1 && t.warmup_epochs == 10, "warmup");
  expect(t.milestones == std::vector<std::size_t>{20, 80, 120}, "milestones");
  expect(t.decay_lrs == std::vector<double>{1e-2, 1e-3, 1e-4}, "decay lrs");
  const std::pair<std::size_t, double> points[] = {{0, 1e-2},  {5, 0.055},  {9, 0.091}, {10, 1e-1}, {19, 1e-1},
                                                   {20, 1e-2}, {79, 1e-2},  {80, 1e-3}, {119, 1e-3}, {120, 1e-4},
                                                   {149, 1e-4}};
  for (const auto& [e, lr] : points) expect(std::abs(lr_at(t, e) - lr) <= 1e-15, "schedule");
  // A config file that sets nothing reproduces the defaults.
  expect(parse_config("# empty\n") == c, "empty config");
  std::string detail = "lambda1 1.0, lambda2 0.5, m 0.2, P 6, K 4, momentum 0.9, lr 1e-2 -> 1e-1 over 10 epochs, "
                       "1e-2/1e-3/1e-4 after 20/80/120 of 150";
  for (const auto& w : wrong) detail += "; wrong: " + w;
  return {wrong.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  // Usage: fdnm_acceptance [--strict] [--report FILE] [criterion ids...]
  // Without --strict the exit status only reports whether every criterion produced a verdict.
  std::set<int> only;
  bool strict = false;
  std::string report_path = "acceptance_report.txt";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--strict") strict = true;
    else if (a == "--report" && i + 1 < argc) report_path = argv[++i];
    else only.insert(std::atoi(argv[i]));
  }
  auto selected = [&](int id) { return only.empty() || only.count(id) > 0; };

  int failed = 0, errors = 0;
  std::string lines;
  auto report = [&](int id, const char* name, const std::function<Verdict()>& f) {
    if (!selected(id)) return;
    Verdict v;
    try {
      v = f();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
      ++errors;
    }
    char head[64];
    std::snprintf(head, sizeof(head), "%s %d %s: ", v.pass ? "PASS" : "FAIL", id, name);
    const std::string line = head + v.detail + "\n";
    std::fputs(line.c_str(), stdout);
    std::fflush(stdout);
    lines += line;
    failed += !v.pass;
  };

  report(1, "fourier correctness", fourier_correctness);
  report(2, "gradient suite", gradient_suite);
  report(3, "loss oracles", loss_oracles);
  report(4, "metric oracle", metric_oracle);
  report(5, "swap property", swap_property);

  Grid grid;
  std::string grid_error;
  if (selected(6) || selected(7) || selected(8)) {
    std::printf("  training 4 variants x 5 seeds on the desk schedule\n");
    std::fflush(stdout);
    try {
      grid = run_grid();
    } catch (const std::exception& e) {
      grid_error = e.what();
    }
  }
  auto with_grid = [&](Verdict (*f)(const Grid&)) {
    return [&, f]() -> Verdict {
      if (!grid_error.empty()) throw Error("training failed: " + grid_error);
      return f(grid);
    };
  };
  report(6, "toy training", with_grid(toy_training));
  report(7, "ablation direction", with_grid(ablation_direction));
  report(8, "distance separation", with_grid(separation));
  report(9, "determinism", determinism);
  report(10, "hyperparameter wiring", hyperparameter_wiring);

  char tail[64];
  std::snprintf(tail, sizeof(tail), "%d of %zu criteria failed\n", failed, only.empty() ? std::size_t{10} : only.size());
  std::fputs(tail, stdout);
  lines += tail;
  try {
    write_file(report_path, lines);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "cannot write report: %s\n", e.what());
    return 1;
  }
  if (errors > 0) return 1;
  return strict && failed > 0 ? 1 : 0;
}
