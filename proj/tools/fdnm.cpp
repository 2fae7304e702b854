#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fdnm/fdnm.hpp"

namespace fs = std::filesystem;
using namespace fdnm;

namespace {

// Options shared by the commands that build a run configuration.
struct RunOptions {
  std::string config;
  bool desk = false;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;  // extra "key=value" lines
  std::string data;                   // dataset directory instead of generating
};

void add_run_options(CLI::App* cmd, RunOptions& o) {
  cmd->add_option("--config", o.config, "flat key = value config file");
  cmd->add_flag("--desk", o.desk, "30-epoch desk schedule as the base");
  cmd->add_option("--seed", o.seed, "override the seed key");
  cmd->add_option("--set", o.overrides, "extra key=value settings, applied last");
  cmd->add_option("--data", o.data, "dataset directory written by `synth` (default: generate)");
}

RunConfig build_config(const RunOptions& o) {
  RunConfig c = o.desk ? RunConfig::desk() : RunConfig{};
  if (!o.config.empty()) c = load_config(o.config, c);
  std::string extra;
  for (const auto& s : o.overrides) extra += s + "\n";
  if (!extra.empty()) c = parse_config(extra, c, "--set");
  if (o.seed) c.set_seed(*o.seed);
  c.validate();
  return c;
}

Dataset build_dataset(const RunConfig& c, const std::string& data_dir) {
  if (data_dir.empty()) return generate(c.synth);
  Dataset d = read_dataset(data_dir);
  if (d.train.empty() || d.test.empty()) throw Error(data_dir + ": dataset needs train and test samples");
  return d;
}

void print_seed(const RunConfig& c) { std::cout << "seed " << c.seed() << "\n"; }

// One float plane [H x W] as an FDNM1 file.
void write_plane(const fs::path& path, const std::string& name, std::size_t h, std::size_t w,
                 std::span<const double> values) {
  write_file(path.string(), encode_fdnm1({{name, {h, w}, std::vector<double>(values.begin(), values.end())}}));
}

std::vector<double> read_plane(const fs::path& path, std::size_t& h, std::size_t& w) {
  const auto arrays = decode_fdnm1(read_file(path.string()), path.string());
  if (arrays.size() != 1 || arrays[0].shape.size() != 2) throw Error(path.string() + ": expected one [H x W] plane");
  h = arrays[0].shape[0];
  w = arrays[0].shape[1];
  return arrays[0].values;
}

// Centered (DC in the middle) log-amplitude view scaled to [0, 1].
Tensor amp_view(std::span<const double> amp, std::size_t h, std::size_t w) {
  std::vector<double> v(h * w);
  double hi = 0.0;
  for (double a : amp) hi = std::max(hi, std::log1p(a));
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sy = (y + h / 2) % h, sx = (x + w / 2) % w;
      v[sy * w + sx] = hi > 0.0 ? std::log1p(amp[y * w + x]) / hi : 0.0;
    }
  }
  return Tensor({1, h, w}, std::move(v));
}

Tensor pha_view(std::span<const double> pha, std::size_t h, std::size_t w) {
  std::vector<double> v(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      v[((y + h / 2) % h) * w + (x + w / 2) % w] = (pha[y * w + x] + std::numbers::pi) / (2.0 * std::numbers::pi);
    }
  }
  return Tensor({1, h, w}, std::move(v));
}

std::size_t count_clamped(const Tensor& t) {
  return static_cast<std::size_t>(
      std::count_if(t.values().begin(), t.values().end(), [](double v) { return v < -1e-9 || v > 1.0 + 1e-9; }));
}

std::string find_latest_checkpoint(const fs::path& dir) {
  std::string best;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.rfind("epoch_", 0) == 0 && e.path().extension() == ".fdnm" && name > fs::path(best).filename().string()) {
      best = e.path().string();
    }
  }
  if (best.empty()) throw Error(dir.string() + ": no epoch_*.fdnm checkpoint");
  return best;
}

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  for (std::string cell; std::getline(ss, cell, ',');) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(cell, &used));
      if (cell.find_first_not_of(" ", used) != std::string::npos) throw std::invalid_argument(cell);
    } catch (const std::exception&) {
      throw Error("grid: '" + cell + "' is not a number");
    }
  }
  if (out.empty()) throw Error("grid: empty list");
  return out;
}

int cmd_synth(const RunOptions& o, const std::string& out) {
  const RunConfig c = build_config(o);
  print_seed(c);
  const Dataset d = generate(c.synth);
  write_dataset(d, out);
  std::cout << "wrote " << d.train.size() << " train and " << d.test.size() << " test images to " << out << "\n";
  return 0;
}

int cmd_decompose(const std::string& image, const std::string& out) {
  const Tensor img = load_image(image);
  const Spectrum s = fft2(img);
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  fs::create_directories(out);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const auto amp = s.amp.values().subspan(ch * h * w, h * w), pha = s.pha.values().subspan(ch * h * w, h * w);
    const std::string n = std::to_string(ch);
    write_plane(fs::path(out) / ("amp_c" + n + ".f32"), "amp_c" + n, h, w, amp);
    write_plane(fs::path(out) / ("pha_c" + n + ".f32"), "pha_c" + n, h, w, pha);
    save_image(amp_view(amp, h, w), (fs::path(out) / ("amp_c" + n + ".pgm")).string());
    save_image(pha_view(pha, h, w), (fs::path(out) / ("pha_c" + n + ".pgm")).string());
  }
  std::cout << "decomposed " << c << " channel(s) of " << h << "x" << w << " into " << out << "\n";
  return 0;
}

int cmd_recompose(const std::string& in, const std::string& out) {
  std::vector<double> amp, pha;
  std::size_t c = 0, h = 0, w = 0;
  for (; fs::exists(fs::path(in) / ("amp_c" + std::to_string(c) + ".f32")); ++c) {
    std::size_t h1, w1, h2, w2;
    const auto a = read_plane(fs::path(in) / ("amp_c" + std::to_string(c) + ".f32"), h1, w1);
    const auto p = read_plane(fs::path(in) / ("pha_c" + std::to_string(c) + ".f32"), h2, w2);
    if (h1 != h2 || w1 != w2 || (c > 0 && (h1 != h || w1 != w))) throw Error(in + ": plane sizes disagree");
    h = h1, w = w1;
    amp.insert(amp.end(), a.begin(), a.end());
    pha.insert(pha.end(), p.begin(), p.end());
  }
  if (c != 1 && c != 3) throw Error(in + ": expected amp_c0.f32 (and c1, c2 for color), found " + std::to_string(c) + " channel(s)");
  // float32 planes: drop the imaginary residue.
  const Tensor img = ifft2(recombine(Tensor({c, h, w}, amp), Tensor({c, h, w}, pha)), Residue::force_real);
  const std::size_t clamped = count_clamped(img);
  save_image(img, out);
  std::cout << "recomposed " << out << " (" << clamped << " values clamped)\n";
  return 0;
}

int cmd_swap(const std::string& a_path, const std::string& b_path, const std::string& out) {
  const Tensor a = load_image(a_path), b = load_image(b_path);
  if (a.shape() != b.shape()) {
    throw Error("swap: image sizes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  fs::create_directories(out);
  const auto [pha_a_amp_b, pha_b_amp_a] = swap_components(a, b);
  const std::string ext = a.dim(0) == 3 ? ".ppm" : ".pgm";
  const std::pair<std::string, Tensor> outputs[] = {
      {"pha_a_amp_b", pha_a_amp_b},
      {"pha_b_amp_a", pha_b_amp_a},
      {"amp_only_a", component_only(a, Component::amplitude)},
      {"pha_only_a", component_only(a, Component::phase)},
      {"amp_only_b", component_only(b, Component::amplitude)},
      {"pha_only_b", component_only(b, Component::phase)},
  };
  for (const auto& [stem, img] : outputs) {
    const std::string name = stem + ext;
    save_image(img, (fs::path(out) / name).string());
    std::cout << name << ": " << count_clamped(img) << " of " << img.numel() << " values clamped\n";
  }
  return 0;
}

int cmd_train(const RunOptions& o, const std::string& out, const std::string& resume) {
  const RunConfig c = build_config(o);
  print_seed(c);
  const Dataset d = build_dataset(c, o.data);
  fs::create_directories(out);
  write_file((fs::path(out) / "config.txt").string(), serialize_config(c));
  TrainOptions opts;
  opts.out_dir = out;
  if (!resume.empty()) opts.resume = resume;
  const auto start = std::chrono::steady_clock::now();
  opts.on_epoch = [&](const EpochMetrics& m) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("epoch %zu lr %.6g loss %.6f (id %.4f tri %.4f cnm %.4f)", m.epoch, m.lr, m.loss.total, m.loss.id,
                m.loss.tri, m.loss.cnm);
    if (m.rank1) std::printf(" rank1 %.4f mAP %.4f", *m.rank1, *m.map);
    std::printf(" [%.1fs]\n", secs);
    std::fflush(stdout);
  };
  const TrainResult r = train(c.train, c.backbone, d, opts);
  std::cout << summary_header() << "\n" << summary_row(r.final_eval.cmc) << "\n";
  return 0;
}

int cmd_eval(const RunOptions& o, const std::string& run, const std::string& checkpoint, bool random_init,
             const std::string& out) {
  RunOptions opts = o;
  if (!run.empty() && opts.config.empty() && fs::exists(fs::path(run) / "config.txt")) {
    opts.config = (fs::path(run) / "config.txt").string();
  }
  const RunConfig c = build_config(opts);
  print_seed(c);
  const Dataset d = build_dataset(c, o.data);
  FdnmModel model(c.backbone, c.train.switches(), d.spec.num_identities, c.seed());
  if (!random_init) {
    std::string ckpt = checkpoint;
    if (ckpt.empty()) {
      if (run.empty()) throw Error("eval: pass --run, --checkpoint or --random-init");
      ckpt = find_latest_checkpoint(run);
    }
    load_model_checkpoint(model, ckpt);
    std::cerr << "checkpoint " << ckpt << "\n";
  }
  const EvalReport rep = evaluate(model, d.test, c.eval.metric, c.eval.camera_filter);
  const std::string dir = !out.empty() ? out : !run.empty() ? run : ".";
  fs::create_directories(dir);
  write_file((fs::path(dir) / "cmc.csv").string(), cmc_csv(rep.cmc));
  write_file((fs::path(dir) / "summary.csv").string(), summary_csv(rep.cmc));
  write_file((fs::path(dir) / "dist_hist.csv").string(), dist_hist_csv(rep.dist));
  std::cerr << "intra " << rep.dist.intra_mean << " inter " << rep.dist.inter_mean << " gap " << rep.dist.gap()
            << " skipped queries " << rep.cmc.skipped << "\n";
  std::cout << summary_row(rep.cmc) << "\n";
  return 0;
}

int cmd_gradcheck(std::size_t seeds, std::uint64_t base, bool verbose) {
  std::size_t failed = 0, total = 0;
  std::map<std::string, std::pair<double, std::size_t>> worst;  // name -> (max error, failures)
  for (const auto& r : gradcheck_suite(seeds, base)) {
    ++total;
    auto& w = worst[r.name];
    w.first = std::max(w.first, r.max_rel_err);
    if (!r.passed()) {
      ++failed;
      ++w.second;
      std::printf("FAIL %s seed %llu max_rel_err %.3g at %s (checked %zu, skipped %zu)\n", r.name.c_str(),
                  static_cast<unsigned long long>(r.seed), r.max_rel_err, r.worst.c_str(), r.checked, r.skipped);
    } else if (verbose) {
      std::printf("ok   %s seed %llu max_rel_err %.3g\n", r.name.c_str(), static_cast<unsigned long long>(r.seed),
                  r.max_rel_err);
    }
  }
  for (const auto& [name, w] : worst) std::printf("%-22s max_rel_err %.3g failures %zu\n", name.c_str(), w.first, w.second);
  std::printf("%zu/%zu checks passed over %zu seeds\n", total - failed, total, seeds);
  if (failed > 0) throw Error("gradcheck: " + std::to_string(failed) + " check(s) failed");
  return 0;
}

int cmd_sweep(const RunOptions& o, const std::string& out, const std::string& l2s, const std::string& ms) {
  const RunConfig c = build_config(o);
  print_seed(c);
  const Dataset d = build_dataset(c, o.data);
  fs::create_directories(out);
  write_file((fs::path(out) / "config.txt").string(), serialize_config(c));
  std::vector<SweepCell> done;
  sweep(c.train, c.backbone, d, parse_grid(l2s), parse_grid(ms), [&](const SweepCell& cell) {
    done.push_back(cell);
    write_file((fs::path(out) / "sweep.csv").string(), sweep_csv(done));
    std::printf("lambda2 %g margin %g rank1 %.4f mAP %.4f\n", cell.lambda2, cell.margin, cell.rank1, cell.map);
    std::fflush(stdout);
  });
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fdnm: frequency-domain nuances mining for cross-modality retrieval"};
  app.require_subcommand(1);

  RunOptions run_opts;
  std::string out, image, image_b, in, resume, run, checkpoint, lambda2s = "0,0.25,0.5,1.0", margins = "0,0.2,0.5";
  bool random_init = false, verbose = false;
  std::size_t seeds = 20;
  std::uint64_t base_seed = 0;

  auto* synth = app.add_subcommand("synth", "generate the synthetic two-modality dataset");
  add_run_options(synth, run_opts);
  synth->add_option("--out", out, "output directory")->required();

  auto* decompose = app.add_subcommand("decompose", "amplitude and phase planes of a PNM image");
  decompose->add_option("image", image, "input .ppm/.pgm")->required();
  decompose->add_option("--out", out, "output directory")->required();

  auto* recompose = app.add_subcommand("recompose", "rebuild an image from decompose output");
  recompose->add_option("dir", in, "directory with amp_c*.f32 and pha_c*.f32")->required();
  recompose->add_option("--out", out, "output image path")->required();

  auto* swap = app.add_subcommand("swap", "exchange amplitude and phase between two images");
  swap->add_option("a", image, "first image")->required();
  swap->add_option("b", image_b, "second image")->required();
  swap->add_option("--out", out, "output directory")->required();

  auto* trn = app.add_subcommand("train", "train a model and write metrics.csv and checkpoints");
  add_run_options(trn, run_opts);
  trn->add_option("--out", out, "run directory")->required();
  trn->add_option("--resume", resume, "checkpoint to continue from");

  auto* evl = app.add_subcommand("eval", "cross-modality retrieval metrics on the test split");
  add_run_options(evl, run_opts);
  evl->add_option("--run", run, "run directory (uses its config.txt and latest checkpoint)");
  evl->add_option("--checkpoint", checkpoint, "checkpoint file");
  evl->add_flag("--random-init", random_init, "evaluate the freshly initialized model");
  evl->add_option("--out", out, "report directory (default: the run directory)");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  grad->add_option("--seeds", seeds, "seeds per op")->check(CLI::PositiveNumber);
  grad->add_option("--base-seed", base_seed, "first seed");
  grad->add_flag("-v,--verbose", verbose, "print every check");

  auto* swp = app.add_subcommand("sweep", "train one model per (lambda2, margin_cnm) cell");
  add_run_options(swp, run_opts);
  swp->add_option("--out", out, "output directory")->required();
  swp->add_option("--lambda2", lambda2s, "comma-separated lambda2 values");
  swp->add_option("--margin", margins, "comma-separated margin_cnm values");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (*synth) return cmd_synth(run_opts, out);
    if (*decompose) return cmd_decompose(image, out);
    if (*recompose) return cmd_recompose(in, out);
    if (*swap) return cmd_swap(image, image_b, out);
    if (*trn) return cmd_train(run_opts, out, resume);
    if (*evl) return cmd_eval(run_opts, run, checkpoint, random_init, out);
    if (*grad) return cmd_gradcheck(seeds, base_seed, verbose);
    if (*swp) return cmd_sweep(run_opts, out, lambda2s, margins);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error: " << msg << "\n";
    return 1;
  }
  return 1;
}
