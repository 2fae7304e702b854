#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fdnm/data.hpp"
#include "fdnm/eval.hpp"
#include "fdnm/losses.hpp"
#include "fdnm/modules.hpp"
#include "fdnm/param_store.hpp"
#include "fdnm/tensor.hpp"

namespace fdnm {

struct TrainConfig {
  std::size_t epochs = 150;
  std::size_t warmup_epochs = 10;
  double init_lr = 1e-2;
  double base_lr = 1e-1;
  std::vector<std::size_t> milestones{20, 80, 120};
  std::vector<double> decay_lrs{1e-2, 1e-3, 1e-4};
  double momentum = 0.9;
  double weight_decay = 0.0;
  double grad_clip = 0.0;  // max global gradient L2 norm, 0 disables
  std::size_t P = 6;
  std::size_t K = 4;
  LossWeights weights;
  bool use_agp = true;
  bool use_anm = true;
  bool use_cnm = true;
  bool use_local = true;
  bool flip = true;
  PairMode pair_mode = PairMode::ordered;
  std::size_t eval_every = 1;        // 0 disables periodic evaluation
  std::size_t checkpoint_every = 5;  // the final epoch is always written
  std::uint64_t seed = 0;

  bool operator==(const TrainConfig&) const = default;

  /// 30-epoch schedule with warmup and milestones scaled by 30/150.
  static TrainConfig desk() {
    TrainConfig c;
    c.epochs = 30;
    c.warmup_epochs = 2;
    c.milestones = {4, 16, 24};
    c.grad_clip = 5.0;
    return c;
  }

  ModelSwitches switches() const { return {use_agp, use_anm, use_local}; }

  void validate() const {
    if (epochs == 0) throw Error("train config: epochs must be positive");
    if (milestones.size() != decay_lrs.size()) throw Error("train config: milestones and decay_lrs differ in length");
    for (std::size_t i = 1; i < milestones.size(); ++i) {
      if (milestones[i] <= milestones[i - 1]) throw Error("train config: milestones must be strictly increasing");
    }
    if (!milestones.empty() && milestones.front() < warmup_epochs) {
      throw Error("train config: first milestone precedes the end of warmup");
    }
    for (double lr : decay_lrs) {
      if (!(lr > 0.0)) throw Error("train config: decay learning rates must be positive");
    }
    if (!(init_lr > 0.0) || !(base_lr > 0.0)) throw Error("train config: learning rates must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw Error("train config: momentum must lie in [0, 1)");
    if (weight_decay < 0.0) throw Error("train config: weight_decay must be >= 0");
    if (grad_clip < 0.0) throw Error("train config: grad_clip must be >= 0");
    if (P == 0 || K == 0) throw Error("train config: P and K must be positive");
    if (use_cnm && !use_anm) throw Error("train config: use_cnm requires use_anm");
    weights.validate();
  }
};

/// Linear warmup from init_lr to base_lr, then step decay at the milestones.
inline double lr_at(const TrainConfig& c, std::size_t epoch) {
  if (epoch < c.warmup_epochs) {
    return c.init_lr + (c.base_lr - c.init_lr) * static_cast<double>(epoch) / static_cast<double>(c.warmup_epochs);
  }
  double lr = c.base_lr;
  for (std::size_t i = 0; i < c.milestones.size(); ++i) {
    if (epoch >= c.milestones[i]) lr = c.decay_lrs[i];
  }
  return lr;
}

inline double lr_at(std::size_t epoch) { return lr_at(TrainConfig{}, epoch); }

// ---------------------------------------------------------------------------
// SGD with momentum

struct OptimState {
  double momentum = 0.9;
  double lr = 0.0;
  TensorTable velocity;  // same names and shapes as the parameters

  static OptimState create(const ParamStore& params, double momentum) {
    OptimState s;
    s.momentum = momentum;
    for (const auto& [name, p] : params) s.velocity.add(name, Tensor::full(p.shape(), 0.0));
    return s;
  }
};

/// Rescales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_grad_norm(ParamStore& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double k = max_norm / norm;
    for (const auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      Tensor h = p;
      for (double& g : h.grad_mut()) g *= k;
    }
  }
  return norm;
}

/// v = momentum * v + (g + wd * w); w -= lr * v; then clears the gradients.
inline void sgd_step(ParamStore& params, OptimState& opt, double lr, double weight_decay = 0.0) {
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) throw Error("sgd_step: parameter '" + name + "' has no gradient");
  }
  opt.lr = lr;
  for (const auto& [name, p] : params) {
    Tensor w = p;
    Tensor v = opt.velocity.at(name);
    auto g = w.grad();
    auto wv = w.values_mut();
    auto vv = v.values_mut();
    for (std::size_t i = 0; i < wv.size(); ++i) {
      vv[i] = opt.momentum * vv[i] + g[i] + weight_decay * wv[i];
      wv[i] -= lr * vv[i];
    }
    w.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Objective

struct LossTerms {
  Tensor total, id, tri, cnm;
  double lambda2_effective = 0.0;
};

/// Identity and triplet losses averaged over the global and local heads,
/// center-guided loss on the ANM embeddings, combined with the weights.
inline LossTerms compute_losses(const ModelOutput& out, std::span<const std::size_t> labels,
                                std::span<const Modality> modality, const TrainConfig& cfg) {
  const HeadOutput& h = out.head;
  std::vector<Tensor> ids{cross_entropy(h.global_logits, labels)};
  std::vector<Tensor> tris{triplet_batch_hard(h.global_feat, labels, cfg.weights.margin_tri)};
  for (std::size_t i = 0; i < h.local_logits.size(); ++i) {
    ids.push_back(cross_entropy(h.local_logits[i], labels));
    tris.push_back(triplet_batch_hard(h.local_feat[i], labels, cfg.weights.margin_tri));
  }
  LossTerms t;
  t.id = scale(add_n(ids), 1.0 / static_cast<double>(ids.size()));
  t.tri = scale(add_n(tris), 1.0 / static_cast<double>(tris.size()));
  if (out.anm) {
    // Switched off, the term still enters the total at weight zero.
    const auto cls = batch_classes(labels);
    const auto v1 = compute_centers(out.anm_emb1, labels, modality, Modality::visible, Branch::v1, cls);
    const auto v2 = compute_centers(out.anm_emb2, labels, modality, Modality::visible, Branch::v2, cls);
    const auto i1 = compute_centers(out.anm_emb1, labels, modality, Modality::infrared, Branch::i1, cls);
    const auto i2 = compute_centers(out.anm_emb2, labels, modality, Modality::infrared, Branch::i2, cls);
    t.cnm = cnm_total(v1, v2, i1, i2, cfg.weights.margin_cnm, cfg.pair_mode);
  } else {
    t.cnm = Tensor::scalar(0.0);
  }
  LossWeights w = cfg.weights;
  if (!cfg.use_cnm) w.lambda2 = 0.0;
  t.lambda2_effective = w.lambda2;
  t.total = total_loss(t.id, t.tri, t.cnm, w);
  return t;
}

struct StepLosses {
  double total = 0, id = 0, tri = 0, cnm = 0;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  StepLosses loss;  // means over the epoch's steps
  std::optional<double> rank1, map;
};

class NonFiniteLoss : public Error {
 public:
  NonFiniteLoss(std::size_t epoch, std::size_t step, const StepLosses& l)
      : Error("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
              ": total=" + fmt_double(l.total) + " id=" + fmt_double(l.id) + " tri=" + fmt_double(l.tri) +
              " cnm=" + fmt_double(l.cnm)) {}
};

inline std::string metrics_header() { return "epoch,lr,loss_total,loss_id,loss_tri,loss_cnm,rank1,mAP"; }

inline std::string metrics_row(const EpochMetrics& m) {
  return std::to_string(m.epoch) + "," + fmt_double(m.lr) + "," + fmt_double(m.loss.total) + "," +
         fmt_double(m.loss.id) + "," + fmt_double(m.loss.tri) + "," + fmt_double(m.loss.cnm) + "," +
         (m.rank1 ? fmt_double(*m.rank1) : "") + "," + (m.map ? fmt_double(*m.map) : "");
}

inline std::string checkpoint_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "epoch_%04zu.fdnm", epoch);
  return buf;
}

/// Owns the model, optimizer and sampler of one run. All randomness is keyed
/// by (seed, epoch, step).
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const BackboneConfig& bcfg, const Dataset& ds)
      : cfg_((cfg.validate(), cfg)),
        ds_(ds),
        model_(bcfg, cfg.switches(), ds.spec.num_identities, cfg.seed),
        opt_(OptimState::create(model_.params(), cfg.momentum)),
        sampler_(ds.train, cfg.P, cfg.K, cfg.seed) {
    round_state();
  }

  FdnmModel& model() { return model_; }
  OptimState& optimizer() { return opt_; }
  const TrainConfig& config() const { return cfg_; }
  std::size_t next_epoch() const { return next_epoch_; }
  std::size_t steps_per_epoch() const { return sampler_.batches_per_epoch(); }

  StepLosses step(std::size_t epoch, std::size_t s, double lr) {
    const auto idx = sampler_.batch_indices(epoch, s);
    const Batch b = assemble_batch(ds_.train, idx, {cfg_.flip, false}, cfg_.seed, epoch, s);
    const ModelOutput out = model_.forward(b.images, b.modality, Mode::train);
    const LossTerms t = compute_losses(out, b.labels, b.modality, cfg_);
    const StepLosses l{t.total.item(), t.id.item(), t.tri.item(), t.cnm.item()};
    if (!std::isfinite(l.total) || !std::isfinite(l.id) || !std::isfinite(l.tri) || !std::isfinite(l.cnm)) {
      throw NonFiniteLoss(epoch, s, l);
    }
    backward(t.total);
    if (cfg_.grad_clip > 0.0) clip_grad_norm(model_.params(), cfg_.grad_clip);
    sgd_step(model_.params(), opt_, lr, cfg_.weight_decay);
    round_state();
    return l;
  }

  EpochMetrics run_epoch() {
    const std::size_t epoch = next_epoch_;
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr_at(cfg_, epoch);
    const std::size_t n = steps_per_epoch();
    for (std::size_t s = 0; s < n; ++s) {
      const StepLosses l = step(epoch, s, m.lr);
      m.loss.total += l.total / static_cast<double>(n);
      m.loss.id += l.id / static_cast<double>(n);
      m.loss.tri += l.tri / static_cast<double>(n);
      m.loss.cnm += l.cnm / static_cast<double>(n);
    }
    const bool last = epoch + 1 == cfg_.epochs;
    if (!ds_.test.empty() && ((cfg_.eval_every > 0 && (epoch + 1) % cfg_.eval_every == 0) || last)) {
      const CmcResult r = evaluate(model_, ds_.test).cmc;
      m.rank1 = r.rank(1);
      m.map = r.map;
    }
    ++next_epoch_;
    return m;
  }

  /// Parameters, BN buffers, velocities and the finished-epoch index.
  std::string checkpoint_bytes(std::size_t epoch) const {
    auto arrays = to_arrays(model_.params(), "param/");
    for (auto& a : to_arrays(model_.buffers(), "buffer/")) arrays.push_back(std::move(a));
    for (auto& a : to_arrays(opt_.velocity, "velocity/")) arrays.push_back(std::move(a));
    arrays.push_back({"meta/epoch", {1}, {static_cast<double>(epoch)}});
    return encode_fdnm1(arrays);
  }

  /// Restores a checkpoint; training continues after the stored epoch.
  void load_checkpoint(const std::string& path) {
    const auto arrays = decode_fdnm1(read_file(path), path);
    assign_from(model_.params(), arrays, "param/");
    assign_from(model_.buffers(), arrays, "buffer/");
    assign_from(opt_.velocity, arrays, "velocity/");
    for (const auto& a : arrays) {
      if (a.name == "meta/epoch") {
        next_epoch_ = static_cast<std::size_t>(a.values.at(0)) + 1;
        return;
      }
    }
    throw Error(path + ": missing meta/epoch");
  }

 private:
  // Parameters, buffers and velocities at float32 precision, as stored in checkpoints.
  void round_state() {
    round_to_f32(model_.params());
    round_to_f32(model_.buffers());
    round_to_f32(opt_.velocity);
  }

  TrainConfig cfg_;
  const Dataset& ds_;
  FdnmModel model_;
  OptimState opt_;
  PkSampler sampler_;
  std::size_t next_epoch_ = 0;
};

/// Loads the parameters and buffers of a training checkpoint into a model.
inline void load_model_checkpoint(FdnmModel& model, const std::string& path) {
  const auto arrays = decode_fdnm1(read_file(path), path);
  assign_from(model.params(), arrays, "param/");
  assign_from(model.buffers(), arrays, "buffer/");
}

struct TrainResult {
  std::vector<EpochMetrics> history;
  EvalReport final_eval;
};

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // metrics.csv and checkpoints
  std::optional<std::string> resume;             // checkpoint to continue from
  std::function<void(const EpochMetrics&)> on_epoch;
};

inline std::vector<EpochMetrics> read_metrics(const std::filesystem::path& path) {
  std::vector<EpochMetrics> out;
  std::istringstream in(read_file(path.string()));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    while (f.size() < 8) f.emplace_back();
    EpochMetrics m;
    m.epoch = std::stoul(f[0]);
    m.lr = std::stod(f[1]);
    m.loss = {std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5])};
    if (!f[6].empty()) m.rank1 = std::stod(f[6]);
    if (!f[7].empty()) m.map = std::stod(f[7]);
    out.push_back(m);
  }
  return out;
}

inline void write_metrics(const std::filesystem::path& path, const std::vector<EpochMetrics>& history) {
  std::string s = metrics_header() + "\n";
  for (const auto& m : history) s += metrics_row(m) + "\n";
  write_file(path.string(), s);
}

inline TrainResult train(const TrainConfig& cfg, const BackboneConfig& bcfg, const Dataset& ds,
                         const TrainOptions& opts = {}) {
  Trainer t(cfg, bcfg, ds);
  TrainResult res;
  if (opts.out_dir) std::filesystem::create_directories(*opts.out_dir);
  if (opts.resume) {
    t.load_checkpoint(*opts.resume);
    if (opts.out_dir && std::filesystem::exists(*opts.out_dir / "metrics.csv")) {
      for (const auto& m : read_metrics(*opts.out_dir / "metrics.csv")) {
        if (m.epoch < t.next_epoch()) res.history.push_back(m);
      }
    }
  }
  while (t.next_epoch() < cfg.epochs) {
    const EpochMetrics m = t.run_epoch();
    res.history.push_back(m);
    if (opts.on_epoch) opts.on_epoch(m);
    if (opts.out_dir) {
      write_metrics(*opts.out_dir / "metrics.csv", res.history);
      const bool last = m.epoch + 1 == cfg.epochs;
      if (last || (cfg.checkpoint_every > 0 && (m.epoch + 1) % cfg.checkpoint_every == 0)) {
        write_file((*opts.out_dir / checkpoint_name(m.epoch)).string(), t.checkpoint_bytes(m.epoch));
      }
    }
  }
  if (!ds.test.empty()) res.final_eval = evaluate(t.model(), ds.test);
  return res;
}

// ---------------------------------------------------------------------------
// Sweep over lambda2 x margin_cnm

struct SweepCell {
  double lambda2 = 0.0, margin = 0.0;
  double rank1 = 0.0, map = 0.0;
};

inline std::vector<SweepCell> sweep(const TrainConfig& cfg, const BackboneConfig& bcfg, const Dataset& ds,
                                    const std::vector<double>& lambda2s, const std::vector<double>& margins,
                                    const std::function<void(const SweepCell&)>& on_cell = {}) {
  if (lambda2s.empty() || margins.empty()) throw Error("sweep: empty grid");
  std::vector<SweepCell> cells;
  for (double l2 : lambda2s) {
    for (double m : margins) {
      TrainConfig c = cfg;
      c.weights.lambda2 = l2;
      c.weights.margin_cnm = m;
      c.eval_every = 0;
      const TrainResult r = train(c, bcfg, ds);
      cells.push_back({l2, m, r.final_eval.cmc.rank(1), r.final_eval.cmc.map});
      if (on_cell) on_cell(cells.back());
    }
  }
  return cells;
}

inline std::string sweep_csv(const std::vector<SweepCell>& cells) {
  std::string s = "lambda2,margin_cnm,rank1,mAP\n";
  for (const auto& c : cells) {
    s += fmt_double(c.lambda2) + "," + fmt_double(c.margin) + "," + fmt_double(c.rank1) + "," + fmt_double(c.map) + "\n";
  }
  return s;
}

}  // namespace fdnm
