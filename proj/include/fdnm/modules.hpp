#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fdnm/fourier.hpp"
#include "fdnm/ops.hpp"
#include "fdnm/param_store.hpp"
#include "fdnm/rng.hpp"
#include "fdnm/tensor.hpp"

namespace fdnm {

enum class Modality : std::uint8_t { visible = 0, infrared = 1 };

inline const char* modality_name(Modality m) { return m == Modality::visible ? "VIS" : "IR"; }

inline Tensor normal_param(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(v), true);
}

/// He-style init, N(0, 2 / fan_in).
inline Tensor he_param(Shape shape, std::size_t fan_in, Rng& rng) {
  return normal_param(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
}

inline Tensor constant_param(Shape shape, double v) { return Tensor::full(std::move(shape), v, true); }

// ---------------------------------------------------------------------------
// Amplitude guided phase

/// K non-shared 1x1 convs, each mapping the pooled C-channel amplitude to C/K channels.
struct AgpParams {
  std::size_t channels = 0;
  std::size_t branches = 4;
  std::vector<Tensor> weight;  // K x [C/K x C]
  std::vector<Tensor> bias;    // K x [C/K]

  static AgpParams create(std::size_t channels, std::size_t branches, Rng& rng) {
    if (branches == 0 || channels % branches != 0) {
      throw Error("agp: channels (" + std::to_string(channels) + ") not divisible by K (" + std::to_string(branches) +
                  ")");
    }
    AgpParams p;
    p.channels = channels;
    p.branches = branches;
    for (std::size_t k = 0; k < branches; ++k) {
      p.weight.push_back(he_param({channels / branches, channels}, channels, rng));
      p.bias.push_back(constant_param({channels / branches}, 0.0));
    }
    return p;
  }

  void register_into(ParamStore& params, const std::string& prefix) const {
    for (std::size_t k = 0; k < branches; ++k) {
      params.add(prefix + ".conv" + std::to_string(k) + ".weight", weight[k]);
      params.add(prefix + ".conv" + std::to_string(k) + ".bias", bias[k]);
    }
  }
};

/// Gate in (0,1)^C per image: Sig(Cat(Conv^K(GAP(amp)))).
inline Tensor agp_gate(const Tensor& amp, const AgpParams& p) {
  const Tensor pooled = gap(amp);
  std::vector<Tensor> parts;
  parts.reserve(p.branches);
  for (std::size_t k = 0; k < p.branches; ++k) parts.push_back(conv1x1(pooled, p.weight[k], p.bias[k]));
  return sigmoid(concat_channels(parts));
}

/// Rescales each channel's phase by (1 + gate) and returns to the spatial domain.
inline Tensor agp_forward(const Tensor& x, const AgpParams& p) {
  const std::size_t c = x.rank() == 4 ? x.dim(1) : x.dim(0);
  if (p.channels != c) throw Error("agp: configured for " + std::to_string(p.channels) + " channels, input has " + std::to_string(c));
  if (c % p.branches != 0) throw Error("agp: channels not divisible by K");
  const Spectrum s = fft2(x);
  const Tensor gate = agp_gate(s.amp, p);
  const Tensor guided = add(channel_scale(s.pha, gate), s.pha);
  return ifft2(recombine(s.amp, guided), Residue::force_real);
}

// ---------------------------------------------------------------------------
// Amplitude nuances mining

struct AnmParams {
  std::size_t channels = 0;
  Tensor res1_weight, res1_bias;
  Tensor res2_weight, res2_bias;
  // One batch norm shared by both branch outputs.
  Tensor bn_gamma, bn_beta;
  BnState bn;
  bool instance_norm = true;  // tests switch this off to expose the identity path

  static AnmParams create(std::size_t channels, Rng& rng) {
    AnmParams p;
    p.channels = channels;
    p.res1_weight = he_param({channels, channels}, channels, rng);
    p.res1_bias = constant_param({channels}, 0.0);
    p.res2_weight = he_param({channels, channels}, channels, rng);
    p.res2_bias = constant_param({channels}, 0.0);
    p.bn_gamma = constant_param({channels}, 1.0);
    p.bn_beta = constant_param({channels}, 0.0);
    p.bn = BnState(channels);
    return p;
  }

  void register_into(ParamStore& params, TensorTable& buffers, const std::string& prefix) const {
    params.add(prefix + ".res1.weight", res1_weight);
    params.add(prefix + ".res1.bias", res1_bias);
    params.add(prefix + ".res2.weight", res2_weight);
    params.add(prefix + ".res2.bias", res2_bias);
    params.add(prefix + ".bn.gamma", bn_gamma);
    params.add(prefix + ".bn.beta", bn_beta);
    buffers.add(prefix + ".bn.running_mean", bn.running_mean);
    buffers.add(prefix + ".bn.running_var", bn.running_var);
  }
};

struct AnmOutput {
  Tensor amp1, amp2;        // edited amplitudes (conv -> IN); may be signed
  Tensor spatial1, spatial2;  // after the inverse transform, before the shared BN
  Tensor branch1, branch2;  // returned branch features
  Tensor phase;             // phase of the input, shared by both branches
};

/// Two amplitude branches recombined with the input's phase.
/// f: [N x C x H x W].
inline AnmOutput anm_forward(const Tensor& f, AnmParams& p, Mode mode) {
  if (f.rank() != 4 || f.dim(1) != p.channels) {
    throw Error("anm: expected [N x " + std::to_string(p.channels) + " x H x W], got " + shape_str(f.shape()));
  }
  const Spectrum s = fft2(f);
  AnmOutput out;
  out.phase = s.pha;
  out.amp1 = conv1x1(s.amp, p.res1_weight, p.res1_bias);
  out.amp2 = conv1x1(s.amp, p.res2_weight, p.res2_bias);
  if (p.instance_norm) {
    out.amp1 = instance_norm(out.amp1);
    out.amp2 = instance_norm(out.amp2);
  }
  out.spatial1 = ifft2(recombine(out.amp1, s.pha, AmpCheck::allow_signed), Residue::force_real);
  out.spatial2 = ifft2(recombine(out.amp2, s.pha, AmpCheck::allow_signed), Residue::force_real);
  out.branch1 = batch_norm(out.spatial1, p.bn, p.bn_gamma, p.bn_beta, mode);
  out.branch2 = batch_norm(out.spatial2, p.bn, p.bn_gamma, p.bn_beta, mode);
  return out;
}

// ---------------------------------------------------------------------------
// Backbone

struct StageSpec {
  std::size_t channels;
  std::size_t stride;
  bool operator==(const StageSpec&) const = default;
};

/// Toy two-stream backbone. Blocks below `stream_split` hold separate
/// parameters per modality; AGP runs after every block listed in `agp_after`.
struct BackboneConfig {
  std::size_t in_channels = 3;
  std::vector<StageSpec> blocks = {{16, 2}, {32, 2}, {64, 2}, {128, 1}};
  std::size_t stream_split = 1;
  std::vector<std::size_t> agp_after = {1, 2};
  std::size_t agp_branches = 4;
  std::size_t parts = 4;
  std::size_t embed_dim = 128;

  bool operator==(const BackboneConfig&) const = default;

  void validate() const {
    if (blocks.empty()) throw Error("backbone: no blocks");
    if (stream_split > blocks.size()) throw Error("backbone: stream_split beyond block count");
    for (const auto& b : blocks) {
      if (b.channels == 0 || b.stride == 0) throw Error("backbone: zero channels or stride");
    }
    std::set<std::size_t> seen;
    for (std::size_t i : agp_after) {
      if (i >= blocks.size()) throw Error("backbone: agp_after index " + std::to_string(i) + " is not a block");
      if (!seen.insert(i).second) throw Error("backbone: agp_after repeats index " + std::to_string(i));
      if (blocks[i].channels % agp_branches != 0) {
        throw Error("backbone: block " + std::to_string(i) + " channels not divisible by agp K");
      }
    }
    if (embed_dim != blocks.back().channels) throw Error("backbone: embed_dim must equal last block channels");
    if (parts == 0) throw Error("backbone: parts must be positive");
  }

  /// Spatial size of the final map; every stride must divide the incoming size
  /// and `parts` must divide the final height.
  std::pair<std::size_t, std::size_t> output_size(std::size_t h, std::size_t w) const {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::size_t s = blocks[i].stride;
      if (h % s != 0 || w % s != 0) {
        throw Error("backbone: block " + std::to_string(i) + " stride " + std::to_string(s) + " does not divide " +
                    std::to_string(h) + "x" + std::to_string(w));
      }
      h /= s;
      w /= s;
    }
    if (h % parts != 0) {
      throw Error("backbone: parts " + std::to_string(parts) + " does not divide final height " + std::to_string(h));
    }
    return {h, w};
  }
};

struct ConvStage {
  Tensor weight;  // [Co x Ci x 3 x 3]
  Tensor gamma, beta;
  BnState bn;
  std::size_t stride = 1;

  static ConvStage create(std::size_t in, std::size_t out, std::size_t stride, Rng& rng) {
    ConvStage s;
    s.weight = he_param({out, in, 3, 3}, in * 9, rng);
    s.gamma = constant_param({out}, 1.0);
    s.beta = constant_param({out}, 0.0);
    s.bn = BnState(out);
    s.stride = stride;
    return s;
  }

  Tensor forward(const Tensor& x, Mode mode) { return relu(batch_norm(conv2d(x, weight, stride), bn, gamma, beta, mode)); }

  void register_into(ParamStore& params, TensorTable& buffers, const std::string& prefix) const {
    params.add(prefix + ".conv.weight", weight);
    params.add(prefix + ".bn.gamma", gamma);
    params.add(prefix + ".bn.beta", beta);
    buffers.add(prefix + ".bn.running_mean", bn.running_mean);
    buffers.add(prefix + ".bn.running_var", bn.running_var);
  }
};

class Backbone {
 public:
  Backbone(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    std::size_t in = cfg_.in_channels;
    for (std::size_t b = 0; b < cfg_.blocks.size(); ++b) {
      const std::size_t streams = b < cfg_.stream_split ? 2 : 1;
      std::vector<ConvStage> per_stream;
      for (std::size_t s = 0; s < streams; ++s) {
        per_stream.push_back(ConvStage::create(in, cfg_.blocks[b].channels, cfg_.blocks[b].stride, rng));
      }
      stages_.push_back(std::move(per_stream));
      in = cfg_.blocks[b].channels;
    }
    for (std::size_t b : cfg_.agp_after) agp_.emplace(b, AgpParams::create(cfg_.blocks[b].channels, cfg_.agp_branches, rng));
  }

  const BackboneConfig& config() const { return cfg_; }
  std::map<std::size_t, AgpParams>& agp() { return agp_; }
  std::vector<std::vector<ConvStage>>& stages() { return stages_; }

  /// images: [N x C_in x H x W]; modality selects the stream below stream_split.
  Tensor forward(const Tensor& images, std::span<const Modality> modality, Mode mode) {
    if (images.rank() != 4 || images.dim(1) != cfg_.in_channels) {
      throw Error("backbone: expected [N x " + std::to_string(cfg_.in_channels) + " x H x W], got " +
                  shape_str(images.shape()));
    }
    if (modality.size() != images.dim(0)) throw Error("backbone: modality labels do not match batch size");
    cfg_.output_size(images.dim(2), images.dim(3));

    std::vector<std::size_t> vis, ir;
    for (std::size_t i = 0; i < modality.size(); ++i) (modality[i] == Modality::visible ? vis : ir).push_back(i);
    std::vector<std::size_t> inverse(modality.size());
    for (std::size_t i = 0; i < vis.size(); ++i) inverse[vis[i]] = i;
    for (std::size_t i = 0; i < ir.size(); ++i) inverse[ir[i]] = vis.size() + i;

    Tensor x = images;
    for (std::size_t b = 0; b < stages_.size(); ++b) {
      if (b < cfg_.stream_split) {
        if (ir.empty()) {
          x = stages_[b][0].forward(x, mode);
        } else if (vis.empty()) {
          x = stages_[b][1].forward(x, mode);
        } else {
          Tensor xv = stages_[b][0].forward(gather_rows(x, vis), mode);
          Tensor xi = stages_[b][1].forward(gather_rows(x, ir), mode);
          x = gather_rows(concat_rows({xv, xi}), inverse);
        }
      } else {
        x = stages_[b][0].forward(x, mode);
      }
      auto it = agp_.find(b);
      if (it != agp_.end()) x = agp_forward(x, it->second);
    }
    return x;
  }

  void register_into(ParamStore& params, TensorTable& buffers) const {
    for (std::size_t b = 0; b < stages_.size(); ++b) {
      for (std::size_t s = 0; s < stages_[b].size(); ++s) {
        std::string name = "block" + std::to_string(b);
        if (stages_[b].size() == 2) name += s == 0 ? ".vis" : ".ir";
        stages_[b][s].register_into(params, buffers, name);
      }
    }
    for (const auto& [b, p] : agp_) p.register_into(params, "agp" + std::to_string(b));
  }

 private:
  BackboneConfig cfg_;
  std::vector<std::vector<ConvStage>> stages_;  // [block][stream]
  std::map<std::size_t, AgpParams> agp_;
};

// ---------------------------------------------------------------------------
// Embedding head: BN neck shared across modalities, one classifier per embedding.

struct NeckBranch {
  Tensor gamma, beta;
  BnState bn;
  Tensor cls_weight, cls_bias;

  static NeckBranch create(std::size_t dim, std::size_t classes, Rng& rng) {
    NeckBranch n;
    n.gamma = constant_param({dim}, 1.0);
    n.beta = constant_param({dim}, 0.0);
    n.bn = BnState(dim);
    n.cls_weight = normal_param({classes, dim}, 0.01, rng);
    n.cls_bias = constant_param({classes}, 0.0);
    return n;
  }

  void register_into(ParamStore& params, TensorTable& buffers, const std::string& prefix) const {
    params.add(prefix + ".bn.gamma", gamma);
    params.add(prefix + ".bn.beta", beta);
    params.add(prefix + ".cls.weight", cls_weight);
    params.add(prefix + ".cls.bias", cls_bias);
    buffers.add(prefix + ".bn.running_mean", bn.running_mean);
    buffers.add(prefix + ".bn.running_var", bn.running_var);
  }
};

struct HeadOutput {
  Tensor global_feat;    // pooled, before BN [N x D]
  Tensor global_emb;     // after BN [N x D]
  Tensor global_logits;  // [N x classes]
  std::vector<Tensor> local_feat, local_emb, local_logits;
};

class EmbedHead {
 public:
  /// parts == 0 disables the local stripes.
  EmbedHead(std::size_t dim, std::size_t parts, std::size_t classes, Rng& rng)
      : dim_(dim), parts_(parts), global_(NeckBranch::create(dim, classes, rng)) {
    for (std::size_t i = 0; i < parts; ++i) locals_.push_back(NeckBranch::create(dim, classes, rng));
  }

  std::size_t parts() const { return parts_; }

  HeadOutput forward(const Tensor& fmap, Mode mode) {
    if (fmap.rank() != 4 || fmap.dim(1) != dim_) {
      throw Error("embed head: expected [N x " + std::to_string(dim_) + " x H x W], got " + shape_str(fmap.shape()));
    }
    HeadOutput out;
    out.global_feat = flatten(gap(fmap));
    out.global_emb = batch_norm(out.global_feat, global_.bn, global_.gamma, global_.beta, mode);
    out.global_logits = linear(out.global_emb, global_.cls_weight, global_.cls_bias);
    if (parts_ == 0) return out;
    const std::size_t h = fmap.dim(2);
    if (h % parts_ != 0) {
      throw Error("embed head: " + std::to_string(parts_) + " stripes do not divide height " + std::to_string(h));
    }
    const std::size_t rows = h / parts_;
    for (std::size_t i = 0; i < parts_; ++i) {
      Tensor feat = flatten(gap(slice_rows(fmap, i * rows, (i + 1) * rows)));
      Tensor emb = batch_norm(feat, locals_[i].bn, locals_[i].gamma, locals_[i].beta, mode);
      out.local_logits.push_back(linear(emb, locals_[i].cls_weight, locals_[i].cls_bias));
      out.local_feat.push_back(std::move(feat));
      out.local_emb.push_back(std::move(emb));
    }
    return out;
  }

  void register_into(ParamStore& params, TensorTable& buffers) const {
    global_.register_into(params, buffers, "head.global");
    for (std::size_t i = 0; i < locals_.size(); ++i) locals_[i].register_into(params, buffers, "head.part" + std::to_string(i));
  }

 private:
  std::size_t dim_;
  std::size_t parts_;
  NeckBranch global_;
  std::vector<NeckBranch> locals_;
};

// ---------------------------------------------------------------------------
// Full model

/// Ablation switches. With everything off the model is the plain baseline.
struct ModelSwitches {
  bool use_agp = true;
  bool use_anm = true;
  bool use_local = true;
  bool operator==(const ModelSwitches&) const = default;
};

struct ModelOutput {
  HeadOutput head;
  std::optional<AnmOutput> anm;
  Tensor anm_emb1, anm_emb2;  // GAP of the two BN'd ANM branches [N x D]
};

class FdnmModel {
 public:
  FdnmModel(BackboneConfig cfg, ModelSwitches switches, std::size_t num_classes, std::uint64_t seed)
      : switches_(switches), init_rng_(seed, "init"), backbone_(effective(cfg, switches), init_rng_),
        head_(cfg.embed_dim, switches.use_local ? cfg.parts : 0, num_classes, init_rng_) {
    if (switches.use_anm) anm_ = AnmParams::create(cfg.embed_dim, init_rng_);
    backbone_.register_into(params_, buffers_);
    head_.register_into(params_, buffers_);
    if (anm_) anm_->register_into(params_, buffers_, "anm");
  }

  FdnmModel(const FdnmModel&) = delete;
  FdnmModel& operator=(const FdnmModel&) = delete;

  ModelOutput forward(const Tensor& images, std::span<const Modality> modality, Mode mode) {
    ModelOutput out;
    const Tensor fmap = backbone_.forward(images, modality, mode);
    out.head = head_.forward(fmap, mode);
    if (anm_) {
      out.anm = anm_forward(fmap, *anm_, mode);
      out.anm_emb1 = flatten(gap(out.anm->branch1));
      out.anm_emb2 = flatten(gap(out.anm->branch2));
    }
    return out;
  }

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  TensorTable& buffers() { return buffers_; }
  const TensorTable& buffers() const { return buffers_; }
  const ModelSwitches& switches() const { return switches_; }
  Backbone& backbone() { return backbone_; }
  EmbedHead& head() { return head_; }
  std::optional<AnmParams>& anm() { return anm_; }

 private:
  static BackboneConfig effective(BackboneConfig cfg, const ModelSwitches& sw) {
    if (!sw.use_agp) cfg.agp_after.clear();
    return cfg;
  }

  ModelSwitches switches_;
  Rng init_rng_;
  Backbone backbone_;
  EmbedHead head_;
  std::optional<AnmParams> anm_;
  ParamStore params_;
  TensorTable buffers_;
};

/// Retrieval descriptor: global and local post-BN embeddings, each segment
/// L2-normalized, concatenated. Returns [N x D * segments].
inline Tensor retrieval_embedding(const HeadOutput& head) {
  std::vector<const Tensor*> segs{&head.global_emb};
  for (const Tensor& t : head.local_emb) segs.push_back(&t);
  const std::size_t n = head.global_emb.dim(0), d = head.global_emb.dim(1);
  std::vector<double> out(n * d * segs.size());
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t s = 0; s < segs.size(); ++s) {
      auto v = segs[s]->values().subspan(r * d, d);
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      const double inv = norm > 0.0 ? 1.0 / norm : 0.0;
      for (std::size_t i = 0; i < d; ++i) out[(r * segs.size() + s) * d + i] = v[i] * inv;
    }
  }
  return Tensor({n, d * segs.size()}, std::move(out));
}

}  // namespace fdnm
