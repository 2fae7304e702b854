#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fdnm/modules.hpp"
#include "fdnm/param_store.hpp"
#include "fdnm/rng.hpp"
#include "fdnm/tensor.hpp"

namespace fdnm {

struct Sample {
  Tensor image;  // [3 x H x W], values in [0, 1]
  std::size_t identity = 0;
  Modality modality = Modality::visible;
  int camera = 0;
};

inline constexpr int kVisibleCamera = 1;
inline constexpr int kInfraredCamera = 2;

/// Parameters of the synthetic two-modality identity set.
struct SynthSpec {
  std::size_t num_identities = 20;
  std::size_t images_per_identity = 16;  // per modality, training split
  std::size_t test_images_per_identity = 4;  // per modality, evaluation split
  std::size_t height = 32;
  std::size_t width = 16;
  double noise_sigma = 0.05;
  // Infrared rendering: luma collapse, brightness gain, then a blur of this radius.
  double ir_brightness = 0.6;
  std::size_t ir_blur_radius = 1;
  std::uint64_t seed = 0;

  bool operator==(const SynthSpec&) const = default;
};

struct Dataset {
  SynthSpec spec;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

/// Visual signature of one identity. Colors only survive in the visible
/// modality; the layout attributes survive both.
struct IdentitySignature {
  double top[3], bottom[3], head[3];
  int stripe_orientation;  // 0 horizontal, 1 vertical, 2 diagonal
  double stripe_period;    // pixels
  double waist;            // torso/leg boundary as a fraction of height
  int accessory;           // 0 none, 1 left, 2 right
  bool skirt;
};

namespace detail {

inline std::vector<IdentitySignature> make_signatures(const SynthSpec& spec) {
  // Distinct layout combinations, dealt out in a seeded order.
  std::vector<std::size_t> combos(3 * 3 * 3 * 3 * 2);
  std::iota(combos.begin(), combos.end(), 0);
  Rng deal(spec.seed, "synth-layout");
  std::shuffle(combos.begin(), combos.end(), deal.engine());
  static constexpr double kPeriods[] = {3.0, 4.0, 6.0};
  static constexpr double kWaists[] = {0.5, 0.58, 0.66};
  std::vector<IdentitySignature> out;
  for (std::size_t id = 0; id < spec.num_identities; ++id) {
    std::size_t c = combos[id % combos.size()];
    IdentitySignature s{};
    s.stripe_orientation = static_cast<int>(c % 3), c /= 3;
    s.stripe_period = kPeriods[c % 3], c /= 3;
    s.waist = kWaists[c % 3], c /= 3;
    s.accessory = static_cast<int>(c % 3), c /= 3;
    s.skirt = (c % 2) == 1;
    Rng rng(spec.seed, "synth-color", id);
    for (int ch = 0; ch < 3; ++ch) {
      s.top[ch] = rng.uniform(0.1, 0.95);
      s.bottom[ch] = rng.uniform(0.05, 0.9);
    }
    const double skin = rng.uniform(0.55, 0.9);
    s.head[0] = skin;
    s.head[1] = skin * 0.8;
    s.head[2] = skin * 0.65;
    out.push_back(s);
  }
  return out;
}

/// Clean visible-light rendering with the figure shifted by (dy, dx) pixels.
inline std::vector<double> render_visible(const IdentitySignature& s, std::size_t h, std::size_t w, int dy, int dx) {
  constexpr double kBackground = 0.45;
  std::vector<double> img(3 * h * w, kBackground);
  const double H = static_cast<double>(h), W = static_cast<double>(w);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double y = static_cast<double>(static_cast<long>(r) - dy) + 0.5;
      const double x = static_cast<double>(static_cast<long>(c) - dx) + 0.5;
      const double fy = y / H, fx = x / W;
      const double* color = nullptr;
      double gain = 1.0;
      const double hy = (y - 0.13 * H) / (0.09 * H), hx = (x - 0.5 * W) / (0.18 * W);
      if (hy * hy + hx * hx <= 1.0) {
        color = s.head;
      } else if (fy >= 0.24 && fy < s.waist && fx >= 0.2 && fx < 0.8) {
        color = s.top;
        const double coord = s.stripe_orientation == 0 ? y : s.stripe_orientation == 1 ? x : x + y;
        gain = 0.6 + 0.4 * (0.5 + 0.5 * std::cos(2.0 * 3.141592653589793 * coord / s.stripe_period));
      } else if (fy >= s.waist && fy < 0.96) {
        const bool skirt_zone = s.skirt && fy < s.waist + 0.15;
        const bool in_leg = skirt_zone ? (fx >= 0.2 && fx < 0.8)
                                       : ((fx >= 0.22 && fx < 0.46) || (fx >= 0.54 && fx < 0.78));
        if (in_leg) color = s.bottom;
      }
      const bool in_bag = fy >= 0.45 && fy < 0.6 &&
                          ((s.accessory == 1 && fx >= 0.0 && fx < 0.2) || (s.accessory == 2 && fx >= 0.8 && fx < 1.0));
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double v = kBackground;
        if (in_bag) {
          v = 0.08;
        } else if (color) {
          v = color[ch] * gain;
        }
        img[(ch * h + r) * w + c] = v;
      }
    }
  }
  return img;
}

/// Luma collapse to three equal channels, brightness gain, separable binomial blur.
inline std::vector<double> to_infrared(const std::vector<double>& vis, std::size_t h, std::size_t w, double gain,
                                       std::size_t radius) {
  std::vector<double> luma(h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    luma[i] = gain * (0.299 * vis[i] + 0.587 * vis[h * w + i] + 0.114 * vis[2 * h * w + i]);
  }
  // Binomial weights approximate a Gaussian of the given radius.
  std::vector<double> k{1.0};
  for (std::size_t i = 0; i < 2 * radius; ++i) {
    std::vector<double> next(k.size() + 1, 0.0);
    for (std::size_t j = 0; j < k.size(); ++j) next[j] += 0.5 * k[j], next[j + 1] += 0.5 * k[j];
    k = next;
  }
  auto blur = [&](const std::vector<double>& src, bool horizontal) {
    std::vector<double> dst(h * w, 0.0);
    const long r = static_cast<long>(radius);
    for (long y = 0; y < static_cast<long>(h); ++y) {
      for (long x = 0; x < static_cast<long>(w); ++x) {
        double acc = 0.0;
        for (long t = -r; t <= r; ++t) {
          long yy = horizontal ? y : std::clamp(y + t, 0L, static_cast<long>(h) - 1);
          long xx = horizontal ? std::clamp(x + t, 0L, static_cast<long>(w) - 1) : x;
          acc += k[static_cast<std::size_t>(t + r)] * src[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
        }
        dst[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = acc;
      }
    }
    return dst;
  };
  luma = blur(blur(luma, true), false);
  std::vector<double> out(3 * h * w);
  for (std::size_t ch = 0; ch < 3; ++ch) std::copy(luma.begin(), luma.end(), out.begin() + static_cast<long>(ch * h * w));
  return out;
}

inline Sample render_sample(const SynthSpec& spec, const IdentitySignature& sig, std::size_t id, Modality m,
                            const char* split, std::size_t index) {
  Rng rng(spec.seed, split, id * 2 + static_cast<std::size_t>(m), index);
  const int dy = static_cast<int>(rng.index(3)) - 1;
  const int dx = static_cast<int>(rng.index(3)) - 1;
  std::vector<double> img = render_visible(sig, spec.height, spec.width, dy, dx);
  if (m == Modality::infrared) img = to_infrared(img, spec.height, spec.width, spec.ir_brightness, spec.ir_blur_radius);
  if (spec.noise_sigma > 0.0) {
    for (double& v : img) v += rng.normal(0.0, spec.noise_sigma);
  }
  for (double& v : img) v = std::clamp(v, 0.0, 1.0);
  return {Tensor({3, spec.height, spec.width}, std::move(img)), id, m,
          m == Modality::visible ? kVisibleCamera : kInfraredCamera};
}

}  // namespace detail

/// Deterministic two-modality dataset: per identity and modality,
/// `images_per_identity` training and `test_images_per_identity` test images.
inline Dataset generate(const SynthSpec& spec) {
  if (spec.num_identities == 0 || spec.images_per_identity == 0 || spec.height == 0 || spec.width == 0) {
    throw Error("synth: sizes must be positive");
  }
  const auto sigs = detail::make_signatures(spec);
  // Clean renders must differ pairwise.
  std::vector<std::vector<double>> clean;
  for (const auto& s : sigs) clean.push_back(detail::render_visible(s, spec.height, spec.width, 0, 0));
  for (std::size_t a = 0; a < clean.size(); ++a) {
    for (std::size_t b = a + 1; b < clean.size(); ++b) {
      double d = 0.0;
      for (std::size_t i = 0; i < clean[a].size(); ++i) d += (clean[a][i] - clean[b][i]) * (clean[a][i] - clean[b][i]);
      if (!(d > 0.0)) {
        throw Error("synth: identities " + std::to_string(a) + " and " + std::to_string(b) + " render identically");
      }
    }
  }
  Dataset ds;
  ds.spec = spec;
  for (std::size_t id = 0; id < spec.num_identities; ++id) {
    for (Modality m : {Modality::visible, Modality::infrared}) {
      for (std::size_t i = 0; i < spec.images_per_identity; ++i) {
        ds.train.push_back(detail::render_sample(spec, sigs[id], id, m, "synth-train", i));
      }
      for (std::size_t i = 0; i < spec.test_images_per_identity; ++i) {
        ds.test.push_back(detail::render_sample(spec, sigs[id], id, m, "synth-test", i));
      }
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentFlags {
  bool flip = true;
  bool force_flip = false;  // flip regardless of the coin
};

/// Mirrors the W axis: (c, h, w) -> (c, h, W-1-w).
inline Tensor hflip(const Tensor& image) {
  if (image.rank() != 3) throw Error("hflip: expected [C x H x W], got " + shape_str(image.shape()));
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<double> out(image.numel());
  auto v = image.values();
  for (std::size_t q = 0; q < c * h; ++q) {
    for (std::size_t x = 0; x < w; ++x) out[q * w + x] = v[q * w + (w - 1 - x)];
  }
  return Tensor(image.shape(), std::move(out));
}

/// Horizontal flip with probability 0.5 drawn from `rng`.
inline Sample augment(const Sample& s, const AugmentFlags& flags, Rng& rng) {
  Sample out = s;
  if (!flags.flip) return out;
  const bool coin = rng.bernoulli(0.5);
  if (flags.force_flip || coin) out.image = hflip(s.image);
  return out;
}

// ---------------------------------------------------------------------------
// PK sampling

struct Batch {
  Tensor images;  // [N x 3 x H x W]
  std::vector<std::size_t> labels;
  std::vector<Modality> modality;
  std::vector<std::size_t> sample_index;
};

/// P identities x K images per modality per batch. Within an epoch every
/// identity's images are visited without replacement in chunks of K; the
/// epoch runs ceil(images / K) rounds of ceil(identities / P) batches.
class PkSampler {
 public:
  PkSampler(const std::vector<Sample>& samples, std::size_t p, std::size_t k, std::uint64_t seed)
      : p_(p), k_(k), seed_(seed) {
    if (p == 0 || k == 0) throw Error("pk sampler: P and K must be positive");
    std::map<std::size_t, std::array<std::vector<std::size_t>, 2>> pools;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      pools[samples[i].identity][static_cast<std::size_t>(samples[i].modality)].push_back(i);
    }
    if (pools.size() < p) {
      throw Error("pk sampler: need " + std::to_string(p) + " identities, dataset has " + std::to_string(pools.size()));
    }
    for (auto& [id, per_mod] : pools) {
      for (std::size_t m = 0; m < 2; ++m) {
        if (per_mod[m].size() < k) {
          throw Error("pk sampler: identity " + std::to_string(id) + " has " + std::to_string(per_mod[m].size()) + " " +
                      modality_name(static_cast<Modality>(m)) + " images, need " + std::to_string(k));
        }
        rounds_ = std::max(rounds_, (per_mod[m].size() + k - 1) / k);
      }
      ids_.push_back(id);
      pools_.push_back(per_mod);
    }
  }

  std::size_t batches_per_epoch() const { return rounds_ * ((ids_.size() + p_ - 1) / p_); }
  std::size_t batch_size() const { return 2 * p_ * k_; }

  /// Sample indices of batch `step` in `epoch`; identity-major, VIS before IR.
  std::vector<std::size_t> batch_indices(std::size_t epoch, std::size_t step) {
    if (step >= batches_per_epoch()) throw Error("pk sampler: step beyond epoch");
    if (!plan_epoch_ || *plan_epoch_ != epoch) plan(epoch);
    return plan_[step];
  }

  std::vector<std::vector<std::size_t>> epoch_batches(std::size_t epoch) {
    plan(epoch);
    return plan_;
  }

 private:
  void plan(std::size_t epoch) {
    Rng rng(seed_, "pk", epoch);
    const std::size_t n_ids = ids_.size();
    // chunks[id][m][round] = K sample indices
    std::vector<std::array<std::vector<std::vector<std::size_t>>, 2>> chunks(n_ids);
    for (std::size_t i = 0; i < n_ids; ++i) {
      for (std::size_t m = 0; m < 2; ++m) {
        std::vector<std::size_t> order = pools_[i][m];
        std::shuffle(order.begin(), order.end(), rng.engine());
        // Top up from a second shuffled pass until every round has K images.
        std::vector<std::size_t> extra = pools_[i][m];
        std::shuffle(extra.begin(), extra.end(), rng.engine());
        for (std::size_t e = 0; order.size() < rounds_ * k_; ++e) order.push_back(extra[e % extra.size()]);
        for (std::size_t r = 0; r < rounds_; ++r) {
          chunks[i][m].emplace_back(order.begin() + static_cast<long>(r * k_), order.begin() + static_cast<long>((r + 1) * k_));
        }
      }
    }
    plan_.clear();
    const std::size_t groups = (n_ids + p_ - 1) / p_;
    for (std::size_t r = 0; r < rounds_; ++r) {
      std::vector<std::size_t> perm(n_ids);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng.engine());
      for (std::size_t g = 0; g < groups; ++g) {
        std::vector<std::size_t> chosen;
        for (std::size_t j = g * p_; j < std::min((g + 1) * p_, n_ids); ++j) chosen.push_back(perm[j]);
        // A short final group borrows distinct identities from the front of the round.
        for (std::size_t j = 0; chosen.size() < p_; ++j) {
          if (std::find(chosen.begin(), chosen.end(), perm[j]) == chosen.end()) chosen.push_back(perm[j]);
        }
        std::vector<std::size_t> batch;
        for (std::size_t id : chosen) {
          for (std::size_t m = 0; m < 2; ++m) batch.insert(batch.end(), chunks[id][m][r].begin(), chunks[id][m][r].end());
        }
        plan_.push_back(std::move(batch));
      }
    }
    plan_epoch_ = epoch;
  }

  std::size_t p_, k_;
  std::uint64_t seed_;
  std::size_t rounds_ = 0;
  std::vector<std::size_t> ids_;
  std::vector<std::array<std::vector<std::size_t>, 2>> pools_;
  std::optional<std::size_t> plan_epoch_;
  std::vector<std::vector<std::size_t>> plan_;
};

/// Stacks samples into one interleaved batch tensor, applying `augment` with a
/// stream keyed by (seed, epoch, step).
inline Batch assemble_batch(const std::vector<Sample>& samples, std::span<const std::size_t> indices,
                            const AugmentFlags& flags, std::uint64_t seed, std::size_t epoch, std::size_t step) {
  if (indices.empty()) throw Error("assemble_batch: empty batch");
  Rng rng(seed, "augment", epoch, step);
  Batch b;
  const Shape& s0 = samples.at(indices[0]).image.shape();
  std::vector<double> data;
  data.reserve(indices.size() * shape_numel(s0));
  for (std::size_t i : indices) {
    const Sample s = augment(samples.at(i), flags, rng);
    if (s.image.shape() != s0) throw Error("assemble_batch: mixed image sizes");
    data.insert(data.end(), s.image.values().begin(), s.image.values().end());
    b.labels.push_back(s.identity);
    b.modality.push_back(s.modality);
    b.sample_index.push_back(i);
  }
  b.images = Tensor({indices.size(), s0[0], s0[1], s0[2]}, std::move(data));
  return b;
}

/// One PK batch: identities P, K per modality, reproducible from (seed, epoch, step).
inline Batch pk_sample(const std::vector<Sample>& samples, std::size_t p, std::size_t k, std::uint64_t seed,
                       std::size_t epoch = 0, std::size_t step = 0, AugmentFlags flags = {false, false}) {
  PkSampler sampler(samples, p, k, seed);
  const auto idx = sampler.batch_indices(epoch, step);
  return assemble_batch(samples, idx, flags, seed, epoch, step);
}

// ---------------------------------------------------------------------------
// Binary PNM (P5 grayscale, P6 color), maxval 255

inline Tensor decode_pnm(const std::string& bytes, const std::string& origin = "<memory>") {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> Error {
    return Error(origin + ": " + what + " at byte " + std::to_string(pos));
  };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&]() -> std::size_t {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) throw fail("expected a number");
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > 1u << 24) throw fail("header value too large");
      ++pos;
    }
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) throw fail("not a binary P5/P6 file");
  const std::size_t channels = bytes[1] == '6' ? 3 : 1;
  pos = 2;
  const std::size_t w = read_uint();
  const std::size_t h = read_uint();
  const std::size_t maxval = read_uint();
  if (w == 0 || h == 0) throw fail("zero image size");
  if (maxval != 255) throw fail("maxval " + std::to_string(maxval) + " unsupported (need 255)");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) throw fail("missing header terminator");
  ++pos;
  const std::size_t need = channels * h * w;
  if (bytes.size() - pos < need) {
    pos = bytes.size();
    throw fail("truncated payload (need " + std::to_string(need) + " bytes)");
  }
  std::vector<double> v(need);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        const auto byte = static_cast<unsigned char>(bytes[pos + (y * w + x) * channels + c]);
        v[(c * h + y) * w + x] = static_cast<double>(byte) / 255.0;
      }
    }
  }
  return Tensor({channels, h, w}, std::move(v));
}

inline unsigned char quantize_u8(double v) {
  return static_cast<unsigned char>(std::clamp(std::floor(v * 255.0 + 0.5), 0.0, 255.0));
}

/// [1 x H x W] -> P5, [3 x H x W] -> P6. Values are clamped to [0, 1] and rounded half-up.
inline std::string encode_pnm(const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw Error("save_image: expected [1|3 x H x W], got " + shape_str(image.shape()));
  }
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::string out = std::string(c == 3 ? "P6" : "P5") + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  auto v = image.values();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) out.push_back(static_cast<char>(quantize_u8(v[(ch * h + y) * w + x])));
    }
  }
  return out;
}

inline Tensor load_image(const std::string& path) { return decode_pnm(read_file(path), path); }
inline void save_image(const Tensor& image, const std::string& path) { write_file(path, encode_pnm(image)); }

/// Writes train/ and test/ PNM files plus manifest.tsv (path, identity, modality, camera).
inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::ostringstream manifest;
  manifest << "path\tidentity\tmodality\tcamera\n";
  for (const char* split : {"train", "test"}) {
    fs::create_directories(dir / split);
    const auto& samples = std::string(split) == "train" ? ds.train : ds.test;
    std::map<std::pair<std::size_t, int>, std::size_t> counter;
    for (const Sample& s : samples) {
      const std::size_t n = counter[{s.identity, static_cast<int>(s.modality)}]++;
      char name[96];
      std::snprintf(name, sizeof(name), "%s/id%03zu_%s_%03zu.ppm", split, s.identity,
                    s.modality == Modality::visible ? "vis" : "ir", n);
      save_image(s.image, (dir / name).string());
      manifest << name << '\t' << s.identity << '\t' << modality_name(s.modality) << '\t' << s.camera << '\n';
    }
  }
  write_file((dir / "manifest.tsv").string(), manifest.str());
}

/// Reads a directory written by write_dataset; the split comes from the path prefix.
inline Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.tsv");
  if (!f) throw Error("cannot open '" + (dir / "manifest.tsv").string() + "'");
  Dataset ds;
  std::string line;
  std::getline(f, line);
  std::size_t max_id = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string path, mod;
    Sample s;
    if (!(is >> path >> s.identity >> mod >> s.camera)) throw Error("manifest: malformed line '" + line + "'");
    if (mod != "VIS" && mod != "IR") throw Error("manifest: unknown modality '" + mod + "'");
    s.modality = mod == "VIS" ? Modality::visible : Modality::infrared;
    s.image = load_image((dir / path).string());
    if (s.image.dim(0) == 1) s.image = Tensor({3, s.image.dim(1), s.image.dim(2)}, [&] {
        std::vector<double> v;
        for (int c = 0; c < 3; ++c) v.insert(v.end(), s.image.values().begin(), s.image.values().end());
        return v;
      }());
    max_id = std::max(max_id, s.identity);
    (path.rfind("test/", 0) == 0 ? ds.test : ds.train).push_back(std::move(s));
  }
  ds.spec.num_identities = max_id + 1;
  if (!ds.train.empty()) {
    ds.spec.height = ds.train[0].image.dim(1);
    ds.spec.width = ds.train[0].image.dim(2);
  } else if (!ds.test.empty()) {
    ds.spec.height = ds.test[0].image.dim(1);
    ds.spec.width = ds.test[0].image.dim(2);
  }
  return ds;
}

}  // namespace fdnm
