#pragma once

#include <charconv>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fdnm/data.hpp"
#include "fdnm/eval.hpp"
#include "fdnm/modules.hpp"
#include "fdnm/training.hpp"

namespace fdnm {

struct EvalConfig {
  Metric metric = Metric::euclidean;
  bool camera_filter = false;
  bool operator==(const EvalConfig&) const = default;
};

/// Every tunable of a run. `seed` drives data generation, initialization,
/// sampling and augmentation.
struct RunConfig {
  SynthSpec synth;
  BackboneConfig backbone;
  TrainConfig train;
  EvalConfig eval;

  bool operator==(const RunConfig&) const = default;

  std::uint64_t seed() const { return train.seed; }
  void set_seed(std::uint64_t s) { train.seed = s, synth.seed = s; }

  static RunConfig desk() {
    RunConfig c;
    c.train = TrainConfig::desk();
    return c;
  }

  void validate() const {
    backbone.validate();
    backbone.output_size(synth.height, synth.width);
    train.validate();
    if (synth.num_identities < train.P) throw Error("config: synth.identities must be >= train.P");
    if (synth.images_per_identity < train.K) throw Error("config: synth.train_images must be >= train.K");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw Error("expected a number, got '" + s + "'");
  return v;
}

inline std::uint64_t parse_uint(const std::string& s) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) {
    throw Error("expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw Error("expected true or false, got '" + s + "'");
}

template <class T, class F>
std::vector<T> parse_list(const std::string& s, F parse_one) {
  std::vector<T> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(static_cast<T>(parse_one(trim(item))));
  return out;
}

template <class T, class F>
std::string join(const std::vector<T>& v, F fmt) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
  return s;
}

struct Key {
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class M>
Key size_key(std::string name, M member) {
  return {std::move(name), [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); },
          [member](RunConfig& c, const std::string& v) { member(c) = static_cast<std::size_t>(parse_uint(v)); }};
}

template <class M>
Key double_key(std::string name, M member) {
  return {std::move(name), [member](const RunConfig& c) { return format_double(member(const_cast<RunConfig&>(c))); },
          [member](RunConfig& c, const std::string& v) { member(c) = parse_double(v); }};
}

template <class M>
Key bool_key(std::string name, M member) {
  return {std::move(name), [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)) ? "true" : "false"; },
          [member](RunConfig& c, const std::string& v) { member(c) = parse_bool(v); }};
}

inline std::string size_str(std::size_t v) { return std::to_string(v); }

inline const std::vector<Key>& config_keys() {
  static const std::vector<Key> keys = [] {
    std::vector<Key> k;
    k.push_back({"seed", [](const RunConfig& c) { return std::to_string(c.seed()); },
                 [](RunConfig& c, const std::string& v) { c.set_seed(parse_uint(v)); }});
    k.push_back(size_key("synth.identities", [](RunConfig& c) -> auto& { return c.synth.num_identities; }));
    k.push_back(size_key("synth.train_images", [](RunConfig& c) -> auto& { return c.synth.images_per_identity; }));
    k.push_back(size_key("synth.test_images", [](RunConfig& c) -> auto& { return c.synth.test_images_per_identity; }));
    k.push_back(size_key("synth.height", [](RunConfig& c) -> auto& { return c.synth.height; }));
    k.push_back(size_key("synth.width", [](RunConfig& c) -> auto& { return c.synth.width; }));
    k.push_back(double_key("synth.noise_sigma", [](RunConfig& c) -> auto& { return c.synth.noise_sigma; }));
    k.push_back(double_key("synth.ir_brightness", [](RunConfig& c) -> auto& { return c.synth.ir_brightness; }));
    k.push_back(size_key("synth.ir_blur_radius", [](RunConfig& c) -> auto& { return c.synth.ir_blur_radius; }));

    k.push_back(size_key("model.in_channels", [](RunConfig& c) -> auto& { return c.backbone.in_channels; }));
    k.push_back({"model.channels",
                 [](const RunConfig& c) {
                   return join(c.backbone.blocks, [](const StageSpec& s) { return std::to_string(s.channels); });
                 },
                 [](RunConfig& c, const std::string& v) {
                   const auto ch = parse_list<std::size_t>(v, parse_uint);
                   c.backbone.blocks.resize(ch.size(), StageSpec{0, 1});
                   for (std::size_t i = 0; i < ch.size(); ++i) c.backbone.blocks[i].channels = ch[i];
                   if (!ch.empty()) c.backbone.embed_dim = ch.back();
                 }});
    k.push_back({"model.strides",
                 [](const RunConfig& c) {
                   return join(c.backbone.blocks, [](const StageSpec& s) { return std::to_string(s.stride); });
                 },
                 [](RunConfig& c, const std::string& v) {
                   const auto st = parse_list<std::size_t>(v, parse_uint);
                   c.backbone.blocks.resize(st.size(), StageSpec{0, 1});
                   for (std::size_t i = 0; i < st.size(); ++i) c.backbone.blocks[i].stride = st[i];
                 }});
    k.push_back(size_key("model.stream_split", [](RunConfig& c) -> auto& { return c.backbone.stream_split; }));
    k.push_back({"model.agp_after", [](const RunConfig& c) { return join(c.backbone.agp_after, size_str); },
                 [](RunConfig& c, const std::string& v) { c.backbone.agp_after = parse_list<std::size_t>(v, parse_uint); }});
    k.push_back(size_key("model.agp_branches", [](RunConfig& c) -> auto& { return c.backbone.agp_branches; }));
    k.push_back(size_key("model.parts", [](RunConfig& c) -> auto& { return c.backbone.parts; }));

    k.push_back(size_key("train.epochs", [](RunConfig& c) -> auto& { return c.train.epochs; }));
    k.push_back(size_key("train.warmup_epochs", [](RunConfig& c) -> auto& { return c.train.warmup_epochs; }));
    k.push_back(double_key("train.init_lr", [](RunConfig& c) -> auto& { return c.train.init_lr; }));
    k.push_back(double_key("train.base_lr", [](RunConfig& c) -> auto& { return c.train.base_lr; }));
    k.push_back({"train.milestones", [](const RunConfig& c) { return join(c.train.milestones, size_str); },
                 [](RunConfig& c, const std::string& v) { c.train.milestones = parse_list<std::size_t>(v, parse_uint); }});
    k.push_back({"train.decay_lrs", [](const RunConfig& c) { return join(c.train.decay_lrs, format_double); },
                 [](RunConfig& c, const std::string& v) { c.train.decay_lrs = parse_list<double>(v, parse_double); }});
    k.push_back(double_key("train.momentum", [](RunConfig& c) -> auto& { return c.train.momentum; }));
    k.push_back(double_key("train.weight_decay", [](RunConfig& c) -> auto& { return c.train.weight_decay; }));
    k.push_back(double_key("train.grad_clip", [](RunConfig& c) -> auto& { return c.train.grad_clip; }));
    k.push_back(size_key("train.P", [](RunConfig& c) -> auto& { return c.train.P; }));
    k.push_back(size_key("train.K", [](RunConfig& c) -> auto& { return c.train.K; }));
    k.push_back(bool_key("train.flip", [](RunConfig& c) -> auto& { return c.train.flip; }));
    k.push_back(size_key("train.eval_every", [](RunConfig& c) -> auto& { return c.train.eval_every; }));
    k.push_back(size_key("train.checkpoint_every", [](RunConfig& c) -> auto& { return c.train.checkpoint_every; }));
    k.push_back({"train.pair_mode",
                 [](const RunConfig& c) { return std::string(c.train.pair_mode == PairMode::ordered ? "ordered" : "unordered"); },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "ordered") c.train.pair_mode = PairMode::ordered;
                   else if (v == "unordered") c.train.pair_mode = PairMode::unordered;
                   else throw Error("expected ordered or unordered, got '" + v + "'");
                 }});

    k.push_back(double_key("lambda1", [](RunConfig& c) -> auto& { return c.train.weights.lambda1; }));
    k.push_back(double_key("lambda2", [](RunConfig& c) -> auto& { return c.train.weights.lambda2; }));
    k.push_back(double_key("margin_cnm", [](RunConfig& c) -> auto& { return c.train.weights.margin_cnm; }));
    k.push_back(double_key("margin_tri", [](RunConfig& c) -> auto& { return c.train.weights.margin_tri; }));
    k.push_back(bool_key("use_agp", [](RunConfig& c) -> auto& { return c.train.use_agp; }));
    k.push_back(bool_key("use_anm", [](RunConfig& c) -> auto& { return c.train.use_anm; }));
    k.push_back(bool_key("use_cnm", [](RunConfig& c) -> auto& { return c.train.use_cnm; }));
    k.push_back(bool_key("use_local", [](RunConfig& c) -> auto& { return c.train.use_local; }));

    k.push_back({"eval.metric",
                 [](const RunConfig& c) { return std::string(c.eval.metric == Metric::euclidean ? "euclidean" : "cosine"); },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "euclidean") c.eval.metric = Metric::euclidean;
                   else if (v == "cosine") c.eval.metric = Metric::cosine;
                   else throw Error("expected euclidean or cosine, got '" + v + "'");
                 }});
    k.push_back(bool_key("eval.camera_filter", [](RunConfig& c) -> auto& { return c.eval.camera_filter; }));
    return k;
  }();
  return keys;
}

}  // namespace detail

/// Applies `key = value` lines on top of `base`. Blank lines and text after
/// `#` are ignored; unknown or repeated keys are errors.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}, const std::string& origin = "<config>") {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> seen;
  while (std::getline(in, line)) {
    ++lineno;
    const auto where = origin + ":" + std::to_string(lineno) + ": ";
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(where + "expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto& keys = detail::config_keys();
    auto it = std::find_if(keys.begin(), keys.end(), [&](const detail::Key& k) { return k.name == key; });
    if (it == keys.end()) throw Error(where + "unknown key '" + key + "'");
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) throw Error(where + "key '" + key + "' repeated");
    seen.push_back(key);
    try {
      it->set(base, value);
    } catch (const Error& e) {
      throw Error(where + key + ": " + e.what());
    }
  }
  return base;
}

inline std::string serialize_config(const RunConfig& c) {
  std::string s;
  for (const auto& k : detail::config_keys()) s += k.name + " = " + k.get(c) + "\n";
  return s;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  return parse_config(read_file(path), std::move(base), path);
}

}  // namespace fdnm
