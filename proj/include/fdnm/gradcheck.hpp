#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "fdnm/fourier.hpp"
#include "fdnm/losses.hpp"
#include "fdnm/modules.hpp"
#include "fdnm/ops.hpp"
#include "fdnm/rng.hpp"
#include "fdnm/tensor.hpp"
#include "fdnm/training.hpp"

namespace fdnm {

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  double abs_floor = 1e-6;         // smallest denominator of the relative error
  std::size_t max_per_input = 24;  // elements probed per input tensor
  bool allow_kinks = false;        // skip points where the difference quotient has not converged
};

struct GradCheckResult {
  std::string name;
  std::uint64_t seed = 0;
  std::size_t checked = 0, skipped = 0;
  double max_rel_err = 0.0;
  std::string worst;  // "input[index]" of the largest error
  double tol = 1e-4;

  bool passed() const { return checked > 0 && max_rel_err <= tol && skipped * 10 <= checked + skipped; }
};

using NamedInput = std::pair<std::string, Tensor>;

/// Compares reverse-mode gradients of the scalar `f` against central finite
/// differences on a random subset of each input's elements.
inline GradCheckResult check_gradients(const std::string& name, std::uint64_t seed, const std::function<Tensor()>& f,
                                       const std::vector<NamedInput>& inputs, const GradCheckOptions& opt = {}) {
  GradCheckResult res;
  res.name = name;
  res.seed = seed;
  res.tol = opt.tol;
  for (const auto& [n, t] : inputs) {
    Tensor h = t;
    h.zero_grad();
  }
  const Tensor loss = f();
  backward(loss);
  // Below this magnitude a central difference is dominated by roundoff.
  const double floor =
      std::max(opt.abs_floor, 100.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(loss.item())) /
                                  (opt.h * opt.tol));
  Rng pick(seed, "gradcheck-pick");
  for (const auto& [input_name, t] : inputs) {
    Tensor x = t;
    const std::vector<double> analytic = x.has_grad() ? std::vector<double>(x.grad().begin(), x.grad().end())
                                                      : std::vector<double>(x.numel(), 0.0);
    std::vector<std::size_t> idx(x.numel());
    std::iota(idx.begin(), idx.end(), 0);
    if (idx.size() > opt.max_per_input) {
      std::shuffle(idx.begin(), idx.end(), pick.engine());
      idx.resize(opt.max_per_input);
    }
    for (std::size_t i : idx) {
      double& v = x.values_mut()[i];
      const double orig = v;
      auto central = [&](double step) {
        NoGradGuard guard;
        v = orig + step;
        const double fp = f().item();
        v = orig - step;
        const double fm = f().item();
        v = orig;
        return (fp - fm) / (2.0 * step);
      };
      const double fd = central(opt.h);
      const double scale = std::max({std::abs(analytic[i]), std::abs(fd), floor});
      if (opt.allow_kinks && std::abs(central(opt.h / 2) - fd) > opt.tol * scale) {
        // The difference quotient has not converged: a kink lies within h.
        ++res.skipped;
        continue;
      }
      const double err = std::abs(analytic[i] - fd) / scale;
      ++res.checked;
      if (err > res.max_rel_err) {
        res.max_rel_err = err;
        res.worst = input_name + "[" + std::to_string(i) + "]";
      }
    }
  }
  for (const auto& [n, t] : inputs) {
    Tensor h = t;
    h.zero_grad();
  }
  return res;
}

/// Fixed random linear functional of a tensor, turning any output into a scalar.
inline Tensor project(const Tensor& y, Rng& rng) {
  std::vector<double> w(y.numel());
  for (double& v : w) v = rng.normal(0.0, 1.0);
  return weighted_sum(y, w);
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), true);
}

/// Micro model used by the whole-network check: C=8, H=W=8, two identities.
inline BackboneConfig micro_backbone() {
  BackboneConfig c;
  c.blocks = {{8, 1}, {8, 2}, {8, 1}, {8, 1}};
  c.agp_after = {1, 2};
  c.agp_branches = 4;
  c.parts = 2;
  c.embed_dim = 8;
  return c;
}

namespace detail {

inline CenterSet random_centers(Branch b, std::size_t p, std::size_t d, Rng& rng) {
  std::vector<std::size_t> ids(p);
  std::iota(ids.begin(), ids.end(), 0);
  return {b, ids, random_tensor({p, d}, rng, -2.0, 2.0)};
}

inline double min_abs(const std::vector<double>& v) {
  double m = std::numeric_limits<double>::infinity();
  for (double x : v) m = std::min(m, std::abs(x));
  return m;
}

}  // namespace detail

/// Every differentiable op and the micro network, for seeds base..base+seeds-1.
inline std::vector<GradCheckResult> gradcheck_suite(std::size_t seeds = 20, std::uint64_t base = 0) {
  std::vector<GradCheckResult> out;
  GradCheckOptions smooth;
  GradCheckOptions kinky;
  kinky.allow_kinks = true;
  for (std::uint64_t s = base; s < base + seeds; ++s) {
    auto rng_for = [s](const char* op) { return Rng(s, op); };
    {
      Rng r = rng_for("conv1x1");
      Tensor x = random_tensor({2, 3, 4, 3}, r), w = random_tensor({4, 3}, r), b = random_tensor({4}, r);
      Rng pr = rng_for("conv1x1-proj");
      out.push_back(check_gradients("conv1x1", s, [&] { Rng p = pr; return project(conv1x1(x, w, b), p); },
                                    {{"x", x}, {"w", w}, {"b", b}}, smooth));
    }
    for (std::size_t stride : {1, 2}) {
      Rng r = rng_for("conv2d");
      Tensor x = random_tensor({2, 2, 5, 4}, r), w = random_tensor({3, 2, 3, 3}, r);
      Rng pr = rng_for("conv2d-proj");
      out.push_back(check_gradients("conv2d/stride" + std::to_string(stride), s,
                                    [&] { Rng p = pr; return project(conv2d(x, w, stride), p); }, {{"x", x}, {"w", w}},
                                    smooth));
    }
    {
      Rng r = rng_for("gap");
      Tensor x = random_tensor({2, 3, 4, 5}, r);
      Rng pr = rng_for("gap-proj");
      out.push_back(check_gradients("gap", s, [&] { Rng p = pr; return project(gap(x), p); }, {{"x", x}}, smooth));
    }
    {
      Rng r = rng_for("sigmoid");
      Tensor x = random_tensor({7}, r, -4.0, 4.0);
      Rng pr = rng_for("sigmoid-proj");
      out.push_back(check_gradients("sigmoid", s, [&] { Rng p = pr; return project(sigmoid(x), p); }, {{"x", x}}, smooth));
    }
    {
      Rng r = rng_for("relu");
      Tensor x = random_tensor({9}, r);
      Rng pr = rng_for("relu-proj");
      out.push_back(check_gradients("relu", s, [&] { Rng p = pr; return project(relu(x), p); }, {{"x", x}}, kinky));
    }
    {
      Rng r = rng_for("batch_norm");
      Tensor x = random_tensor({3, 2, 3, 2}, r), g = random_tensor({2}, r, 0.5, 1.5), b = random_tensor({2}, r);
      BnState st(2);
      Rng pr = rng_for("batch_norm-proj");
      out.push_back(check_gradients("batch_norm/4d", s,
                                    [&] { Rng p = pr; return project(batch_norm(x, st, g, b, Mode::train), p); },
                                    {{"x", x}, {"gamma", g}, {"beta", b}}, smooth));
      Tensor x2 = random_tensor({5, 3}, r), g2 = random_tensor({3}, r, 0.5, 1.5), b2 = random_tensor({3}, r);
      BnState st2(3);
      out.push_back(check_gradients("batch_norm/2d", s,
                                    [&] { Rng p = pr; return project(batch_norm(x2, st2, g2, b2, Mode::train), p); },
                                    {{"x", x2}, {"gamma", g2}, {"beta", b2}}, smooth));
    }
    {
      Rng r = rng_for("instance_norm");
      Tensor x = random_tensor({2, 3, 4, 4}, r), g = random_tensor({3}, r, 0.5, 1.5), b = random_tensor({3}, r);
      Rng pr = rng_for("instance_norm-proj");
      out.push_back(check_gradients("instance_norm", s,
                                    [&] { Rng p = pr; return project(instance_norm(x, &g, &b), p); },
                                    {{"x", x}, {"gamma", g}, {"beta", b}}, smooth));
    }
    {
      Rng r = rng_for("linear");
      Tensor x = random_tensor({4, 5}, r), w = random_tensor({3, 5}, r), b = random_tensor({3}, r);
      Rng pr = rng_for("linear-proj");
      out.push_back(check_gradients("linear", s, [&] { Rng p = pr; return project(linear(x, w, b), p); },
                                    {{"x", x}, {"w", w}, {"b", b}}, smooth));
    }
    {
      Rng r = rng_for("fft2");
      Tensor x = random_tensor({2, 2, 4, 5}, r);
      Rng pr = rng_for("fft2-proj");
      out.push_back(check_gradients("fft2/amp_phase", s,
                                    [&] {
                                      Rng p = pr;
                                      const Spectrum sp = fft2(x);
                                      return add(project(sp.amp, p), project(sp.pha, p));
                                    },
                                    {{"x", x}}, smooth));
    }
    {
      Rng r = rng_for("recombine");
      Tensor amp = random_tensor({2, 4, 3}, r, 0.2, 2.0), pha = random_tensor({2, 4, 3}, r, -3.0, 3.0);
      Rng pr = rng_for("recombine-proj");
      out.push_back(check_gradients("recombine/ifft2", s,
                                    [&] {
                                      Rng p = pr;
                                      return project(ifft2(recombine(amp, pha), Residue::force_real), p);
                                    },
                                    {{"amp", amp}, {"pha", pha}}, smooth));
    }
    {
      Rng r = rng_for("agp");
      AgpParams ap = AgpParams::create(8, 4, r);
      Tensor x = random_tensor({2, 8, 4, 4}, r);
      Rng pr = rng_for("agp-proj");
      std::vector<NamedInput> in{{"x", x}};
      for (std::size_t k = 0; k < ap.branches; ++k) {
        in.push_back({"weight" + std::to_string(k), ap.weight[k]});
        in.push_back({"bias" + std::to_string(k), ap.bias[k]});
      }
      out.push_back(check_gradients("agp_forward", s, [&] { Rng p = pr; return project(agp_forward(x, ap), p); }, in,
                                    smooth));
    }
    {
      Rng r = rng_for("anm");
      AnmParams np = AnmParams::create(4, r);
      Tensor f = random_tensor({3, 4, 4, 2}, r, 0.0, 2.0);
      Rng pr = rng_for("anm-proj");
      out.push_back(check_gradients("anm_forward", s,
                                    [&] {
                                      Rng p = pr;
                                      const AnmOutput o = anm_forward(f, np, Mode::train);
                                      return add(project(o.branch1, p), project(o.branch2, p));
                                    },
                                    {{"f", f},
                                     {"res1.weight", np.res1_weight},
                                     {"res1.bias", np.res1_bias},
                                     {"res2.weight", np.res2_weight},
                                     {"res2.bias", np.res2_bias},
                                     {"bn.gamma", np.bn_gamma},
                                     {"bn.beta", np.bn_beta}},
                                    smooth));
    }
    {
      Rng r = rng_for("cross_entropy");
      Tensor logits = random_tensor({5, 4}, r, -3.0, 3.0);
      std::vector<std::size_t> labels;
      for (int i = 0; i < 5; ++i) labels.push_back(r.index(4));
      out.push_back(check_gradients("cross_entropy", s, [&] { return cross_entropy(logits, labels); },
                                    {{"logits", logits}}, smooth));
    }
    {
      Rng r = rng_for("triplet");
      Tensor emb = random_tensor({8, 3}, r);
      const std::vector<std::size_t> labels{0, 0, 1, 1, 2, 2, 3, 3};
      out.push_back(check_gradients("triplet_batch_hard", s, [&] { return triplet_batch_hard(emb, labels, 0.3); },
                                    {{"emb", emb}}, kinky));
    }
    {
      Rng r = rng_for("cnm_branch");
      CenterSet a = detail::random_centers(Branch::v1, 3, 4, r), x = detail::random_centers(Branch::i1, 3, 4, r),
                o = detail::random_centers(Branch::v2, 3, 4, r);
      const double m = 0.2 + r.uniform(0.0, 4.0);
      if (detail::min_abs(cnm_terms(a, x, o, m)) >= 1e-3) {
        out.push_back(check_gradients("cnm_branch", s, [&] { return cnm_branch(a, x, o, m); },
                                      {{"anchor", a.centers}, {"cross", x.centers}, {"other", o.centers}}, kinky));
      }
    }
    {
      Rng r = rng_for("cnm_total");
      CenterSet v1 = detail::random_centers(Branch::v1, 3, 4, r), v2 = detail::random_centers(Branch::v2, 3, 4, r),
                i1 = detail::random_centers(Branch::i1, 3, 4, r), i2 = detail::random_centers(Branch::i2, 3, 4, r);
      const double m = 0.2 + r.uniform(0.0, 4.0);
      const double closest = std::min({detail::min_abs(cnm_terms(v1, i1, v2, m)), detail::min_abs(cnm_terms(v2, i2, v1, m)),
                                       detail::min_abs(cnm_terms(i1, v1, i2, m)), detail::min_abs(cnm_terms(i2, v2, i1, m))});
      if (closest >= 1e-3) {
        out.push_back(check_gradients("cnm_total", s, [&] { return cnm_total(v1, v2, i1, i2, m); },
                                      {{"v1", v1.centers}, {"v2", v2.centers}, {"i1", i1.centers}, {"i2", i2.centers}},
                                      kinky));
      }
    }
    {
      // id + lambda1 * tri + lambda2 * cnm over one shared embedding matrix.
      Rng r = rng_for("total_loss");
      Tensor emb = random_tensor({8, 4}, r), w = random_tensor({2, 4}, r), b = random_tensor({2}, r);
      const std::vector<std::size_t> labels{0, 0, 1, 1, 0, 0, 1, 1};
      const std::vector<Modality> mod{Modality::visible, Modality::visible, Modality::visible, Modality::visible,
                                      Modality::infrared, Modality::infrared, Modality::infrared, Modality::infrared};
      LossWeights lw;
      lw.margin_cnm = 3.0;
      out.push_back(check_gradients(
          "total_loss", s,
          [&] {
            const std::vector<std::size_t> cls{0, 1};
            const Tensor e2 = scale(emb, -0.5);
            const auto v1 = compute_centers(emb, labels, mod, Modality::visible, Branch::v1, cls);
            const auto v2 = compute_centers(e2, labels, mod, Modality::visible, Branch::v2, cls);
            const auto i1 = compute_centers(emb, labels, mod, Modality::infrared, Branch::i1, cls);
            const auto i2 = compute_centers(e2, labels, mod, Modality::infrared, Branch::i2, cls);
            return total_loss(cross_entropy(linear(emb, w, b), labels), triplet_batch_hard(emb, labels, lw.margin_tri),
                              cnm_total(v1, v2, i1, i2, lw.margin_cnm), lw);
          },
          {{"emb", emb}, {"w", w}, {"b", b}}, kinky));
    }
    {
      FdnmModel model(micro_backbone(), ModelSwitches{}, 2, s);
      Rng r = rng_for("micro-model");
      std::vector<double> px(8 * 3 * 8 * 8);
      for (double& v : px) v = r.uniform(0.0, 1.0);
      const Tensor images({8, 3, 8, 8}, std::move(px));
      const std::vector<std::size_t> labels{0, 0, 0, 0, 1, 1, 1, 1};
      const std::vector<Modality> mod{Modality::visible, Modality::visible, Modality::infrared, Modality::infrared,
                                      Modality::visible, Modality::visible, Modality::infrared, Modality::infrared};
      TrainConfig cfg;
      std::vector<NamedInput> in;
      for (const auto& [n, t] : model.params()) in.push_back({n, t});
      GradCheckOptions o = kinky;
      o.max_per_input = 4;
      out.push_back(check_gradients("micro_model", s,
                                    [&] {
                                      const ModelOutput mo = model.forward(images, mod, Mode::train);
                                      return compute_losses(mo, labels, mod, cfg).total;
                                    },
                                    in, o));
    }
  }
  return out;
}

}  // namespace fdnm
