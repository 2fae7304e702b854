#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <sstream>
#include <utility>
#include <vector>

#include "fdnm/fft.hpp"
#include "fdnm/tensor.hpp"

namespace fdnm {

/// Real and imaginary planes of a spectrum, as two graph tensors.
struct ComplexTensor {
  Tensor re;
  Tensor im;
};

/// Polar form of a per-channel 2-D spectrum: amplitude and phase planes of
/// identical shape ([C x H x W] or [N x C x H x W]). Full H x W grid.
struct Spectrum {
  Tensor amp;
  Tensor pha;

  const Shape& shape() const { return amp.shape(); }
};

enum class AmpCheck { non_negative, allow_signed };
enum class Residue { check, force_real };
enum class Component { amplitude, phase };

inline constexpr double kAmpGradFloor = 1e-12;
inline constexpr double kResidueTolerance = 1e-8;

/// Elementwise polar view of one complex value. atan2(0, 0) is taken as 0 and
/// the phase is folded into (-pi, pi].
inline std::pair<double, double> amp_phase(double re, double im) {
  const double amp = std::hypot(re, im);
  if (re == 0.0 && im == 0.0) return {0.0, 0.0};
  double pha = std::atan2(im, re);
  if (pha <= -std::numbers::pi) pha = std::numbers::pi;
  return {amp, pha};
}

namespace detail {

struct PlaneView {
  std::size_t planes, h, w;
};

inline PlaneView plane_view(const char* op, const Shape& shape) {
  if (shape.size() < 2) throw Error(std::string(op) + ": needs at least [H x W], got " + shape_str(shape));
  const std::size_t h = shape[shape.size() - 2], w = shape[shape.size() - 1];
  return {shape_numel(shape) / (h * w), h, w};
}

/// First or second half of a stacked [2 x ...] tensor.
inline Tensor take_half(const Tensor& joint, std::size_t which, const Shape& shape) {
  const std::size_t n = shape_numel(shape);
  auto jv = joint.values();
  std::vector<double> out(jv.begin() + static_cast<std::ptrdiff_t>(which * n),
                          jv.begin() + static_cast<std::ptrdiff_t>((which + 1) * n));
  return make_op(shape, std::move(out), {&joint}, [joint, which, n](std::span<const double> g) {
    auto& gj = grad_of(joint);
    for (std::size_t i = 0; i < n; ++i) gj[which * n + i] += g[i];
  });
}

inline std::pair<Tensor, Tensor> split_joint(const Tensor& joint, const Shape& shape) {
  return {take_half(joint, 0, shape), take_half(joint, 1, shape)};
}

inline Shape joint_shape(const Shape& shape) {
  Shape s{2};
  s.insert(s.end(), shape.begin(), shape.end());
  return s;
}

/// Applies the unitary transform to every plane of (re, im) buffers, in place.
inline void transform_planes(std::vector<double>& re, std::vector<double>& im, const PlaneView& v, bool inverse) {
  const std::size_t hw = v.h * v.w;
  std::vector<fft::cplx> buf(hw);
  for (std::size_t p = 0; p < v.planes; ++p) {
    for (std::size_t i = 0; i < hw; ++i) buf[i] = fft::cplx(re[p * hw + i], im[p * hw + i]);
    fft::transform2d(buf.data(), v.h, v.w, inverse);
    for (std::size_t i = 0; i < hw; ++i) {
      re[p * hw + i] = buf[i].real();
      im[p * hw + i] = buf[i].imag();
    }
  }
}

inline void require_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw Error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

/// Unitary forward transform of a real input, per channel plane, projected onto
/// exact conjugate symmetry. Self-conjugate bins have a zero imaginary part.
inline ComplexTensor fft2_complex(const Tensor& x) {
  const auto v = detail::plane_view("fft2", x.shape());
  std::vector<double> re(x.values().begin(), x.values().end()), im(x.numel(), 0.0);
  detail::transform_planes(re, im, v, false);
  const std::size_t hw = v.h * v.w;
  for (std::size_t p = 0; p < v.planes; ++p) {
    double* pr = re.data() + p * hw;
    double* pi = im.data() + p * hw;
    for (std::size_t u = 0; u < v.h; ++u) {
      for (std::size_t w = 0; w < v.w; ++w) {
        const std::size_t k = u * v.w + w;
        const std::size_t m = ((v.h - u) % v.h) * v.w + (v.w - w) % v.w;
        if (m < k) continue;
        const double r = 0.5 * (pr[k] + pr[m]);
        const double i = 0.5 * (pi[k] - pi[m]);
        pr[k] = r;
        pr[m] = r;
        pi[k] = i;
        pi[m] = -i;
      }
    }
  }
  std::vector<double> joint(std::move(re));
  joint.insert(joint.end(), im.begin(), im.end());
  Tensor j = detail::make_op(detail::joint_shape(x.shape()), std::move(joint), {&x}, [x, v](std::span<const double> g) {
    const std::size_t n = x.numel();
    std::vector<double> gr(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(n));
    std::vector<double> gi(g.begin() + static_cast<std::ptrdiff_t>(n), g.end());
    detail::transform_planes(gr, gi, v, true);
    auto& gx = detail::grad_of(x);
    for (std::size_t i = 0; i < n; ++i) gx[i] += gr[i];
  });
  auto [r, i] = detail::split_joint(j, x.shape());
  return {r, i};
}

namespace detail {

inline ComplexTensor complex_transform(const ComplexTensor& z, bool inverse) {
  require_shape(inverse ? "ifft2" : "fft2", z.re, z.im);
  const auto v = plane_view(inverse ? "ifft2" : "fft2", z.re.shape());
  std::vector<double> re(z.re.values().begin(), z.re.values().end());
  std::vector<double> im(z.im.values().begin(), z.im.values().end());
  transform_planes(re, im, v, inverse);
  std::vector<double> joint(std::move(re));
  joint.insert(joint.end(), im.begin(), im.end());
  Tensor zr = z.re, zi = z.im;
  Tensor j = make_op(joint_shape(z.re.shape()), std::move(joint), {&zr, &zi},
                     [zr, zi, v, inverse](std::span<const double> g) {
                       const std::size_t n = zr.numel();
                       std::vector<double> gr(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(n));
                       std::vector<double> gi(g.begin() + static_cast<std::ptrdiff_t>(n), g.end());
                       // Adjoint of a unitary map is its inverse.
                       transform_planes(gr, gi, v, !inverse);
                       if (zr.requires_grad()) {
                         auto& a = grad_of(zr);
                         for (std::size_t i = 0; i < n; ++i) a[i] += gr[i];
                       }
                       if (zi.requires_grad()) {
                         auto& b = grad_of(zi);
                         for (std::size_t i = 0; i < n; ++i) b[i] += gi[i];
                       }
                     });
  auto [r, i] = split_joint(j, z.re.shape());
  return {r, i};
}

}  // namespace detail

inline ComplexTensor fft2_complex(const ComplexTensor& z) { return detail::complex_transform(z, false); }
inline ComplexTensor ifft2_complex(const ComplexTensor& z) { return detail::complex_transform(z, true); }

/// Amplitude sqrt(re^2 + im^2) and phase atan2(im, re), differentiable.
inline Spectrum to_polar(const ComplexTensor& z) {
  detail::require_shape("amp_phase", z.re, z.im);
  const std::size_t n = z.re.numel();
  std::vector<double> joint(2 * n);
  auto rv = z.re.values(), iv = z.im.values();
  for (std::size_t i = 0; i < n; ++i) {
    auto [a, p] = amp_phase(rv[i], iv[i]);
    joint[i] = a;
    joint[n + i] = p;
  }
  Tensor zr = z.re, zi = z.im;
  Tensor j = detail::make_op(detail::joint_shape(z.re.shape()), std::move(joint), {&zr, &zi},
                             [zr, zi, n](std::span<const double> g) {
                               auto rv = zr.values(), iv = zi.values();
                               std::vector<double>* gr = zr.requires_grad() ? &detail::grad_of(zr) : nullptr;
                               std::vector<double>* gi = zi.requires_grad() ? &detail::grad_of(zi) : nullptr;
                               for (std::size_t i = 0; i < n; ++i) {
                                 const double a = std::max(std::hypot(rv[i], iv[i]), kAmpGradFloor);
                                 const double ga = g[i], gp = g[n + i];
                                 if (gr) (*gr)[i] += ga * rv[i] / a - gp * iv[i] / (a * a);
                                 if (gi) (*gi)[i] += ga * iv[i] / a + gp * rv[i] / (a * a);
                               }
                             });
  auto [a, p] = detail::split_joint(j, z.re.shape());
  return {a, p};
}

/// re = amp cos(pha), im = amp sin(pha), differentiable in both.
inline ComplexTensor from_polar(const Tensor& amp, const Tensor& pha) {
  detail::require_shape("recombine", amp, pha);
  const std::size_t n = amp.numel();
  std::vector<double> joint(2 * n);
  auto av = amp.values(), pv = pha.values();
  for (std::size_t i = 0; i < n; ++i) {
    joint[i] = av[i] * std::cos(pv[i]);
    joint[n + i] = av[i] * std::sin(pv[i]);
  }
  Tensor j = detail::make_op(detail::joint_shape(amp.shape()), std::move(joint), {&amp, &pha},
                             [amp, pha, n](std::span<const double> g) {
                               auto av = amp.values(), pv = pha.values();
                               std::vector<double>* ga = amp.requires_grad() ? &detail::grad_of(amp) : nullptr;
                               std::vector<double>* gp = pha.requires_grad() ? &detail::grad_of(pha) : nullptr;
                               for (std::size_t i = 0; i < n; ++i) {
                                 const double c = std::cos(pv[i]), s = std::sin(pv[i]);
                                 const double gr = g[i], gi = g[n + i];
                                 if (ga) (*ga)[i] += gr * c + gi * s;
                                 if (gp) (*gp)[i] += av[i] * (gi * c - gr * s);
                               }
                             });
  auto [r, i] = detail::split_joint(j, amp.shape());
  return {r, i};
}

/// Per-channel FFT of a real feature, split into amplitude and phase.
inline Spectrum fft2(const Tensor& x) { return to_polar(fft2_complex(x)); }

/// Pairs an amplitude and a phase plane into a spectrum. Amplitudes must be
/// non-negative unless `allow_signed` is passed (learned amplitude edits may
/// go negative, which amounts to a phase shift of pi).
inline Spectrum recombine(const Tensor& amp, const Tensor& pha, AmpCheck check = AmpCheck::non_negative) {
  detail::require_shape("recombine", amp, pha);
  if (check == AmpCheck::non_negative) {
    auto av = amp.values();
    auto it = std::find_if(av.begin(), av.end(), [](double a) { return a < 0.0; });
    if (it != av.end()) {
      std::ostringstream os;
      os << "recombine: amplitude must be non-negative, found " << *it << " at flat index " << (it - av.begin());
      throw Error(os.str());
    }
  }
  return {amp, pha};
}

/// Largest |im| relative to largest |re|; 0 when both vanish.
inline double imag_residue(const ComplexTensor& z) {
  double mr = 0.0, mi = 0.0;
  for (double v : z.re.values()) mr = std::max(mr, std::abs(v));
  for (double v : z.im.values()) mi = std::max(mi, std::abs(v));
  if (mi == 0.0) return 0.0;
  return mr == 0.0 ? std::numeric_limits<double>::infinity() : mi / mr;
}

/// Unitary inverse of a complex spectrum, returning the real part. With
/// Residue::check an imaginary residue above 1e-8 of the real magnitude
/// raises; Residue::force_real discards it silently.
inline Tensor ifft2(const ComplexTensor& z, Residue residue = Residue::check) {
  ComplexTensor out = ifft2_complex(z);
  if (residue == Residue::check) {
    const double r = imag_residue(out);
    if (r > kResidueTolerance) {
      std::ostringstream os;
      os << "ifft2: imaginary residue " << r << " of real magnitude exceeds " << kResidueTolerance
         << " (spectrum is not conjugate-symmetric; use force_real)";
      throw Error(os.str());
    }
  }
  return out.re;
}

inline Tensor ifft2(const Spectrum& s, Residue residue = Residue::check) {
  return ifft2(from_polar(s.amp, s.pha), residue);
}

/// First output keeps a's phase with b's amplitude, the second the converse.
inline std::pair<Tensor, Tensor> swap_components(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw Error("swap_components: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const Spectrum sa = fft2(a), sb = fft2(b);
  return {ifft2(recombine(sb.amp, sa.pha), Residue::force_real), ifft2(recombine(sa.amp, sb.pha), Residue::force_real)};
}

/// Reconstruction from a single component: phase zeroed (amplitude only) or
/// amplitude set to one (phase only).
inline Tensor component_only(const Tensor& a, Component which) {
  const Spectrum s = fft2(a);
  if (which == Component::amplitude) {
    return ifft2(recombine(s.amp, Tensor::full(a.shape(), 0.0)), Residue::force_real);
  }
  return ifft2(recombine(Tensor::full(a.shape(), 1.0), s.pha), Residue::force_real);
}

}  // namespace fdnm
