#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <map>
#include <memory>
#include <numbers>
#include <vector>

namespace fdnm::fft {

using cplx = std::complex<double>;

/// Unnormalized 1-D complex DFT of one fixed length. Powers of two run an
/// iterative radix-2 transform; other lengths go through Bluestein's chirp-z
/// identity on a padded power-of-two transform.
class Plan {
 public:
  explicit Plan(std::size_t n) : n_(n) {
    if (n_ <= 1) return;
    if (is_pow2(n_)) {
      init_radix2(n_, twiddle_, bitrev_);
      return;
    }
    m_ = 1;
    while (m_ < 2 * n_ - 1) m_ <<= 1;
    init_radix2(m_, twiddle_, bitrev_);
    chirp_.resize(n_);
    const std::size_t two_n = 2 * n_;
    for (std::size_t k = 0; k < n_; ++k) {
      // Angle from k^2 mod 2n.
      const std::size_t kk = (k * k) % two_n;
      const double ang = -std::numbers::pi * static_cast<double>(kk) / static_cast<double>(n_);
      chirp_[k] = cplx(std::cos(ang), std::sin(ang));
    }
    filter_.assign(m_, cplx(0.0, 0.0));
    filter_[0] = std::conj(chirp_[0]);
    for (std::size_t k = 1; k < n_; ++k) {
      filter_[k] = std::conj(chirp_[k]);
      filter_[m_ - k] = std::conj(chirp_[k]);
    }
    radix2(filter_.data(), m_, false);
  }

  std::size_t size() const { return n_; }

  /// In place. `inverse` flips the exponent sign; no scaling either way.
  void run(cplx* data, bool inverse) const {
    if (n_ <= 1) return;
    if (m_ == 0) {
      radix2(data, n_, inverse);
      return;
    }
    if (inverse) {
      for (std::size_t k = 0; k < n_; ++k) data[k] = std::conj(data[k]);
    }
    std::vector<cplx> work(m_, cplx(0.0, 0.0));
    for (std::size_t k = 0; k < n_; ++k) work[k] = data[k] * chirp_[k];
    radix2(work.data(), m_, false);
    for (std::size_t k = 0; k < m_; ++k) work[k] *= filter_[k];
    radix2(work.data(), m_, true);
    const double inv_m = 1.0 / static_cast<double>(m_);
    for (std::size_t k = 0; k < n_; ++k) data[k] = work[k] * inv_m * chirp_[k];
    if (inverse) {
      for (std::size_t k = 0; k < n_; ++k) data[k] = std::conj(data[k]);
    }
  }

 private:
  static bool is_pow2(std::size_t n) { return (n & (n - 1)) == 0; }

  static void init_radix2(std::size_t n, std::vector<cplx>& tw, std::vector<std::size_t>& rev) {
    tw.resize(n / 2);
    for (std::size_t k = 0; k < n / 2; ++k) {
      const double ang = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
      tw[k] = cplx(std::cos(ang), std::sin(ang));
    }
    rev.assign(n, 0);
    std::size_t bits = 0;
    while ((std::size_t{1} << bits) < n) ++bits;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t r = 0;
      for (std::size_t b = 0; b < bits; ++b) r |= ((i >> b) & 1U) << (bits - 1 - b);
      rev[i] = r;
    }
  }

  void radix2(cplx* a, std::size_t n, bool inverse) const {
    for (std::size_t i = 0; i < n; ++i) {
      if (i < bitrev_[i]) std::swap(a[i], a[bitrev_[i]]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
      const std::size_t half = len / 2, step = n / len;
      for (std::size_t start = 0; start < n; start += len) {
        for (std::size_t j = 0; j < half; ++j) {
          cplx w = twiddle_[j * step];
          if (inverse) w = std::conj(w);
          const cplx u = a[start + j];
          const cplx v = a[start + j + half] * w;
          a[start + j] = u + v;
          a[start + j + half] = u - v;
        }
      }
    }
  }

  std::size_t n_;
  std::size_t m_ = 0;  // padded length for Bluestein, 0 for radix-2
  std::vector<cplx> twiddle_;
  std::vector<std::size_t> bitrev_;
  std::vector<cplx> chirp_;
  std::vector<cplx> filter_;
};

inline const Plan& plan_for(std::size_t n) {
  thread_local std::map<std::size_t, std::unique_ptr<Plan>> cache;
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<Plan>(n);
  return *slot;
}

/// Unitary 2-D transform of one row-major H x W plane, in place:
/// both directions carry 1/sqrt(HW).
inline void transform2d(cplx* plane, std::size_t h, std::size_t w, bool inverse) {
  const Plan& row_plan = plan_for(w);
  for (std::size_t r = 0; r < h; ++r) row_plan.run(plane + r * w, inverse);
  if (h > 1) {
    const Plan& col_plan = plan_for(h);
    std::vector<cplx> col(h);
    for (std::size_t c = 0; c < w; ++c) {
      for (std::size_t r = 0; r < h; ++r) col[r] = plane[r * w + c];
      col_plan.run(col.data(), inverse);
      for (std::size_t r = 0; r < h; ++r) plane[r * w + c] = col[r];
    }
  }
  const double norm = 1.0 / std::sqrt(static_cast<double>(h * w));
  for (std::size_t i = 0; i < h * w; ++i) plane[i] *= norm;
}

}  // namespace fdnm::fft
