#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fdnm/parallel.hpp"
#include "fdnm/tensor.hpp"

namespace fdnm {

enum class Mode { train, eval };

namespace detail {

// Feature tensors are [C x H x W] (one image) or [N x C x H x W].
struct NcsView {
  std::size_t n, c, s;
};

inline NcsView ncs_view(const char* op, const Tensor& x) {
  if (x.rank() == 3) return {1, x.dim(0), x.dim(1) * x.dim(2)};
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
  throw Error(std::string(op) + ": expected [C x H x W] or [N x C x H x W], got " + shape_str(x.shape()));
}

}  // namespace detail

/// out[o,h,w] = b[o] + sum_i w[o,i] * x[i,h,w], per image.
inline Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& b) {
  const auto v = detail::ncs_view("conv1x1", x);
  if (w.rank() != 2 || w.dim(1) != v.c || b.rank() != 1 || b.dim(0) != w.dim(0)) {
    throw Error("conv1x1: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()) +
                " and bias " + shape_str(b.shape()));
  }
  const std::size_t co = w.dim(0), ci = v.c, s = v.s;
  Shape out_shape = x.shape();
  out_shape[x.rank() - 3] = co;
  std::vector<double> out(v.n * co * s);
  auto xv = x.values(), wv = w.values(), bv = b.values();
  for (std::size_t n = 0; n < v.n; ++n) {
    const double* xn = xv.data() + n * ci * s;
    double* on = out.data() + n * co * s;
    for (std::size_t o = 0; o < co; ++o) {
      double* row = on + o * s;
      std::fill(row, row + s, bv[o]);
      for (std::size_t i = 0; i < ci; ++i) {
        const double k = wv[o * ci + i];
        const double* xr = xn + i * s;
        for (std::size_t p = 0; p < s; ++p) row[p] += k * xr[p];
      }
    }
  }
  return detail::make_op(std::move(out_shape), std::move(out), {&x, &w, &b}, [x, w, b, v, co](std::span<const double> g) {
    const std::size_t ci = v.c, s = v.s;
    auto xv = x.values(), wv = w.values();
    for (std::size_t n = 0; n < v.n; ++n) {
      const double* gn = g.data() + n * co * s;
      const double* xn = xv.data() + n * ci * s;
      if (x.requires_grad()) {
        double* gx = detail::grad_of(x).data() + n * ci * s;
        for (std::size_t o = 0; o < co; ++o) {
          for (std::size_t i = 0; i < ci; ++i) {
            const double k = wv[o * ci + i];
            for (std::size_t p = 0; p < s; ++p) gx[i * s + p] += k * gn[o * s + p];
          }
        }
      }
      if (w.requires_grad()) {
        auto& gw = detail::grad_of(w);
        for (std::size_t o = 0; o < co; ++o) {
          for (std::size_t i = 0; i < ci; ++i) {
            double acc = 0.0;
            for (std::size_t p = 0; p < s; ++p) acc += gn[o * s + p] * xn[i * s + p];
            gw[o * ci + i] += acc;
          }
        }
      }
      if (b.requires_grad()) {
        auto& gb = detail::grad_of(b);
        for (std::size_t o = 0; o < co; ++o) {
          for (std::size_t p = 0; p < s; ++p) gb[o] += gn[o * s + p];
        }
      }
    }
  });
}

/// Square-kernel convolution with zero padding (k-1)/2, no bias.
/// x: [N x Ci x H x W], w: [Co x Ci x k x k].
inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride) {
  if (x.rank() != 4 || w.rank() != 4 || w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0 ||
      stride == 0) {
    throw Error("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  }
  const std::size_t batch = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t co = w.dim(0), k = w.dim(2), pad = (k - 1) / 2;
  const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  const std::size_t rows = ci * k * k, cols = ho * wo;

  // im2col for every image; kept for the weight gradient.
  auto patches = std::make_shared<std::vector<double>>(batch * rows * cols, 0.0);
  std::vector<double> out(batch * co * cols, 0.0);
  auto xv = x.values(), wv = w.values();
  parallel_for(batch, [&](std::size_t n) {
    double* col = patches->data() + n * rows * cols;
    const double* xn = xv.data() + n * ci * h * wd;
    for (std::size_t c = 0; c < ci; ++c) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          double* dst = col + ((c * k + ky) * k + kx) * cols;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (ix < 0 || ix >= static_cast<long>(wd)) continue;
              dst[oy * wo + ox] = xn[(c * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)];
            }
          }
        }
      }
    }
    double* on = out.data() + n * co * cols;
    for (std::size_t o = 0; o < co; ++o) {
      double* orow = on + o * cols;
      for (std::size_t r = 0; r < rows; ++r) {
        const double kv = wv[o * rows + r];
        const double* prow = col + r * cols;
        for (std::size_t p = 0; p < cols; ++p) orow[p] += kv * prow[p];
      }
    }
  });

  Shape out_shape{batch, co, ho, wo};
  return detail::make_op(
      std::move(out_shape), std::move(out), {&x, &w},
      [x, w, patches, batch, ci, h, wd, co, k, pad, ho, wo, stride, rows, cols](std::span<const double> g) {
        auto wv = w.values();
        if (w.requires_grad()) {
          auto& gw = detail::grad_of(w);
          for (std::size_t n = 0; n < batch; ++n) {
            const double* gn = g.data() + n * co * cols;
            const double* col = patches->data() + n * rows * cols;
            for (std::size_t o = 0; o < co; ++o) {
              const double* grow = gn + o * cols;
              for (std::size_t r = 0; r < rows; ++r) {
                const double* prow = col + r * cols;
                double acc = 0.0;
                for (std::size_t p = 0; p < cols; ++p) acc += grow[p] * prow[p];
                gw[o * rows + r] += acc;
              }
            }
          }
        }
        if (x.requires_grad()) {
          auto& gx = detail::grad_of(x);
          parallel_for(batch, [&](std::size_t n) {
            std::vector<double> dcol(rows * cols, 0.0);
            const double* gn = g.data() + n * co * cols;
            for (std::size_t o = 0; o < co; ++o) {
              const double* grow = gn + o * cols;
              for (std::size_t r = 0; r < rows; ++r) {
                const double kv = wv[o * rows + r];
                double* drow = dcol.data() + r * cols;
                for (std::size_t p = 0; p < cols; ++p) drow[p] += kv * grow[p];
              }
            }
            double* gxn = gx.data() + n * ci * h * wd;
            for (std::size_t c = 0; c < ci; ++c) {
              for (std::size_t ky = 0; ky < k; ++ky) {
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const double* src = dcol.data() + ((c * k + ky) * k + kx) * cols;
                  for (std::size_t oy = 0; oy < ho; ++oy) {
                    const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                      const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                      if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                      gxn[(c * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)] +=
                          src[oy * wo + ox];
                    }
                  }
                }
              }
            }
          });
        }
      });
}

/// Global average pooling over (H, W); keeps 1x1 spatial extent.
inline Tensor gap(const Tensor& x) {
  const auto v = detail::ncs_view("gap", x);
  Shape out_shape = x.shape();
  out_shape[x.rank() - 2] = 1;
  out_shape[x.rank() - 1] = 1;
  std::vector<double> out(v.n * v.c, 0.0);
  auto xv = x.values();
  for (std::size_t q = 0; q < v.n * v.c; ++q) {
    double acc = 0.0;
    for (std::size_t p = 0; p < v.s; ++p) acc += xv[q * v.s + p];
    out[q] = acc / static_cast<double>(v.s);
  }
  return detail::make_op(std::move(out_shape), std::move(out), {&x}, [x, v](std::span<const double> g) {
    auto& gx = detail::grad_of(x);
    const double inv = 1.0 / static_cast<double>(v.s);
    for (std::size_t q = 0; q < v.n * v.c; ++q) {
      for (std::size_t p = 0; p < v.s; ++p) gx[q * v.s + p] += g[q] * inv;
    }
  });
}

/// Stacks along the channel axis in the given order.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw Error("concat_channels: no inputs");
  const Tensor& first = parts.front();
  const auto v0 = detail::ncs_view("concat_channels", first);
  std::size_t total_c = 0;
  for (const Tensor& p : parts) {
    const auto v = detail::ncs_view("concat_channels", p);
    if (p.rank() != first.rank() || v.n != v0.n || v.s != v0.s ||
        p.shape()[p.rank() - 1] != first.shape()[first.rank() - 1]) {
      throw Error("concat_channels: " + shape_str(p.shape()) + " does not match " + shape_str(first.shape()));
    }
    total_c += v.c;
  }
  Shape out_shape = first.shape();
  out_shape[first.rank() - 3] = total_c;
  std::vector<double> out(v0.n * total_c * v0.s);
  std::size_t c_off = 0;
  for (const Tensor& p : parts) {
    const auto v = detail::ncs_view("concat_channels", p);
    auto pv = p.values();
    for (std::size_t n = 0; n < v.n; ++n) {
      std::copy_n(pv.data() + n * v.c * v.s, v.c * v.s, out.data() + (n * total_c + c_off) * v.s);
    }
    c_off += v.c;
  }
  return detail::make_op(std::move(out_shape), std::move(out), parts, [parts, total_c](std::span<const double> g) {
    std::size_t c_off = 0;
    for (const Tensor& p : parts) {
      const auto v = detail::ncs_view("concat_channels", p);
      if (p.requires_grad()) {
        auto& gp = detail::grad_of(p);
        for (std::size_t n = 0; n < v.n; ++n) {
          const double* src = g.data() + (n * total_c + c_off) * v.s;
          double* dst = gp.data() + n * v.c * v.s;
          for (std::size_t q = 0; q < v.c * v.s; ++q) dst[q] += src[q];
        }
      }
      c_off += v.c;
    }
  });
}

/// Channels [begin, end).
inline Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end) {
  const auto v = detail::ncs_view("slice_channels", x);
  if (begin >= end || end > v.c) throw Error("slice_channels: bad range for " + shape_str(x.shape()));
  const std::size_t cs = end - begin;
  Shape out_shape = x.shape();
  out_shape[x.rank() - 3] = cs;
  std::vector<double> out(v.n * cs * v.s);
  auto xv = x.values();
  for (std::size_t n = 0; n < v.n; ++n) {
    std::copy_n(xv.data() + (n * v.c + begin) * v.s, cs * v.s, out.data() + n * cs * v.s);
  }
  return detail::make_op(std::move(out_shape), std::move(out), {&x}, [x, v, begin, cs](std::span<const double> g) {
    auto& gx = detail::grad_of(x);
    for (std::size_t n = 0; n < v.n; ++n) {
      for (std::size_t q = 0; q < cs * v.s; ++q) gx[(n * v.c + begin) * v.s + q] += g[n * cs * v.s + q];
    }
  });
}

/// Rows [begin, end) of the H axis of [N x C x H x W].
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() != 4 || begin >= end || end > x.dim(2)) {
    throw Error("slice_rows: bad range [" + std::to_string(begin) + "," + std::to_string(end) + ") for " +
                shape_str(x.shape()));
  }
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), hs = end - begin;
  std::vector<double> out(nc * hs * w);
  auto xv = x.values();
  for (std::size_t q = 0; q < nc; ++q) std::copy_n(xv.data() + (q * h + begin) * w, hs * w, out.data() + q * hs * w);
  return detail::make_op({x.dim(0), x.dim(1), hs, w}, std::move(out), {&x},
                         [x, nc, h, w, hs, begin](std::span<const double> g) {
                           auto& gx = detail::grad_of(x);
                           for (std::size_t q = 0; q < nc; ++q) {
                             for (std::size_t p = 0; p < hs * w; ++p) gx[(q * h + begin) * w + p] += g[q * hs * w + p];
                           }
                         });
}

/// Picks items of the leading axis (repeats allowed).
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  if (index.empty()) throw Error("gather_rows: empty index");
  const std::size_t n = x.dim(0), row = x.numel() / n;
  for (std::size_t i : index) {
    if (i >= n) throw Error("gather_rows: index " + std::to_string(i) + " out of range for " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[0] = index.size();
  std::vector<double> out(index.size() * row);
  auto xv = x.values();
  for (std::size_t r = 0; r < index.size(); ++r) std::copy_n(xv.data() + index[r] * row, row, out.data() + r * row);
  std::vector<std::size_t> idx(index.begin(), index.end());
  return detail::make_op(std::move(out_shape), std::move(out), {&x}, [x, idx, row](std::span<const double> g) {
    auto& gx = detail::grad_of(x);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t p = 0; p < row; ++p) gx[idx[r] * row + p] += g[r * row + p];
    }
  });
}

/// Stacks along the leading axis.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw Error("concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t n = 0;
  for (const Tensor& p : parts) {
    if (Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      throw Error("concat_rows: " + shape_str(p.shape()) + " does not match " + shape_str(parts[0].shape()));
    }
    n += p.dim(0);
  }
  Shape out_shape = parts[0].shape();
  out_shape[0] = n;
  std::vector<double> out;
  out.reserve(shape_numel(out_shape));
  for (const Tensor& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return detail::make_op(std::move(out_shape), std::move(out), parts, [parts](std::span<const double> g) {
    std::size_t off = 0;
    for (const Tensor& p : parts) {
      if (p.requires_grad()) {
        auto& gp = detail::grad_of(p);
        for (std::size_t q = 0; q < p.numel(); ++q) gp[q] += g[off + q];
      }
      off += p.numel();
    }
  });
}

/// y[n,c,h,w] = x[n,c,h,w] * s[n,c]; s is [N x C] or [N x C x 1 x 1] (or [C x 1 x 1] for one image).
inline Tensor channel_scale(const Tensor& x, const Tensor& s) {
  const auto v = detail::ncs_view("channel_scale", x);
  if (s.numel() != v.n * v.c) {
    throw Error("channel_scale: gate " + shape_str(s.shape()) + " does not match " + shape_str(x.shape()));
  }
  std::vector<double> out(x.numel());
  auto xv = x.values(), sv = s.values();
  for (std::size_t q = 0; q < v.n * v.c; ++q) {
    for (std::size_t p = 0; p < v.s; ++p) out[q * v.s + p] = xv[q * v.s + p] * sv[q];
  }
  return detail::make_op(x.shape(), std::move(out), {&x, &s}, [x, s, v](std::span<const double> g) {
    auto xv = x.values(), sv = s.values();
    if (x.requires_grad()) {
      auto& gx = detail::grad_of(x);
      for (std::size_t q = 0; q < v.n * v.c; ++q) {
        for (std::size_t p = 0; p < v.s; ++p) gx[q * v.s + p] += g[q * v.s + p] * sv[q];
      }
    }
    if (s.requires_grad()) {
      auto& gs = detail::grad_of(s);
      for (std::size_t q = 0; q < v.n * v.c; ++q) {
        double acc = 0.0;
        for (std::size_t p = 0; p < v.s; ++p) acc += g[q * v.s + p] * xv[q * v.s + p];
        gs[q] += acc;
      }
    }
  });
}

/// x: [N x D], w: [O x D], b: [O] -> [N x O].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || w.dim(1) != x.dim(1) || b.rank() != 1 || b.dim(0) != w.dim(0)) {
    throw Error("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()) +
                " and bias " + shape_str(b.shape()));
  }
  const std::size_t n = x.dim(0), d = x.dim(1), o = w.dim(0);
  std::vector<double> out(n * o);
  auto xv = x.values(), wv = w.values(), bv = b.values();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < o; ++j) {
      double acc = bv[j];
      for (std::size_t i = 0; i < d; ++i) acc += xv[r * d + i] * wv[j * d + i];
      out[r * o + j] = acc;
    }
  }
  return detail::make_op({n, o}, std::move(out), {&x, &w, &b}, [x, w, b, n, d, o](std::span<const double> g) {
    auto xv = x.values(), wv = w.values();
    if (x.requires_grad()) {
      auto& gx = detail::grad_of(x);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < o; ++j) {
          const double gj = g[r * o + j];
          for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += gj * wv[j * d + i];
        }
      }
    }
    if (w.requires_grad()) {
      auto& gw = detail::grad_of(w);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < o; ++j) {
          const double gj = g[r * o + j];
          for (std::size_t i = 0; i < d; ++i) gw[j * d + i] += gj * xv[r * d + i];
        }
      }
    }
    if (b.requires_grad()) {
      auto& gb = detail::grad_of(b);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < o; ++j) gb[j] += g[r * o + j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

inline constexpr double kNormEps = 1e-5;

/// Running statistics of one batch-norm layer.
struct BnState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = kNormEps;

  explicit BnState(std::size_t channels = 1)
      : running_mean(Tensor::full({channels}, 0.0)), running_var(Tensor::full({channels}, 1.0)) {}
};

/// Per-channel standardization over batch and spatial positions.
/// x is [N x C] or [N x C x H x W]; gamma/beta are [C].
inline Tensor batch_norm(const Tensor& x, BnState& state, const Tensor& gamma, const Tensor& beta, Mode mode) {
  if (x.rank() != 2 && x.rank() != 4) throw Error("batch_norm: expected rank 2 or 4, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), s = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (gamma.numel() != c || beta.numel() != c || state.running_mean.numel() != c) {
    throw Error("batch_norm: affine/state size does not match " + std::to_string(c) + " channels");
  }
  if (mode == Mode::train && n < 2) throw Error("batch_norm: train mode needs N >= 2, got N = " + std::to_string(n));

  const double count = static_cast<double>(n * s);
  auto xv = x.values(), gv = gamma.values(), bv = beta.values();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(c);
  std::vector<double> out(x.numel());
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (mode == Mode::train) {
      double acc = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t p = 0; p < s; ++p) acc += xv[(b * c + ch) * s + p];
      }
      mu = acc / count;
      double sq = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t p = 0; p < s; ++p) {
          const double d = xv[(b * c + ch) * s + p] - mu;
          sq += d * d;
        }
      }
      var = sq / count;
      auto rm = state.running_mean.values_mut();
      auto rv = state.running_var.values_mut();
      rm[ch] = (1.0 - state.momentum) * rm[ch] + state.momentum * mu;
      rv[ch] = (1.0 - state.momentum) * rv[ch] + state.momentum * var * count / (count - 1.0);
    } else {
      mu = state.running_mean[ch];
      var = state.running_var[ch];
    }
    const double is = 1.0 / std::sqrt(var + state.eps);
    (*inv_std)[ch] = is;
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t p = 0; p < s; ++p) {
        const std::size_t q = (b * c + ch) * s + p;
        (*xhat)[q] = (xv[q] - mu) * is;
        out[q] = gv[ch] * (*xhat)[q] + bv[ch];
      }
    }
  }
  return detail::make_op(x.shape(), std::move(out), {&x, &gamma, &beta},
                         [x, gamma, beta, xhat, inv_std, n, c, s, mode](std::span<const double> g) {
                           const double count = static_cast<double>(n * s);
                           auto gv = gamma.values();
                           for (std::size_t ch = 0; ch < c; ++ch) {
                             double sg = 0.0, sgx = 0.0;
                             for (std::size_t b = 0; b < n; ++b) {
                               for (std::size_t p = 0; p < s; ++p) {
                                 const std::size_t q = (b * c + ch) * s + p;
                                 sg += g[q];
                                 sgx += g[q] * (*xhat)[q];
                               }
                             }
                             if (gamma.requires_grad()) detail::grad_of(gamma)[ch] += sgx;
                             if (beta.requires_grad()) detail::grad_of(beta)[ch] += sg;
                             if (!x.requires_grad()) continue;
                             auto& gx = detail::grad_of(x);
                             const double k = gv[ch] * (*inv_std)[ch];
                             for (std::size_t b = 0; b < n; ++b) {
                               for (std::size_t p = 0; p < s; ++p) {
                                 const std::size_t q = (b * c + ch) * s + p;
                                 if (mode == Mode::train) {
                                   gx[q] += k * (g[q] - sg / count - (*xhat)[q] * sgx / count);
                                 } else {
                                   gx[q] += k * g[q];
                                 }
                               }
                             }
                           }
                         });
}

/// Standardizes each (n, c) plane over (h, w); gamma/beta optional ([C] each).
inline Tensor instance_norm(const Tensor& x, const Tensor* gamma = nullptr, const Tensor* beta = nullptr) {
  if (x.rank() != 4) throw Error("instance_norm: expected [N x C x H x W], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), s = x.dim(2) * x.dim(3);
  if (s < 2) throw Error("instance_norm: needs H*W >= 2, got " + shape_str(x.shape()));
  if ((gamma == nullptr) != (beta == nullptr)) throw Error("instance_norm: gamma and beta go together");
  if (gamma && (gamma->numel() != c || beta->numel() != c)) throw Error("instance_norm: affine size mismatch");

  auto xv = x.values();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(n * c);
  std::vector<double> out(x.numel());
  for (std::size_t q = 0; q < n * c; ++q) {
    const double* plane = xv.data() + q * s;
    double mu = 0.0;
    for (std::size_t p = 0; p < s; ++p) mu += plane[p];
    mu /= static_cast<double>(s);
    double var = 0.0;
    for (std::size_t p = 0; p < s; ++p) var += (plane[p] - mu) * (plane[p] - mu);
    var /= static_cast<double>(s);
    const double is = 1.0 / std::sqrt(var + kNormEps);
    (*inv_std)[q] = is;
    const double gm = gamma ? (*gamma)[q % c] : 1.0;
    const double bt = beta ? (*beta)[q % c] : 0.0;
    for (std::size_t p = 0; p < s; ++p) {
      (*xhat)[q * s + p] = (plane[p] - mu) * is;
      out[q * s + p] = gm * (*xhat)[q * s + p] + bt;
    }
  }
  Tensor gm = gamma ? *gamma : Tensor();
  Tensor bt = beta ? *beta : Tensor();
  auto backward = [x, gm, bt, xhat, inv_std, n, c, s](std::span<const double> g) {
    const double count = static_cast<double>(s);
    for (std::size_t q = 0; q < n * c; ++q) {
      double sg = 0.0, sgx = 0.0;
      for (std::size_t p = 0; p < s; ++p) {
        sg += g[q * s + p];
        sgx += g[q * s + p] * (*xhat)[q * s + p];
      }
      const std::size_t ch = q % c;
      if (gm.defined() && gm.requires_grad()) detail::grad_of(gm)[ch] += sgx;
      if (bt.defined() && bt.requires_grad()) detail::grad_of(bt)[ch] += sg;
      if (!x.requires_grad()) continue;
      auto& gx = detail::grad_of(x);
      const double k = (gm.defined() ? gm[ch] : 1.0) * (*inv_std)[q];
      for (std::size_t p = 0; p < s; ++p) {
        gx[q * s + p] += k * (g[q * s + p] - sg / count - (*xhat)[q * s + p] * sgx / count);
      }
    }
  };
  if (gamma) return detail::make_op(x.shape(), std::move(out), {&x, gamma, beta}, std::move(backward));
  return detail::make_op(x.shape(), std::move(out), {&x}, std::move(backward));
}

}  // namespace fdnm
