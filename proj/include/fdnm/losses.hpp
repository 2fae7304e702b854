#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fdnm/modules.hpp"
#include "fdnm/tensor.hpp"

namespace fdnm {

/// Weights of the combined objective: id + lambda1 * tri + lambda2 * cnm.
struct LossWeights {
  double lambda1 = 1.0;
  double lambda2 = 0.5;
  double margin_cnm = 0.2;
  double margin_tri = 0.3;

  bool operator==(const LossWeights&) const = default;

  void validate() const {
    if (lambda1 < 0 || lambda2 < 0 || margin_cnm < 0 || margin_tri < 0) {
      throw Error("loss weights: all weights and margins must be >= 0");
    }
  }
};

/// Mean over rows of -log softmax(logits)[label].
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw Error("cross_entropy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) {
      throw Error("cross_entropy: label " + std::to_string(labels[i]) + " out of range for " + std::to_string(c) +
                  " classes");
    }
  }
  auto lv = logits.values();
  auto probs = std::make_shared<std::vector<double>>(n * c);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = lv.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[labels[i]];
    for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] = std::exp(row[j] - lse);
  }
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return detail::make_op({1}, {total / static_cast<double>(n)}, {&logits}, [logits, probs, lab, n, c](std::span<const double> g) {
    auto& gl = detail::grad_of(logits);
    const double k = g[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) gl[i * c + j] += k * ((*probs)[i * c + j] - (j == lab[i] ? 1.0 : 0.0));
    }
  });
}

namespace detail {

inline double row_distance(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

/// Adds coef * d/da ||a - b|| to ga and its negative to gb.
inline void add_distance_grad(const double* a, const double* b, double dist, double coef, double* ga, double* gb,
                              std::size_t d) {
  if (dist < 1e-12) return;
  const double k = coef / dist;
  for (std::size_t i = 0; i < d; ++i) {
    const double v = k * (a[i] - b[i]);
    if (ga) ga[i] += v;
    if (gb) gb[i] -= v;
  }
}

}  // namespace detail

/// Batch-hard triplet loss: mean over anchors of
/// [max positive distance - min negative distance + margin]_+, Euclidean.
inline Tensor triplet_batch_hard(const Tensor& emb, std::span<const std::size_t> labels, double margin) {
  if (emb.rank() != 2 || emb.dim(0) != labels.size()) {
    throw Error("triplet: embeddings " + shape_str(emb.shape()) + " vs " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = emb.dim(0), d = emb.dim(1);
  std::map<std::size_t, std::size_t> counts;
  for (std::size_t l : labels) ++counts[l];
  for (const auto& [l, cnt] : counts) {
    if (cnt < 2) throw Error("triplet: label " + std::to_string(l) + " has a single sample (needs a positive)");
  }
  if (counts.size() < 2) throw Error("triplet: label " + std::to_string(labels[0]) + " has no negatives in the batch");

  auto ev = emb.values();
  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      dist[i * n + j] = dist[j * n + i] = detail::row_distance(ev.data() + i * d, ev.data() + j * d, d);
    }
  }
  struct Pick {
    std::size_t pos, neg;
    double dpos, dneg;
    bool active;
  };
  auto picks = std::make_shared<std::vector<Pick>>(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    Pick p{0, 0, -1.0, std::numeric_limits<double>::infinity(), false};
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dij = dist[i * n + j];
      if (labels[j] == labels[i]) {
        if (dij > p.dpos) p.dpos = dij, p.pos = j;
      } else if (dij < p.dneg) {
        p.dneg = dij, p.neg = j;
      }
    }
    const double t = p.dpos - p.dneg + margin;
    p.active = t > 0.0;
    if (p.active) total += t;
    (*picks)[i] = p;
  }
  return detail::make_op({1}, {total / static_cast<double>(n)}, {&emb}, [emb, picks, n, d](std::span<const double> g) {
    auto ev = emb.values();
    auto& ge = detail::grad_of(emb);
    const double k = g[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& p = (*picks)[i];
      if (!p.active) continue;
      const double* a = ev.data() + i * d;
      detail::add_distance_grad(a, ev.data() + p.pos * d, p.dpos, k, ge.data() + i * d, ge.data() + p.pos * d, d);
      detail::add_distance_grad(a, ev.data() + p.neg * d, p.dneg, -k, ge.data() + i * d, ge.data() + p.neg * d, d);
    }
  });
}

// ---------------------------------------------------------------------------
// Class centers and the center-guided nuances mining loss

enum class Branch { v1, v2, i1, i2 };

inline const char* branch_name(Branch b) {
  switch (b) {
    case Branch::v1: return "v1";
    case Branch::v2: return "v2";
    case Branch::i1: return "i1";
    case Branch::i2: return "i2";
  }
  return "?";
}

/// Per-class means of one branch's embeddings in one modality.
struct CenterSet {
  Branch branch = Branch::v1;
  std::vector<std::size_t> class_ids;  // row order of `centers`
  Tensor centers;                      // [P x D]
};

/// Identities in order of first appearance.
inline std::vector<std::size_t> batch_classes(std::span<const std::size_t> labels) {
  std::vector<std::size_t> ids;
  for (std::size_t l : labels) {
    if (std::find(ids.begin(), ids.end(), l) == ids.end()) ids.push_back(l);
  }
  return ids;
}

/// Row-group means: out[g] = mean of x rows listed in groups[g].
inline Tensor group_mean(const Tensor& x, const std::vector<std::vector<std::size_t>>& groups) {
  if (x.rank() != 2) throw Error("group_mean: expected [N x D], got " + shape_str(x.shape()));
  const std::size_t d = x.dim(1);
  std::vector<double> out(groups.size() * d, 0.0);
  auto xv = x.values();
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) throw Error("group_mean: empty group " + std::to_string(g));
    for (std::size_t r : groups[g]) {
      if (r >= x.dim(0)) throw Error("group_mean: row index out of range");
      for (std::size_t i = 0; i < d; ++i) out[g * d + i] += xv[r * d + i];
    }
    for (std::size_t i = 0; i < d; ++i) out[g * d + i] /= static_cast<double>(groups[g].size());
  }
  return detail::make_op({groups.size(), d}, std::move(out), {&x}, [x, groups, d](std::span<const double> gr) {
    auto& gx = detail::grad_of(x);
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const double k = 1.0 / static_cast<double>(groups[g].size());
      for (std::size_t r : groups[g]) {
        for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += k * gr[g * d + i];
      }
    }
  });
}

/// Centers of rows with the given modality, one per entry of `class_ids`.
inline CenterSet compute_centers(const Tensor& emb, std::span<const std::size_t> labels,
                                 std::span<const Modality> modality, Modality which, Branch branch,
                                 std::span<const std::size_t> class_ids) {
  if (emb.rank() != 2 || emb.dim(0) != labels.size() || labels.size() != modality.size()) {
    throw Error("compute_centers: embeddings/labels/modality sizes disagree");
  }
  std::vector<std::vector<std::size_t>> groups(class_ids.size());
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (modality[r] != which) continue;
    auto it = std::find(class_ids.begin(), class_ids.end(), labels[r]);
    if (it != class_ids.end()) groups[static_cast<std::size_t>(it - class_ids.begin())].push_back(r);
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) {
      throw Error(std::string("compute_centers: class ") + std::to_string(class_ids[g]) + " has no " +
                  modality_name(which) + " sample for branch " + branch_name(branch));
    }
  }
  return {branch, std::vector<std::size_t>(class_ids.begin(), class_ids.end()), group_mean(emb, groups)};
}

/// Which (j, k) pairs the hinge sum visits.
enum class PairMode { ordered, unordered };

namespace detail {

inline void check_center_sets(const CenterSet& a, const CenterSet& b, const char* role) {
  if (a.class_ids != b.class_ids) {
    throw Error(std::string("cnm: ") + role + " center set " + branch_name(b.branch) + " covers different classes than " +
                branch_name(a.branch));
  }
  if (a.centers.shape() != b.centers.shape()) {
    throw Error(std::string("cnm: ") + role + " centers " + shape_str(b.centers.shape()) + " vs " +
                shape_str(a.centers.shape()));
  }
}

}  // namespace detail

/// Pre-hinge values 2 D(a_j, x_j) - D(a_j, o_j) - D(a_j, a_k) + m, in pair order.
inline std::vector<double> cnm_terms(const CenterSet& anchor, const CenterSet& cross, const CenterSet& other, double m,
                                     PairMode mode = PairMode::ordered) {
  detail::check_center_sets(anchor, cross, "cross-modality");
  detail::check_center_sets(anchor, other, "other-branch");
  const std::size_t p = anchor.centers.dim(0), d = anchor.centers.dim(1);
  auto a = anchor.centers.values(), x = cross.centers.values(), o = other.centers.values();
  std::vector<double> terms;
  for (std::size_t j = 0; j < p; ++j) {
    const double dx = detail::row_distance(a.data() + j * d, x.data() + j * d, d);
    const double dother = detail::row_distance(a.data() + j * d, o.data() + j * d, d);
    for (std::size_t k = 0; k < p; ++k) {
      if (k == j || (mode == PairMode::unordered && k < j)) continue;
      terms.push_back(2.0 * dx - dother - detail::row_distance(a.data() + j * d, a.data() + k * d, d) + m);
    }
  }
  return terms;
}

/// Hinge sum over class pairs j != k for one anchor branch: the anchor's
/// center is pulled towards the other modality's same-branch center and pushed
/// from the same modality's other-branch center and from other classes.
inline Tensor cnm_branch(const CenterSet& anchor, const CenterSet& cross, const CenterSet& other, double m,
                         PairMode mode = PairMode::ordered) {
  const std::vector<double> terms = cnm_terms(anchor, cross, other, m, mode);
  double total = 0.0;
  for (double t : terms) total += std::max(t, 0.0);
  Tensor a = anchor.centers, x = cross.centers, o = other.centers;
  return detail::make_op({1}, {total}, {&a, &x, &o}, [a, x, o, m, mode](std::span<const double> g) {
    const std::size_t p = a.dim(0), d = a.dim(1);
    auto av = a.values(), xv = x.values(), ov = o.values();
    std::vector<double> ga(p * d, 0.0), gx(p * d, 0.0), go(p * d, 0.0);
    for (std::size_t j = 0; j < p; ++j) {
      const double* aj = av.data() + j * d;
      const double dx = detail::row_distance(aj, xv.data() + j * d, d);
      const double dother = detail::row_distance(aj, ov.data() + j * d, d);
      for (std::size_t k = 0; k < p; ++k) {
        if (k == j || (mode == PairMode::unordered && k < j)) continue;
        const double dk = detail::row_distance(aj, av.data() + k * d, d);
        if (2.0 * dx - dother - dk + m <= 0.0) continue;
        detail::add_distance_grad(aj, xv.data() + j * d, dx, 2.0 * g[0], ga.data() + j * d, gx.data() + j * d, d);
        detail::add_distance_grad(aj, ov.data() + j * d, dother, -g[0], ga.data() + j * d, go.data() + j * d, d);
        detail::add_distance_grad(aj, av.data() + k * d, dk, -g[0], ga.data() + j * d, ga.data() + k * d, d);
      }
    }
    const std::pair<const Tensor*, const std::vector<double>*> outs[] = {{&a, &ga}, {&x, &gx}, {&o, &go}};
    for (const auto& [t, src] : outs) {
      if (!t->requires_grad()) continue;
      auto& dst = detail::grad_of(*t);
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += (*src)[i];
    }
  });
}

/// Mean of the four branch losses with partners v1->(i1,v2), v2->(i2,v1),
/// i1->(v1,i2), i2->(v2,i1).
inline Tensor cnm_total(const CenterSet& v1, const CenterSet& v2, const CenterSet& i1, const CenterSet& i2, double m,
                        PairMode mode = PairMode::ordered) {
  return scale(add_n({cnm_branch(v1, i1, v2, m, mode), cnm_branch(v2, i2, v1, m, mode), cnm_branch(i1, v1, i2, m, mode),
                      cnm_branch(i2, v2, i1, m, mode)}),
               0.25);
}

/// id + lambda1 * tri + lambda2 * cnm.
inline Tensor total_loss(const Tensor& id, const Tensor& tri, const Tensor& cnm, const LossWeights& w) {
  return add_n({id, scale(tri, w.lambda1), scale(cnm, w.lambda2)});
}

}  // namespace fdnm
