#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fdnm/data.hpp"
#include "fdnm/modules.hpp"
#include "fdnm/parallel.hpp"
#include "fdnm/tensor.hpp"

namespace fdnm {

enum class Metric { euclidean, cosine };

/// Row-major [rows x cols] matrix of doubles.
struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
};

inline double cosine_distance(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i], na += a[i] * a[i], nb += b[i] * b[i];
  if (na == 0.0 || nb == 0.0) return 1.0;
  return std::clamp(1.0 - dot / (std::sqrt(na) * std::sqrt(nb)), 0.0, 2.0);
}

inline double euclidean_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

/// Pairwise distances between rows of q [Q x D] and g [G x D].
inline Matrix distance_matrix(const Tensor& q, const Tensor& g, Metric metric) {
  if (q.rank() != 2 || g.rank() != 2 || q.dim(1) != g.dim(1)) {
    throw Error("distance_matrix: dimension mismatch " + shape_str(q.shape()) + " vs " + shape_str(g.shape()));
  }
  const std::size_t d = q.dim(1);
  Matrix m{q.dim(0), g.dim(0), std::vector<double>(q.dim(0) * g.dim(0))};
  parallel_for(m.rows, [&](std::size_t r) {
    auto a = q.values().subspan(r * d, d);
    for (std::size_t c = 0; c < m.cols; ++c) {
      auto b = g.values().subspan(c * d, d);
      m(r, c) = metric == Metric::cosine ? cosine_distance(a, b) : euclidean_distance(a, b);
    }
  });
  return m;
}

struct RetrievalTable {
  std::vector<std::size_t> query_ids, gallery_ids;
  std::vector<int> query_cams, gallery_cams;
  Matrix dist;  // [Q x G]
  bool camera_filter = false;  // drop same-id same-camera gallery entries
};

struct CmcResult {
  std::vector<double> cmc;  // cmc[k-1] = fraction matched within top k
  double map = 0.0;
  std::size_t evaluated = 0;
  std::size_t skipped = 0;  // queries without any valid match

  double rank(std::size_t k) const {
    if (cmc.empty()) return 0.0;
    return cmc[std::min(k, cmc.size()) - 1];
  }
};

/// Gallery order for one query: ascending distance, ties to the lower index.
inline std::vector<std::size_t> rank_gallery(const Matrix& dist, std::size_t q) {
  std::vector<std::size_t> order(dist.cols);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist(q, a) < dist(q, b); });
  return order;
}

inline CmcResult cmc_map(const RetrievalTable& t) {
  const std::size_t nq = t.dist.rows, ng = t.dist.cols;
  if (ng == 0) throw Error("cmc_map: empty gallery");
  if (t.query_ids.size() != nq || t.gallery_ids.size() != ng) throw Error("cmc_map: id lists do not match the matrix");
  if (t.camera_filter && (t.query_cams.size() != nq || t.gallery_cams.size() != ng)) {
    throw Error("cmc_map: camera filtering needs camera lists");
  }
  std::vector<std::size_t> hits(ng, 0);
  double ap_sum = 0.0;
  CmcResult res;
  for (std::size_t q = 0; q < nq; ++q) {
    std::size_t seen = 0, correct = 0, first = 0;
    double ap = 0.0;
    for (std::size_t g : rank_gallery(t.dist, q)) {
      const bool same = t.gallery_ids[g] == t.query_ids[q];
      if (t.camera_filter && same && t.gallery_cams[g] == t.query_cams[q]) continue;
      ++seen;
      if (same) {
        ++correct;
        if (correct == 1) first = seen;
        ap += static_cast<double>(correct) / static_cast<double>(seen);
      }
    }
    if (correct == 0) {
      ++res.skipped;
      continue;
    }
    ++res.evaluated;
    ++hits[first - 1];
    ap_sum += ap / static_cast<double>(correct);
  }
  res.cmc.assign(ng, 0.0);
  if (res.evaluated == 0) return res;
  std::size_t acc = 0;
  for (std::size_t k = 0; k < ng; ++k) {
    acc += hits[k];
    res.cmc[k] = static_cast<double>(acc) / static_cast<double>(res.evaluated);
  }
  res.map = ap_sum / static_cast<double>(res.evaluated);
  return res;
}

inline constexpr std::size_t kHistBins = 64;

struct DistanceStats {
  std::vector<double> intra, inter;  // cross-modality cosine distances
  double intra_mean = 0.0, inter_mean = 0.0;
  std::vector<std::size_t> intra_hist, inter_hist;  // kHistBins bins over [0, 2]

  double gap() const { return inter_mean - intra_mean; }
};

inline std::size_t hist_bin(double d) {
  const auto b = static_cast<std::size_t>(std::floor(std::clamp(d, 0.0, 2.0) / 2.0 * kHistBins));
  return std::min(b, kHistBins - 1);
}

/// All VIS x IR pairs split into same-identity and different-identity sets.
inline DistanceStats distance_stats(const Tensor& emb, std::span<const std::size_t> ids,
                                    std::span<const Modality> modality) {
  if (emb.rank() != 2 || emb.dim(0) != ids.size() || ids.size() != modality.size()) {
    throw Error("distance_stats: embeddings/ids/modality sizes disagree");
  }
  std::vector<std::size_t> vis, ir;
  for (std::size_t i = 0; i < ids.size(); ++i) (modality[i] == Modality::visible ? vis : ir).push_back(i);
  if (vis.empty() || ir.empty()) throw Error("distance_stats: both modalities are required");
  const std::size_t d = emb.dim(1);
  DistanceStats s;
  s.intra_hist.assign(kHistBins, 0);
  s.inter_hist.assign(kHistBins, 0);
  for (std::size_t v : vis) {
    for (std::size_t r : ir) {
      const double dist = cosine_distance(emb.values().subspan(v * d, d), emb.values().subspan(r * d, d));
      if (ids[v] == ids[r]) {
        s.intra.push_back(dist);
        ++s.intra_hist[hist_bin(dist)];
      } else {
        s.inter.push_back(dist);
        ++s.inter_hist[hist_bin(dist)];
      }
    }
  }
  auto mean = [](const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  s.intra_mean = mean(s.intra);
  s.inter_mean = mean(s.inter);
  return s;
}

// ---------------------------------------------------------------------------
// Model evaluation on a sample set: IR queries against a VIS gallery.

struct Embedded {
  Tensor emb;
  std::vector<std::size_t> ids;
  std::vector<Modality> modality;
  std::vector<int> cams;
};

/// Inference-mode retrieval embeddings for every sample, in chunks.
inline Embedded embed_samples(FdnmModel& model, const std::vector<Sample>& samples, std::size_t chunk = 64) {
  if (samples.empty()) throw Error("embed_samples: no samples");
  NoGradGuard guard;
  Embedded out;
  std::vector<double> rows;
  std::size_t width = 0;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(start + chunk, samples.size()); ++i) idx.push_back(i);
    const Batch b = assemble_batch(samples, idx, {false, false}, 0, 0, 0);
    const Tensor e = retrieval_embedding(model.forward(b.images, b.modality, Mode::eval).head);
    width = e.dim(1);
    rows.insert(rows.end(), e.values().begin(), e.values().end());
  }
  for (const Sample& s : samples) {
    out.ids.push_back(s.identity);
    out.modality.push_back(s.modality);
    out.cams.push_back(s.camera);
  }
  out.emb = Tensor({samples.size(), width}, std::move(rows));
  return out;
}

inline RetrievalTable cross_modality_table(const Embedded& e, Metric metric = Metric::euclidean,
                                           bool camera_filter = false) {
  std::vector<std::size_t> qi, gi;
  for (std::size_t i = 0; i < e.ids.size(); ++i) (e.modality[i] == Modality::infrared ? qi : gi).push_back(i);
  if (qi.empty() || gi.empty()) throw Error("evaluation needs both IR queries and VIS gallery images");
  auto take = [&](const std::vector<std::size_t>& idx) {
    const std::size_t d = e.emb.dim(1);
    std::vector<double> v;
    for (std::size_t i : idx) v.insert(v.end(), e.emb.values().begin() + static_cast<long>(i * d),
                                       e.emb.values().begin() + static_cast<long>((i + 1) * d));
    return Tensor({idx.size(), d}, std::move(v));
  };
  RetrievalTable t;
  for (std::size_t i : qi) t.query_ids.push_back(e.ids[i]), t.query_cams.push_back(e.cams[i]);
  for (std::size_t i : gi) t.gallery_ids.push_back(e.ids[i]), t.gallery_cams.push_back(e.cams[i]);
  t.dist = distance_matrix(take(qi), take(gi), metric);
  t.camera_filter = camera_filter;
  return t;
}

struct EvalReport {
  CmcResult cmc;
  DistanceStats dist;
};

inline EvalReport evaluate(FdnmModel& model, const std::vector<Sample>& samples, Metric metric = Metric::euclidean,
                           bool camera_filter = false) {
  const Embedded e = embed_samples(model, samples);
  return {cmc_map(cross_modality_table(e, metric, camera_filter)), distance_stats(e.emb, e.ids, e.modality)};
}

// ---------------------------------------------------------------------------
// CSV reports

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string summary_header() { return "rank1,rank5,rank10,rank20,mAP"; }

inline std::string summary_row(const CmcResult& r) {
  return fmt_double(r.rank(1)) + "," + fmt_double(r.rank(5)) + "," + fmt_double(r.rank(10)) + "," +
         fmt_double(r.rank(20)) + "," + fmt_double(r.map);
}

inline std::string cmc_csv(const CmcResult& r) {
  std::string s = "rank,value\n";
  for (std::size_t k = 0; k < r.cmc.size(); ++k) s += std::to_string(k + 1) + "," + fmt_double(r.cmc[k]) + "\n";
  return s;
}

inline std::string summary_csv(const CmcResult& r) { return summary_header() + "\n" + summary_row(r) + "\n"; }

inline std::string dist_hist_csv(const DistanceStats& s) {
  std::string out = "bin_center,intra_count,inter_count\n";
  for (std::size_t b = 0; b < kHistBins; ++b) {
    const double center = (static_cast<double>(b) + 0.5) * 2.0 / kHistBins;
    out += fmt_double(center) + "," + std::to_string(s.intra_hist[b]) + "," + std::to_string(s.inter_hist[b]) + "\n";
  }
  return out;
}

}  // namespace fdnm
