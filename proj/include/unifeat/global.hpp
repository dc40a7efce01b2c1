#pragma once

#include <unordered_set>

#include "unifeat/core.hpp"

namespace unifeat {

namespace detail {

/// x^p for non-negative integral p by squaring; falls back to std::pow.
inline double pow_fast(double x, double p) {
  int ip = static_cast<int>(p);
  if (p != static_cast<double>(ip) || ip < 0 || ip > 256) return std::pow(x, p);
  double acc = 1.0, base = x;
  for (int e = ip; e > 0; e >>= 1) {
    if (e & 1) acc *= base;
    base *= base;
  }
  return acc;
}

}  // namespace detail

/// Generalized-mean pooling: per channel c, ((1/hw) * sum_s x_{c,s}^p)^(1/p).
/// Inputs must be non-negative; the max is factored out so large activations
/// and large p do not overflow.
template <typename T>
std::vector<T> gem_pool(const FeatureMap<T>& f, double p) {
  if (p < 1.0) throw ArgumentError("gem_pool: p must be >= 1");
  if (f.cells() == 0) throw DimensionError("gem_pool: empty map");
  std::vector<T> out(static_cast<size_t>(f.channels), T(0));
  const double inv_hw = 1.0 / f.cells();
  for (int c = 0; c < f.channels; ++c) {
    const T* plane = f.plane(c);
    double mx = 0.0;
    for (int s = 0; s < f.cells(); ++s) {
      double v = static_cast<double>(plane[s]);
      if (v < 0.0) throw ArgumentError("gem_pool: negative input");
      mx = std::max(mx, v);
    }
    if (mx == 0.0) continue;
    double acc = 0.0;
    const double inv_mx = 1.0 / mx;
    for (int s = 0; s < f.cells(); ++s)
      acc += detail::pow_fast(static_cast<double>(plane[s]) * inv_mx, p);
    out[static_cast<size_t>(c)] = static_cast<T>(mx * std::pow(acc * inv_hw, 1.0 / p));
  }
  return out;
}

/// d(gem)/d(x): dy_c/dx_s = (1/hw) * x_s^(p-1) * y_c^(1-p).
template <typename T>
FeatureMap<T> gem_pool_backward(const FeatureMap<T>& f, double p, const std::vector<T>& pooled,
                                const std::vector<T>& dpooled) {
  FeatureMap<T> df(f.channels, f.height, f.width, f.stride, f.origin);
  const double inv_hw = 1.0 / f.cells();
  for (int c = 0; c < f.channels; ++c) {
    double y = static_cast<double>(pooled[static_cast<size_t>(c)]);
    double g = static_cast<double>(dpooled[static_cast<size_t>(c)]);
    if (y <= 0.0 || g == 0.0) continue;
    const T* in = f.plane(c);
    T* out = df.plane(c);
    double scale = g * inv_hw * std::pow(y, 1.0 - p);
    for (int s = 0; s < f.cells(); ++s) {
      double x = static_cast<double>(in[s]);
      double xp = (p == 1.0) ? 1.0 : detail::pow_fast(x, p - 1.0);
      out[s] = static_cast<T>(scale * xp);
    }
  }
  return df;
}

/// Unit-norm concatenation of per-level poolings. `valid` is false for the
/// degenerate all-zero case (the vector stays zero; no division happens).
template <typename T>
struct GlobalDescriptor {
  std::vector<T> v;
  std::vector<int> level_dims;
  bool valid = false;

  int dim() const { return static_cast<int>(v.size()); }
};

template <typename T>
struct GlobalDescCache {
  std::vector<std::vector<T>> gem;   // per-level raw pooling
  std::vector<double> level_norm;    // per-level pre-normalization norms
  std::vector<T> concat;             // normalized levels, concatenated
  double final_norm = 0.0;
};

template <typename T>
GlobalDescriptor<T> global_descriptor(const std::vector<FeatureMap<T>>& levels, double p,
                                      GlobalDescCache<T>* cache = nullptr) {
  if (levels.empty()) throw ArgumentError("global_descriptor: no pyramid levels");
  GlobalDescriptor<T> g;
  GlobalDescCache<T> local;
  GlobalDescCache<T>& c = cache ? *cache : local;
  c.gem.clear();
  c.level_norm.clear();
  c.concat.clear();
  for (const FeatureMap<T>& level : levels) {
    std::vector<T> pooled = gem_pool(level, p);
    double norm = l2_norm(pooled.data(), static_cast<int>(pooled.size()));
    c.level_norm.push_back(norm);
    g.level_dims.push_back(static_cast<int>(pooled.size()));
    for (T x : pooled)
      c.concat.push_back(norm > 0.0 ? static_cast<T>(static_cast<double>(x) / norm) : T(0));
    c.gem.push_back(std::move(pooled));
  }
  c.final_norm = l2_norm(c.concat.data(), static_cast<int>(c.concat.size()));
  g.v.resize(c.concat.size(), T(0));
  if (c.final_norm > 0.0) {
    for (size_t i = 0; i < c.concat.size(); ++i)
      g.v[i] = static_cast<T>(static_cast<double>(c.concat[i]) / c.final_norm);
    g.valid = true;
  }
  return g;
}

/// Backward through normalize(concat(normalize(gem(level)))). Returns one
/// gradient map per level.
template <typename T>
std::vector<FeatureMap<T>> global_descriptor_backward(const std::vector<FeatureMap<T>>& levels,
                                                      double p, const GlobalDescriptor<T>& g,
                                                      const GlobalDescCache<T>& cache,
                                                      const std::vector<T>& dglobal) {
  std::vector<FeatureMap<T>> grads;
  grads.reserve(levels.size());
  if (!g.valid) {
    for (const FeatureMap<T>& level : levels)
      grads.emplace_back(level.channels, level.height, level.width, level.stride, level.origin);
    return grads;
  }
  // d(u/|u|) = (dz - u_hat * (u_hat . dz)) / |u|
  size_t n = cache.concat.size();
  double dot = 0.0;
  for (size_t i = 0; i < n; ++i) dot += static_cast<double>(g.v[i]) * static_cast<double>(dglobal[i]);
  std::vector<double> dconcat(n);
  for (size_t i = 0; i < n; ++i)
    dconcat[i] = (static_cast<double>(dglobal[i]) - static_cast<double>(g.v[i]) * dot) / cache.final_norm;

  size_t offset = 0;
  for (size_t l = 0; l < levels.size(); ++l) {
    size_t dim = cache.gem[l].size();
    std::vector<T> dgem(dim, T(0));
    double norm = cache.level_norm[l];
    if (norm > 0.0) {
      double ldot = 0.0;
      for (size_t i = 0; i < dim; ++i) {
        double u_hat = static_cast<double>(cache.concat[offset + i]);
        ldot += u_hat * dconcat[offset + i];
      }
      for (size_t i = 0; i < dim; ++i) {
        double u_hat = static_cast<double>(cache.concat[offset + i]);
        dgem[i] = static_cast<T>((dconcat[offset + i] - u_hat * ldot) / norm);
      }
    }
    grads.push_back(gem_pool_backward(levels[l], p, cache.gem[l], dgem));
    offset += dim;
  }
  return grads;
}

/// In-memory retrieval index: unique ids, uniform descriptor dimension.
class RetrievalIndex {
 public:
  void add(const std::string& id, std::vector<float> descriptor) {
    if (ids_.count(id)) throw ArgumentError("retrieval index: duplicate id " + id);
    if (!entries_.empty() && entries_.front().second.size() != descriptor.size())
      throw DimensionError("retrieval index: descriptor dimension drift at " + id);
    ids_.insert(id);
    entries_.emplace_back(id, std::move(descriptor));
  }

  bool contains(const std::string& id) const { return ids_.count(id) > 0; }
  size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, std::vector<float>>>& entries() const { return entries_; }

  const std::vector<float>* find(const std::string& id) const {
    for (const auto& e : entries_)
      if (e.first == id) return &e.second;
    return nullptr;
  }

 private:
  std::vector<std::pair<std::string, std::vector<float>>> entries_;
  std::unordered_set<std::string> ids_;
};

/// Descending inner-product ranking with deterministic id tie-break.
inline std::vector<std::pair<std::string, double>> rank(const std::vector<float>& query,
                                                        const RetrievalIndex& index) {
  std::vector<std::pair<std::string, double>> out;
  out.reserve(index.size());
  for (const auto& e : index.entries()) {
    if (e.second.size() != query.size()) throw DimensionError("rank: query dimension mismatch");
    double s = 0.0;
    for (size_t i = 0; i < query.size(); ++i)
      s += static_cast<double>(query[i]) * static_cast<double>(e.second[i]);
    out.emplace_back(e.first, s);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  return out;
}

/// AP per query = mean over relevant ranks of precision-at-rank; mAP = mean
/// over queries. Queries with no relevant items are excluded (counted in
/// `excluded` when provided).
inline double mean_average_precision(const std::vector<std::vector<std::string>>& rankings,
                                     const std::vector<std::unordered_set<std::string>>& relevant,
                                     std::vector<double>* per_query = nullptr,
                                     int* excluded = nullptr) {
  if (rankings.size() != relevant.size())
    throw ArgumentError("mean_average_precision: rankings/relevance size mismatch");
  if (rankings.empty()) throw ArgumentError("mean_average_precision: no queries");
  double total = 0.0;
  int used = 0, skipped = 0;
  if (per_query) per_query->assign(rankings.size(), 0.0);
  for (size_t q = 0; q < rankings.size(); ++q) {
    if (relevant[q].empty()) {
      ++skipped;
      continue;
    }
    int hits = 0;
    double ap = 0.0;
    for (size_t k = 0; k < rankings[q].size(); ++k) {
      if (relevant[q].count(rankings[q][k])) {
        ++hits;
        ap += static_cast<double>(hits) / static_cast<double>(k + 1);
      }
    }
    ap /= static_cast<double>(relevant[q].size());
    if (per_query) (*per_query)[q] = ap;
    total += ap;
    ++used;
  }
  if (excluded) *excluded = skipped;
  if (used == 0) throw ArgumentError("mean_average_precision: every query lacked relevant items");
  return total / used;
}

}  // namespace unifeat
