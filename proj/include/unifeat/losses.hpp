#pragma once

#include "unifeat/core.hpp"
#include "unifeat/global.hpp"
#include "unifeat/matching.hpp"

namespace unifeat {

struct LossConfig {
  double margin_m = 0.5;    // matching margin
  double margin_tau = 0.85; // contrastive margin
  double lambda = 0.1;      // distillation weight
  int soft_window = 3;      // soft detection local-softmax window (odd)
};

struct LossBreakdown {
  double lm_b2 = 0;
  double lm_b3 = 0;
  double lm_student = 0;
  double lc = 0;
  double ldis = 0;
  double total = 0;
};

/// Margin loss over affinity scores: mean_k max(s_an_k - s_ap + m, 0).
template <typename T>
T matching_margin_loss(T s_ap, const std::vector<T>& s_an, double m) {
  if (s_an.empty()) throw ArgumentError("matching_margin_loss: no negative scores");
  double acc = 0.0;
  for (T s : s_an) acc += std::max(static_cast<double>(s) - static_cast<double>(s_ap) + m, 0.0);
  return static_cast<T>(acc / s_an.size());
}

template <typename T>
T matching_margin_loss_grad(T s_ap, const std::vector<T>& s_an, double m, T* d_ap,
                            std::vector<T>* d_an) {
  if (s_an.empty()) throw ArgumentError("matching_margin_loss: no negative scores");
  d_an->assign(s_an.size(), T(0));
  *d_ap = T(0);
  double acc = 0.0;
  const double w = 1.0 / s_an.size();
  for (size_t k = 0; k < s_an.size(); ++k) {
    double h = static_cast<double>(s_an[k]) - static_cast<double>(s_ap) + m;
    if (h > 0.0) {
      acc += h;
      (*d_an)[k] = static_cast<T>(w);
      *d_ap -= static_cast<T>(w);
    }
  }
  return static_cast<T>(acc * w);
}

/// Contrastive loss on unit-norm global descriptors.
template <typename T>
T contrastive_loss(const std::vector<T>& a, const std::vector<T>& b, int label, double tau) {
  if (a.size() != b.size()) throw DimensionError("contrastive_loss: dimension mismatch");
  double d2 = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    d2 += d * d;
  }
  if (label == 1) return static_cast<T>(0.5 * d2);
  double dist = std::sqrt(d2);
  double hinge = std::max(0.0, tau - dist);
  return static_cast<T>(0.5 * hinge * hinge);
}

template <typename T>
T contrastive_loss_grad(const std::vector<T>& a, const std::vector<T>& b, int label, double tau,
                        std::vector<T>* da, std::vector<T>* db) {
  if (a.size() != b.size()) throw DimensionError("contrastive_loss: dimension mismatch");
  da->assign(a.size(), T(0));
  db->assign(b.size(), T(0));
  double d2 = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    d2 += d * d;
  }
  double dist = std::sqrt(d2);
  if (label == 1) {
    for (size_t i = 0; i < a.size(); ++i) {
      double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
      (*da)[i] = static_cast<T>(d);
      (*db)[i] = static_cast<T>(-d);
    }
    return static_cast<T>(0.5 * d2);
  }
  double hinge = tau - dist;
  if (hinge <= 0.0 || dist < 1e-12) return static_cast<T>(hinge > 0.0 ? 0.5 * hinge * hinge : 0.0);
  double scale = -hinge / dist;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    (*da)[i] = static_cast<T>(scale * d);
    (*db)[i] = static_cast<T>(-scale * d);
  }
  return static_cast<T>(0.5 * hinge * hinge);
}

// ---------------------------------------------------------------------------
// Soft detection score
// ---------------------------------------------------------------------------

template <typename T>
struct SoftDetectionCache {
  int window = 3;
  int channels = 0, height = 0, width = 0;
  std::vector<double> exp_shifted;   // exp(F - channel_max), per channel plane
  std::vector<double> window_sum;    // local sums of exp_shifted
  std::vector<double> channel_max;   // spatial max of F per channel
  std::vector<int> channel_argmax;   // flattened argmax cell per channel
  std::vector<int> argmax_channel;   // winning channel per cell
  std::vector<double> raw;           // unnormalized scores
  double z = 0.0;                    // sum of raw
  bool degenerate = false;           // all-zero input -> uniform scores
};

/// Differentiable per-location keypoint weight: a local softmax term times a
/// ratio-to-channel-max term, maximized over channels and normalized over the
/// map. The softmax window is clamped at borders (replicated samples), so a
/// constant map yields exactly uniform scores. Returns a 1xHxW map.
template <typename T>
FeatureMap<T> soft_detection(const FeatureMap<T>& f, int window = 3,
                             SoftDetectionCache<T>* cache_out = nullptr) {
  if (window < 1 || window % 2 == 0) throw ArgumentError("soft_detection: window must be odd");
  if (f.channels < 1 || f.cells() < 1) throw DimensionError("soft_detection: empty map");
  const int cells = f.cells(), h = f.height, w = f.width, r = window / 2;

  SoftDetectionCache<T> local;
  SoftDetectionCache<T>& c = cache_out ? *cache_out : local;
  c.window = window;
  c.channels = f.channels;
  c.height = h;
  c.width = w;
  c.exp_shifted.assign(static_cast<size_t>(f.channels) * cells, 0.0);
  c.window_sum.assign(static_cast<size_t>(f.channels) * cells, 0.0);
  c.channel_max.assign(static_cast<size_t>(f.channels), 0.0);
  c.channel_argmax.assign(static_cast<size_t>(f.channels), 0);
  c.argmax_channel.assign(static_cast<size_t>(cells), 0);
  c.raw.assign(static_cast<size_t>(cells), 0.0);

  for (int ch = 0; ch < f.channels; ++ch) {
    const T* plane = f.plane(ch);
    double mx = static_cast<double>(plane[0]);
    int arg = 0;
    for (int s = 1; s < cells; ++s)
      if (static_cast<double>(plane[s]) > mx) {
        mx = static_cast<double>(plane[s]);
        arg = s;
      }
    c.channel_max[ch] = mx;
    c.channel_argmax[ch] = arg;
    double* e = c.exp_shifted.data() + static_cast<size_t>(ch) * cells;
    for (int s = 0; s < cells; ++s) e[s] = std::exp(static_cast<double>(plane[s]) - mx);
    double* sums = c.window_sum.data() + static_cast<size_t>(ch) * cells;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) {
            int yy = std::clamp(y + dy, 0, h - 1);
            int xx = std::clamp(x + dx, 0, w - 1);
            acc += e[yy * w + xx];
          }
        sums[y * w + x] = acc;
      }
  }

  double z = 0.0;
  for (int s = 0; s < cells; ++s) {
    double best = -1.0;
    int best_ch = 0;
    for (int ch = 0; ch < f.channels; ++ch) {
      double mx = c.channel_max[ch];
      if (mx <= 0.0) continue;  // all-zero channel contributes nothing
      size_t base = static_cast<size_t>(ch) * cells;
      double alpha = c.exp_shifted[base + s] / c.window_sum[base + s];
      double beta = static_cast<double>(f.data[base + s]) / mx;
      double v = alpha * beta;
      if (v > best) {
        best = v;
        best_ch = ch;
      }
    }
    c.raw[s] = std::max(best, 0.0);
    c.argmax_channel[s] = best_ch;
    z += c.raw[s];
  }
  c.z = z;
  c.degenerate = !(z > 0.0);

  FeatureMap<T> scores(1, h, w, f.stride, f.origin);
  if (c.degenerate) {
    scores.fill(static_cast<T>(1.0 / cells));
  } else {
    for (int s = 0; s < cells; ++s) scores.data[s] = static_cast<T>(c.raw[s] / z);
  }
  return scores;
}

/// Gradient of a scalar w.r.t. the soft_detection input, given the gradient
/// w.r.t. its output scores.
template <typename T>
FeatureMap<T> soft_detection_backward(const FeatureMap<T>& f, const SoftDetectionCache<T>& c,
                                      const FeatureMap<T>& dscores) {
  FeatureMap<T> df(f.channels, f.height, f.width, f.stride, f.origin);
  if (c.degenerate) return df;
  const int cells = f.cells(), h = f.height, w = f.width, r = c.window / 2;

  // scores = raw / z
  double dot = 0.0;
  for (int s = 0; s < cells; ++s) dot += static_cast<double>(dscores.data[s]) * (c.raw[s] / c.z);
  std::vector<double> draw(static_cast<size_t>(cells));
  for (int s = 0; s < cells; ++s)
    draw[s] = (static_cast<double>(dscores.data[s]) - dot) / c.z;

  std::vector<double> d_exp(static_cast<size_t>(f.channels) * cells, 0.0);
  std::vector<double> d_max(static_cast<size_t>(f.channels), 0.0);

  for (int s = 0; s < cells; ++s) {
    if (draw[s] == 0.0) continue;
    int ch = c.argmax_channel[s];
    double mx = c.channel_max[ch];
    if (mx <= 0.0) continue;
    size_t base = static_cast<size_t>(ch) * cells;
    double e = c.exp_shifted[base + s];
    double sum = c.window_sum[base + s];
    double alpha = e / sum;
    double fv = static_cast<double>(f.data[base + s]);
    double beta = fv / mx;
    double dalpha = draw[s] * beta;
    double dbeta = draw[s] * alpha;
    // beta = F / max
    df.data[base + s] += static_cast<T>(dbeta / mx);
    d_max[ch] -= dbeta * fv / (mx * mx);
    // alpha = e / window_sum: direct term plus scatter into the window sum
    d_exp[base + s] += dalpha / sum;
    double dsum = -dalpha * e / (sum * sum);
    int y = s / w, x = s % w;
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx) {
        int yy = std::clamp(y + dy, 0, h - 1);
        int xx = std::clamp(x + dx, 0, w - 1);
        d_exp[base + yy * w + xx] += dsum;
      }
  }

  // exp term: the channel-max shift cancels inside alpha, so it is treated as
  // a constant here; routing d_max handles the beta denominator only.
  for (int ch = 0; ch < f.channels; ++ch) {
    size_t base = static_cast<size_t>(ch) * cells;
    for (int s = 0; s < cells; ++s)
      if (d_exp[base + s] != 0.0)
        df.data[base + s] += static_cast<T>(d_exp[base + s] * c.exp_shifted[base + s]);
    df.data[base + c.channel_argmax[ch]] += static_cast<T>(d_max[ch]);
  }
  return df;
}

// ---------------------------------------------------------------------------
// Cross-dimension distillation
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void check_distillation_shapes(const Matrix<T>& m_high, const FeatureMap<T>& det_a,
                               const FeatureMap<T>& det_p, const Matrix<T>& m_low) {
  if (m_high.rows != m_low.rows || m_high.cols != m_low.cols)
    throw DimensionError("distillation_loss: affinity shapes differ");
  if (det_a.cells() != m_high.rows || det_p.cells() != m_high.cols)
    throw DimensionError("distillation_loss: detection maps do not match affinity shape");
}

}  // namespace detail

/// Detection-weighted affinity distillation. The weight matrix is
/// W[i][j] = det_a[i] * det_p[j] * N1 * N2 (detection maps sum to one, so
/// sum(W) = N1*N2) and the loss is the mean squared entry of
/// M_high .* W - M_low. Detection maps are flattened row-major to match the
/// affinity index ordering.
template <typename T>
T distillation_loss(const Matrix<T>& m_high, const FeatureMap<T>& det_a, const FeatureMap<T>& det_p,
                    const Matrix<T>& m_low) {
  detail::check_distillation_shapes(m_high, det_a, det_p, m_low);
  const double n1 = m_high.rows, n2 = m_high.cols;
  double acc = 0.0;
  for (int i = 0; i < m_high.rows; ++i) {
    double wa = static_cast<double>(det_a.data[static_cast<size_t>(i)]) * n1 * n2;
    for (int j = 0; j < m_high.cols; ++j) {
      double wij = wa * static_cast<double>(det_p.data[static_cast<size_t>(j)]);
      double d = static_cast<double>(m_high.at(i, j)) * wij - static_cast<double>(m_low.at(i, j));
      acc += d * d;
    }
  }
  return static_cast<T>(acc / (n1 * n2));
}

/// Gradients of the distillation loss. `dm_low` is always produced; the
/// teacher-side gradients are filled only when requested (the gradient-cut
/// policy treats the teacher inputs as constants).
template <typename T>
T distillation_loss_grad(const Matrix<T>& m_high, const FeatureMap<T>& det_a,
                         const FeatureMap<T>& det_p, const Matrix<T>& m_low, Matrix<T>* dm_low,
                         Matrix<T>* dm_high = nullptr, FeatureMap<T>* ddet_a = nullptr,
                         FeatureMap<T>* ddet_p = nullptr) {
  detail::check_distillation_shapes(m_high, det_a, det_p, m_low);
  const double n1 = m_high.rows, n2 = m_high.cols;
  const double inv_n = 1.0 / (n1 * n2);
  *dm_low = Matrix<T>(m_high.rows, m_high.cols);
  if (dm_high) *dm_high = Matrix<T>(m_high.rows, m_high.cols);
  if (ddet_a) *ddet_a = FeatureMap<T>(1, det_a.height, det_a.width, det_a.stride, det_a.origin);
  if (ddet_p) *ddet_p = FeatureMap<T>(1, det_p.height, det_p.width, det_p.stride, det_p.origin);
  double acc = 0.0;
  for (int i = 0; i < m_high.rows; ++i) {
    double da = static_cast<double>(det_a.data[static_cast<size_t>(i)]);
    for (int j = 0; j < m_high.cols; ++j) {
      double dp = static_cast<double>(det_p.data[static_cast<size_t>(j)]);
      double wij = da * dp * n1 * n2;
      double mh = static_cast<double>(m_high.at(i, j));
      double diff = mh * wij - static_cast<double>(m_low.at(i, j));
      acc += diff * diff;
      double g = 2.0 * inv_n * diff;
      dm_low->at(i, j) = static_cast<T>(-g);
      if (dm_high) dm_high->at(i, j) = static_cast<T>(g * wij);
      if (ddet_a) ddet_a->data[static_cast<size_t>(i)] += static_cast<T>(g * mh * dp * n1 * n2);
      if (ddet_p) ddet_p->data[static_cast<size_t>(j)] += static_cast<T>(g * mh * da * n1 * n2);
    }
  }
  return static_cast<T>(acc * inv_n);
}

// ---------------------------------------------------------------------------
// Grid descriptors and map-level affinity scores
// ---------------------------------------------------------------------------

/// Flattens a map into per-cell descriptors (row i = cell y*W+x) with unit L2
/// norm. All-zero columns stay zero and are flagged.
template <typename T>
Matrix<T> map_descriptors(const FeatureMap<T>& f, std::vector<uint8_t>* zero_flags = nullptr) {
  Matrix<T> m(f.cells(), f.channels);
  if (zero_flags) zero_flags->assign(static_cast<size_t>(f.cells()), 0);
  for (int s = 0; s < f.cells(); ++s) {
    T* row = m.row(s);
    for (int ch = 0; ch < f.channels; ++ch) row[ch] = f.data[static_cast<size_t>(ch) * f.cells() + s];
    double norm = l2_norm(row, f.channels);
    if (norm > 0.0) {
      for (int ch = 0; ch < f.channels; ++ch)
        row[ch] = static_cast<T>(static_cast<double>(row[ch]) / norm);
    } else if (zero_flags) {
      (*zero_flags)[static_cast<size_t>(s)] = 1;
    }
  }
  return m;
}

/// Backward through map_descriptors: d(x/|x|) = (du - u (u . du)) / |x|.
template <typename T>
FeatureMap<T> map_descriptors_backward(const FeatureMap<T>& f, const Matrix<T>& normalized,
                                       const Matrix<T>& dnorm) {
  FeatureMap<T> df(f.channels, f.height, f.width, f.stride, f.origin);
  for (int s = 0; s < f.cells(); ++s) {
    double norm2 = 0.0;
    for (int ch = 0; ch < f.channels; ++ch) {
      double v = static_cast<double>(f.data[static_cast<size_t>(ch) * f.cells() + s]);
      norm2 += v * v;
    }
    double norm = std::sqrt(norm2);
    if (!(norm > 0.0)) continue;
    const T* u = normalized.row(s);
    const T* du = dnorm.row(s);
    double dot = 0.0;
    for (int ch = 0; ch < f.channels; ++ch)
      dot += static_cast<double>(u[ch]) * static_cast<double>(du[ch]);
    for (int ch = 0; ch < f.channels; ++ch)
      df.data[static_cast<size_t>(ch) * f.cells() + s] =
          static_cast<T>((static_cast<double>(du[ch]) - static_cast<double>(u[ch]) * dot) / norm);
  }
  return df;
}

// ---------------------------------------------------------------------------
// Joint objective
// ---------------------------------------------------------------------------

namespace detail {

/// Margin loss over one feature-map family for a tuple [a, p, n1..nK].
template <typename T>
double family_margin_loss(const std::vector<FeatureMap<T>>& maps, double m) {
  std::vector<Matrix<T>> descs;
  descs.reserve(maps.size());
  for (const FeatureMap<T>& f : maps) descs.push_back(map_descriptors(f));
  T s_ap = affinity_score(affinity_matrix(descs[0], descs[1]));
  std::vector<T> s_an;
  for (size_t k = 2; k < descs.size(); ++k)
    s_an.push_back(affinity_score(affinity_matrix(descs[0], descs[k])));
  return static_cast<double>(matching_margin_loss(s_ap, s_an, m));
}

}  // namespace detail

/// Joint objective over a tuple [a, p, n1..nK]:
///   L = L_M(B2) + L_M(B3) + L_M(student) + L_C + lambda * L_Dis
/// Margin losses use all grid locations of each map; the contrastive term
/// sums the positive pair plus every negative pair; distillation runs on the
/// positive pair between the aligned teacher map and the student map.
template <typename T>
LossBreakdown total_loss(const std::vector<FeatureMap<T>>& b2, const std::vector<FeatureMap<T>>& b3,
                         const std::vector<FeatureMap<T>>& teacher,
                         const std::vector<FeatureMap<T>>& student,
                         const std::vector<GlobalDescriptor<T>>& globals, const LossConfig& cfg) {
  if (b2.size() < 3 || b2.size() != b3.size() || b2.size() != student.size() ||
      b2.size() != globals.size() || teacher.size() < 2)
    throw ArgumentError("total_loss: tuple needs an anchor, a positive and >= 1 negative");
  LossBreakdown out;
  out.lm_b2 = detail::family_margin_loss(b2, cfg.margin_m);
  out.lm_b3 = detail::family_margin_loss(b3, cfg.margin_m);
  out.lm_student = detail::family_margin_loss(student, cfg.margin_m);

  out.lc = static_cast<double>(contrastive_loss(globals[0].v, globals[1].v, 1, cfg.margin_tau));
  for (size_t k = 2; k < globals.size(); ++k)
    out.lc += static_cast<double>(contrastive_loss(globals[0].v, globals[k].v, 0, cfg.margin_tau));

  if (cfg.lambda != 0.0) {
    Matrix<T> m_high = affinity_matrix(map_descriptors(teacher[0]), map_descriptors(teacher[1]));
    Matrix<T> m_low = affinity_matrix(map_descriptors(student[0]), map_descriptors(student[1]));
    FeatureMap<T> det_a = soft_detection(teacher[0], cfg.soft_window);
    FeatureMap<T> det_p = soft_detection(teacher[1], cfg.soft_window);
    out.ldis = static_cast<double>(distillation_loss(m_high, det_a, det_p, m_low));
  }
  out.total = out.lm_b2 + out.lm_b3 + out.lm_student + out.lc + cfg.lambda * out.ldis;
  return out;
}

}  // namespace unifeat
