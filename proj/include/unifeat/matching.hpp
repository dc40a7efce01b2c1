#pragma once

#include <Eigen/Core>

#include "unifeat/core.hpp"
#include "unifeat/image.hpp"

namespace unifeat {

/// One detected keypoint. (x, y) are subpixel image coordinates; (fx, fy) is
/// the grid cell it came from. group_id is 1-based for grouped detection and
/// 0 for the channel-max baseline.
struct Keypoint {
  double x = 0;
  double y = 0;
  double score = 0;
  int group_id = 0;
  int fx = 0;
  int fy = 0;
  bool refined = false;
};

using KeypointSet = std::vector<Keypoint>;

/// Descriptors aligned with a keypoint set (or with all grid locations).
/// Rows are unit L2 norm except where `flags` marks a degenerate vector
/// (all-zero column or out-of-bounds sample clamped to the border).
template <typename T>
struct DescriptorSet {
  Matrix<T> vectors;           // N x D
  std::vector<uint8_t> flags;  // 0 ok, 1 zero-vector, 2 clamped

  int count() const { return vectors.rows; }
  int dim() const { return vectors.cols; }
};

struct Match {
  int index_a = 0;
  int index_b = 0;
  double similarity = 0;
};

using MatchSet = std::vector<Match>;

/// All-pairs inner products between two descriptor sets: M[i][j] = <a_i, b_j>.
template <typename T>
Matrix<T> affinity_matrix(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols != b.cols) throw DimensionError("affinity_matrix: descriptor dims differ");
  Matrix<T> m(a.rows, b.rows);
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Mat> am(a.data.data(), a.rows, a.cols);
  Eigen::Map<const Mat> bm(b.data.data(), b.rows, b.cols);
  Eigen::Map<Mat> mm(m.data.data(), a.rows, b.rows);
  mm.noalias() = am * bm.transpose();
  return m;
}

template <typename T>
Matrix<T> affinity_matrix(const DescriptorSet<T>& a, const DescriptorSet<T>& b) {
  return affinity_matrix(a.vectors, b.vectors);
}

/// Image-pair affinity score: average of row maxima plus average of column
/// maxima, each weighted by 1/2.
template <typename T>
T affinity_score(const Matrix<T>& m) {
  if (m.rows < 1 || m.cols < 1) throw ArgumentError("affinity_score: empty matrix");
  double row_sum = 0;
  for (int i = 0; i < m.rows; ++i) {
    const T* r = m.row(i);
    T best = r[0];
    for (int j = 1; j < m.cols; ++j) best = std::max(best, r[j]);
    row_sum += static_cast<double>(best);
  }
  double col_sum = 0;
  for (int j = 0; j < m.cols; ++j) {
    T best = m.at(0, j);
    for (int i = 1; i < m.rows; ++i) best = std::max(best, m.at(i, j));
    col_sum += static_cast<double>(best);
  }
  return static_cast<T>(row_sum / (2.0 * m.rows) + col_sum / (2.0 * m.cols));
}

/// Score plus its (sub)gradient. Ties route to the lowest index, matching the
/// forward pass exactly.
template <typename T>
T affinity_score_grad(const Matrix<T>& m, Matrix<T>* dm) {
  if (m.rows < 1 || m.cols < 1) throw ArgumentError("affinity_score: empty matrix");
  *dm = Matrix<T>(m.rows, m.cols);
  double row_sum = 0;
  const T rw = static_cast<T>(1.0 / (2.0 * m.rows));
  const T cw = static_cast<T>(1.0 / (2.0 * m.cols));
  for (int i = 0; i < m.rows; ++i) {
    const T* r = m.row(i);
    int arg = 0;
    for (int j = 1; j < m.cols; ++j)
      if (r[j] > r[arg]) arg = j;
    row_sum += static_cast<double>(r[arg]);
    dm->at(i, arg) += rw;
  }
  double col_sum = 0;
  for (int j = 0; j < m.cols; ++j) {
    int arg = 0;
    for (int i = 1; i < m.rows; ++i)
      if (m.at(i, j) > m.at(arg, j)) arg = i;
    col_sum += static_cast<double>(m.at(arg, j));
    dm->at(arg, j) += cw;
  }
  return static_cast<T>(row_sum / (2.0 * m.rows) + col_sum / (2.0 * m.cols));
}

/// Score plus the row/column argmax indices (the score's sparse dependency
/// pattern); used by training to route gradients without a dense pass.
template <typename T>
T affinity_score_argmax(const Matrix<T>& m, std::vector<int>* row_arg, std::vector<int>* col_arg) {
  if (m.rows < 1 || m.cols < 1) throw ArgumentError("affinity_score: empty matrix");
  row_arg->assign(static_cast<size_t>(m.rows), 0);
  col_arg->assign(static_cast<size_t>(m.cols), 0);
  double row_sum = 0;
  for (int i = 0; i < m.rows; ++i) {
    const T* r = m.row(i);
    int arg = 0;
    for (int j = 1; j < m.cols; ++j)
      if (r[j] > r[arg]) arg = j;
    (*row_arg)[static_cast<size_t>(i)] = arg;
    row_sum += static_cast<double>(r[arg]);
  }
  double col_sum = 0;
  for (int j = 0; j < m.cols; ++j) {
    int arg = 0;
    for (int i = 1; i < m.rows; ++i)
      if (m.at(i, j) > m.at(arg, j)) arg = i;
    (*col_arg)[static_cast<size_t>(j)] = arg;
    col_sum += static_cast<double>(m.at(arg, j));
  }
  return static_cast<T>(row_sum / (2.0 * m.rows) + col_sum / (2.0 * m.cols));
}

/// Mutual nearest-neighbor matching; ties broken by lowest index.
template <typename T>
MatchSet mutual_nn_matches(const DescriptorSet<T>& a, const DescriptorSet<T>& b) {
  if (a.count() == 0 || b.count() == 0) throw ArgumentError("mutual_nn_matches: empty set");
  if (a.dim() != b.dim()) throw DimensionError("mutual_nn_matches: descriptor dims differ");
  Matrix<T> m = affinity_matrix(a, b);
  std::vector<int> best_b(m.rows, 0);
  for (int i = 0; i < m.rows; ++i) {
    const T* r = m.row(i);
    for (int j = 1; j < m.cols; ++j)
      if (r[j] > r[best_b[i]]) best_b[i] = j;
  }
  std::vector<int> best_a(m.cols, 0);
  for (int j = 0; j < m.cols; ++j)
    for (int i = 1; i < m.rows; ++i)
      if (m.at(i, j) > m.at(best_a[j], j)) best_a[j] = i;
  MatchSet out;
  for (int i = 0; i < m.rows; ++i) {
    int j = best_b[i];
    if (best_a[j] == i) out.push_back({i, j, static_cast<double>(m.at(i, j))});
  }
  return out;
}

/// Fraction of matches whose reprojection error under H is within each
/// threshold. Points mapping to infinity count as incorrect at every
/// threshold. Returns one value per threshold; zeros for an empty match set.
inline std::vector<double> mma_curve(const MatchSet& matches, const KeypointSet& kps_a,
                                     const KeypointSet& kps_b, const Homography& H,
                                     const std::vector<double>& thresholds) {
  if (std::abs(H.det()) < 1e-12) throw ArgumentError("mma_curve: singular homography");
  std::vector<double> curve(thresholds.size(), 0.0);
  if (matches.empty()) return curve;
  for (const Match& m : matches) {
    const Keypoint& pa = kps_a.at(static_cast<size_t>(m.index_a));
    const Keypoint& pb = kps_b.at(static_cast<size_t>(m.index_b));
    double px, py;
    if (!H.project(pa.x, pa.y, &px, &py)) continue;  // counted as incorrect
    double err = std::hypot(px - pb.x, py - pb.y);
    for (size_t t = 0; t < thresholds.size(); ++t)
      if (err <= thresholds[t]) curve[t] += 1.0;
  }
  for (double& v : curve) v /= static_cast<double>(matches.size());
  return curve;
}

inline std::vector<double> default_mma_thresholds() {
  std::vector<double> t(10);
  for (int i = 0; i < 10; ++i) t[i] = i + 1.0;
  return t;
}

}  // namespace unifeat
