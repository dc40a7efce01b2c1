#pragma once

#include "unifeat/core.hpp"
#include "unifeat/matching.hpp"

namespace unifeat {

/// Uniform channel partition. `start_channel`/`end_channel` are 1-based and
/// inclusive; group g covers ((g-1)*floor(K/G)+1) .. (floor(K/G)*g). The
/// K mod G trailing channels stay unassigned.
struct GroupRange {
  int start_channel = 0;  // 1-based inclusive
  int end_channel = 0;    // 1-based inclusive

  int begin0() const { return start_channel - 1; }  // 0-based half-open helpers
  int end0() const { return end_channel; }
  int width() const { return end_channel - start_channel + 1; }
};

struct GroupPartition {
  std::vector<GroupRange> ranges;
  int group_count = 0;
  int total_channels = 0;
};

struct DetectorConfig {
  int group_count = 6;
  double rel_threshold = 0.2;  // fraction of the per-group max response
  int nms_radius = 1;          // Chebyshev radius; 1 = 3x3 strict local maxima
  double edge_ratio = 10.0;    // Harris-style edge rejection ratio
  int max_keypoints = 5000;

  void validate() const {
    if (group_count < 1) throw ArgumentError("detector: group_count must be >= 1");
    if (!(rel_threshold > 0.0 && rel_threshold < 1.0))
      throw ArgumentError("detector: rel_threshold must be in (0, 1)");
    if (nms_radius < 1) throw ArgumentError("detector: nms_radius must be >= 1");
    if (!(edge_ratio > 1.0)) throw ArgumentError("detector: edge_ratio must be > 1");
    if (max_keypoints < 1) throw ArgumentError("detector: max_keypoints must be >= 1");
  }
};

/// Per-group scalar response grid (always double; detection geometry should
/// not depend on the feature map's storage type).
struct ResponseMap {
  int height = 0;
  int width = 0;
  int group_id = 0;
  std::vector<double> values;

  ResponseMap() = default;
  ResponseMap(int h, int w, int g) : height(h), width(w), group_id(g), values(static_cast<size_t>(h) * w, 0.0) {}
  double& at(int y, int x) { return values[static_cast<size_t>(y) * width + x]; }
  const double& at(int y, int x) const { return values[static_cast<size_t>(y) * width + x]; }
};

inline GroupPartition partition_channels(int channel_count, int group_count) {
  if (group_count < 1) throw ArgumentError("partition_channels: group count must be >= 1");
  if (group_count > channel_count)
    throw ArgumentError("partition_channels: more groups than channels");
  GroupPartition part;
  part.group_count = group_count;
  part.total_channels = channel_count;
  int width = channel_count / group_count;
  part.ranges.reserve(static_cast<size_t>(group_count));
  for (int g = 1; g <= group_count; ++g)
    part.ranges.push_back({(g - 1) * width + 1, width * g});
  return part;
}

/// L2 norm over each group's channel slice at every cell. Accumulates in
/// double over ascending channel index.
template <typename T>
std::vector<ResponseMap> group_l2_response(const FeatureMap<T>& f, const GroupPartition& part) {
  if (part.total_channels != f.channels)
    throw DimensionError("group_l2_response: partition does not match channel count");
  std::vector<ResponseMap> maps;
  maps.reserve(part.ranges.size());
  for (size_t g = 0; g < part.ranges.size(); ++g) {
    const GroupRange& r = part.ranges[g];
    ResponseMap rm(f.height, f.width, static_cast<int>(g) + 1);
    for (int y = 0; y < f.height; ++y)
      for (int x = 0; x < f.width; ++x) {
        double s = 0.0;
        for (int c = r.begin0(); c < r.end0(); ++c) {
          double v = static_cast<double>(f.at(c, y, x));
          s += v * v;
        }
        rm.at(y, x) = std::sqrt(s);
      }
    maps.push_back(std::move(rm));
  }
  return maps;
}

/// Channel-max response (the detect-and-describe baseline).
template <typename T>
ResponseMap channel_max_response(const FeatureMap<T>& f) {
  ResponseMap rm(f.height, f.width, 0);
  for (int y = 0; y < f.height; ++y)
    for (int x = 0; x < f.width; ++x) {
      double best = static_cast<double>(f.at(0, y, x));
      for (int c = 1; c < f.channels; ++c)
        best = std::max(best, static_cast<double>(f.at(c, y, x)));
      rm.at(y, x) = best;
    }
  return rm;
}

/// Edge rejection on the response surface: accept iff the central-difference
/// Hessian has det > 0 and trace^2/det < (r+1)^2/r. Cells without a full 3x3
/// interior neighborhood are rejected.
inline bool harris_edge_filter(const ResponseMap& r, int x, int y, double ratio) {
  if (x < 1 || y < 1 || x > r.width - 2 || y > r.height - 2) return false;
  double dxx = r.at(y, x + 1) - 2.0 * r.at(y, x) + r.at(y, x - 1);
  double dyy = r.at(y + 1, x) - 2.0 * r.at(y, x) + r.at(y - 1, x);
  double dxy = 0.25 * (r.at(y + 1, x + 1) - r.at(y + 1, x - 1) - r.at(y - 1, x + 1) + r.at(y - 1, x - 1));
  double det = dxx * dyy - dxy * dxy;
  if (!(det > 0.0)) return false;
  double tr = dxx + dyy;
  double limit = (ratio + 1.0) * (ratio + 1.0) / ratio;
  return tr * tr / det < limit;
}

struct SubpixelOffset {
  double dx = 0;
  double dy = 0;
  bool valid = false;
};

/// Second-order refinement: solves H d = -g for the quadratic fit around the
/// cell. Offsets beyond half a cell or a singular Hessian invalidate the
/// refinement and the keypoint stays at the integer cell.
inline SubpixelOffset refine_subpixel(const ResponseMap& r, int x, int y) {
  SubpixelOffset out;
  if (x < 1 || y < 1 || x > r.width - 2 || y > r.height - 2) return out;
  double gx = 0.5 * (r.at(y, x + 1) - r.at(y, x - 1));
  double gy = 0.5 * (r.at(y + 1, x) - r.at(y - 1, x));
  double dxx = r.at(y, x + 1) - 2.0 * r.at(y, x) + r.at(y, x - 1);
  double dyy = r.at(y + 1, x) - 2.0 * r.at(y, x) + r.at(y - 1, x);
  double dxy = 0.25 * (r.at(y + 1, x + 1) - r.at(y + 1, x - 1) - r.at(y - 1, x + 1) + r.at(y - 1, x - 1));
  double det = dxx * dyy - dxy * dxy;
  if (std::abs(det) < 1e-12) return out;
  double dx = -(dyy * gx - dxy * gy) / det;
  double dy = -(-dxy * gx + dxx * gy) / det;
  if (std::abs(dx) > 0.5 || std::abs(dy) > 0.5) return out;
  out.dx = dx;
  out.dy = dy;
  out.valid = true;
  return out;
}

namespace detail {

inline bool is_strict_local_max(const ResponseMap& r, int x, int y, int radius) {
  double v = r.at(y, x);
  int y0 = std::max(0, y - radius), y1 = std::min(r.height - 1, y + radius);
  int x0 = std::max(0, x - radius), x1 = std::min(r.width - 1, x + radius);
  for (int yy = y0; yy <= y1; ++yy)
    for (int xx = x0; xx <= x1; ++xx) {
      if (yy == y && xx == x) continue;
      if (!(v > r.at(yy, xx))) return false;
    }
  return true;
}

/// Priority order used for cross-group merging and truncation: higher score
/// first, then group, then grid position.
inline bool keypoint_priority(const Keypoint& a, const Keypoint& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.group_id != b.group_id) return a.group_id < b.group_id;
  if (a.fy != b.fy) return a.fy < b.fy;
  return a.fx < b.fx;
}

}  // namespace detail

/// Candidates from a single response map: thresholded strict local maxima,
/// edge-filtered and subpixel-refined. Coordinates are image-space.
inline KeypointSet detect_on_response(const ResponseMap& r, const DetectorConfig& cfg, double stride,
                                      double origin) {
  KeypointSet out;
  double gmax = 0.0;
  for (double v : r.values) gmax = std::max(gmax, v);
  if (!(gmax > 0.0)) return out;  // all-zero response: nothing to detect
  double thr = cfg.rel_threshold * gmax;
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x) {
      if (!(r.at(y, x) >= thr)) continue;
      if (!detail::is_strict_local_max(r, x, y, cfg.nms_radius)) continue;
      if (!harris_edge_filter(r, x, y, cfg.edge_ratio)) continue;
      SubpixelOffset off = refine_subpixel(r, x, y);
      Keypoint kp;
      kp.fx = x;
      kp.fy = y;
      kp.x = (x + off.dx) * stride + origin;
      kp.y = (y + off.dy) * stride + origin;
      kp.score = r.at(y, x);
      kp.group_id = r.group_id;
      kp.refined = off.valid;
      out.push_back(kp);
    }
  return out;
}

/// Merges per-group keypoint sets: points closer than half a stride keep the
/// higher-priority one; the result is priority-sorted and truncated.
inline KeypointSet merge_keypoint_sets(std::vector<KeypointSet> groups, double stride,
                                       int max_keypoints) {
  KeypointSet all;
  for (KeypointSet& g : groups)
    for (Keypoint& kp : g) all.push_back(kp);
  std::sort(all.begin(), all.end(), detail::keypoint_priority);
  const double min_dist2 = 0.25 * stride * stride;
  KeypointSet kept;
  for (const Keypoint& kp : all) {
    bool duplicate = false;
    for (const Keypoint& k : kept) {
      double dx = k.x - kp.x, dy = k.y - kp.y;
      if (dx * dx + dy * dy < min_dist2) {
        duplicate = true;
        break;
      }
    }
    if (!duplicate) kept.push_back(kp);
    if (static_cast<int>(kept.size()) >= max_keypoints) break;
  }
  return kept;
}

/// Group-wise detection: per-group L2 response maps, per-group thresholded
/// NMS with edge filtering and refinement, then a cross-group merge.
template <typename T>
KeypointSet detect_gcdad(const FeatureMap<T>& f, const DetectorConfig& cfg) {
  cfg.validate();
  if (!all_finite(f.data)) throw ArgumentError("detect_gcdad: non-finite feature map");
  GroupPartition part = partition_channels(f.channels, cfg.group_count);
  std::vector<ResponseMap> responses = group_l2_response(f, part);
  std::vector<KeypointSet> per_group;
  per_group.reserve(responses.size());
  for (const ResponseMap& r : responses)
    per_group.push_back(detect_on_response(r, cfg, f.stride, f.origin));
  return merge_keypoint_sets(std::move(per_group), f.stride, cfg.max_keypoints);
}

/// Channel-max baseline sharing the same NMS / edge / refinement chain.
template <typename T>
KeypointSet detect_dad_baseline(const FeatureMap<T>& f, const DetectorConfig& cfg) {
  cfg.validate();
  if (!all_finite(f.data)) throw ArgumentError("detect_dad_baseline: non-finite feature map");
  ResponseMap r = channel_max_response(f);
  std::vector<KeypointSet> one;
  one.push_back(detect_on_response(r, cfg, f.stride, f.origin));
  return merge_keypoint_sets(std::move(one), f.stride, cfg.max_keypoints);
}

}  // namespace unifeat
