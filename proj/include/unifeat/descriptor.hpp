#pragma once

#include "unifeat/backbone.hpp"
#include "unifeat/losses.hpp"
#include "unifeat/matching.hpp"
#include "unifeat/nn.hpp"

namespace unifeat {

/// Table-style extraction modes: which map detects and which describes.
enum class ExtractionMode { teacher, ts, ss };

inline std::string to_string(ExtractionMode m) {
  switch (m) {
    case ExtractionMode::teacher: return "teacher";
    case ExtractionMode::ts: return "ts";
    default: return "ss";
  }
}

inline ExtractionMode extraction_mode_from_string(const std::string& s) {
  if (s == "teacher") return ExtractionMode::teacher;
  if (s == "ts") return ExtractionMode::ts;
  if (s == "ss") return ExtractionMode::ss;
  throw ArgumentError("unknown extraction mode: " + s);
}

/// Per-block 1x1 reduction convs (B2 -> d2, B3 -> d3), bias-free so the
/// mapping stays linear. Outputs are concatenated into the student map.
template <typename T>
struct ReductionHead {
  Conv2d<T> b2, b3;

  ReductionHead() = default;
  ReductionHead(int in_b2, int d2, int in_b3, int d3) {
    if (d2 >= in_b2 || d3 >= in_b3)
      throw ArgumentError("reduction head: output dim must be below input dim");
    b2 = Conv2d<T>(in_b2, d2, 1);
    b3 = Conv2d<T>(in_b3, d3, 1);
  }

  int in_channels() const { return b2.in_channels + b3.in_channels; }
  int out_channels() const { return b2.out_channels + b3.out_channels; }

  void init_random(uint64_t seed) {
    Rng rng(seed);
    b2.init_he(rng);
    b3.init_he(rng);
  }

  void visit_params(const std::function<void(ParamRef<T>)>& fn) {
    fn({"head.b2.weight", &b2.w, &b2.gw, 4});
    fn({"head.b3.weight", &b3.w, &b3.gw, 4});
  }

  void zero_grad() {
    b2.zero_grad();
    b3.zero_grad();
  }
};

/// Concept-dropout dimension reduction: optional channel dropout on the
/// concatenated teacher map, then the per-block 1x1 mapping. Pass a mask for
/// the training path; nullptr disables dropout (inference).
template <typename T>
FeatureMap<T> reduce_dim(const FeatureMap<T>& f, const ReductionHead<T>& head,
                         const Dropout2dMask* mask = nullptr) {
  if (f.channels != head.in_channels())
    throw DimensionError("reduce_dim: input channels do not match head");
  const FeatureMap<T>* src = &f;
  FeatureMap<T> masked;
  if (mask) {
    masked = apply_dropout2d(f, *mask);
    src = &masked;
  }
  FeatureMap<T> x2 = slice_channels(*src, 0, head.b2.in_channels);
  FeatureMap<T> x3 = slice_channels(*src, head.b2.in_channels, head.b3.in_channels);
  FeatureMap<T> out = concat_channels(head.b2.forward(x2), head.b3.forward(x3));
  out.stride = f.stride;
  out.origin = f.origin;
  return out;
}

/// Convenience wrapper matching the training/inference switch: draws a fresh
/// channel mask from `rng` when training with drop_prob > 0.
template <typename T>
FeatureMap<T> reduce_dim(const FeatureMap<T>& f, const ReductionHead<T>& head, bool training,
                         double drop_prob, Rng& rng) {
  if (training && drop_prob > 0.0) {
    Dropout2dMask mask = make_dropout2d_mask(f.channels, drop_prob, rng);
    return reduce_dim(f, head, &mask);
  }
  return reduce_dim(f, head, nullptr);
}

/// Backward through reduce_dim; accumulates head gradients and (when
/// `want_input_grad`) returns the gradient w.r.t. the pre-dropout input map.
/// Skipping the input gradient implements gradient cuts and frozen-backbone
/// paths cheaply.
template <typename T>
FeatureMap<T> reduce_dim_backward(const FeatureMap<T>& f, ReductionHead<T>& head,
                                  const Dropout2dMask* mask, const FeatureMap<T>& dout,
                                  bool want_input_grad = true) {
  const FeatureMap<T>* src = &f;
  FeatureMap<T> masked;
  if (mask) {
    masked = apply_dropout2d(f, *mask);
    src = &masked;
  }
  FeatureMap<T> x2 = slice_channels(*src, 0, head.b2.in_channels);
  FeatureMap<T> x3 = slice_channels(*src, head.b2.in_channels, head.b3.in_channels);
  FeatureMap<T> d2 = slice_channels(dout, 0, head.b2.out_channels);
  FeatureMap<T> d3 = slice_channels(dout, head.b2.out_channels, head.b3.out_channels);
  if (!want_input_grad) {
    head.b2.backward(x2, d2, nullptr);
    head.b3.backward(x3, d3, nullptr);
    return FeatureMap<T>();
  }
  FeatureMap<T> dx2, dx3;
  head.b2.backward(x2, d2, &dx2);
  head.b3.backward(x3, d3, &dx3);
  FeatureMap<T> df = concat_channels(dx2, dx3);
  df.stride = f.stride;
  df.origin = f.origin;
  if (mask) {
    for (int c = 0; c < df.channels; ++c) {
      T* plane = df.plane(c);
      if (mask->dropped[static_cast<size_t>(c)]) {
        std::fill(plane, plane + df.cells(), T(0));
      } else {
        for (int i = 0; i < df.cells(); ++i)
          plane[i] = static_cast<T>(static_cast<double>(plane[i]) * mask->scale);
      }
    }
  }
  return df;
}

/// The teacher descriptor map is the aligned B2 || B3 concatenation.
template <typename T>
FeatureMap<T> teacher_descriptor_map(const BlockFeatures<T>& blocks, RunMode mode) {
  return concat_local_features(blocks, mode);
}

/// Bilinear descriptor sampling at subpixel keypoint locations. Keypoints
/// outside the map are clamped to the border and flagged (flag 2); all-zero
/// samples stay zero and are flagged (flag 1); everything else is unit norm.
template <typename T>
DescriptorSet<T> sample_descriptors(const FeatureMap<T>& f, const KeypointSet& kps) {
  DescriptorSet<T> out;
  out.vectors = Matrix<T>(static_cast<int>(kps.size()), f.channels);
  out.flags.assign(kps.size(), 0);
  for (size_t i = 0; i < kps.size(); ++i) {
    double gx = f.to_grid_x(kps[i].x);
    double gy = f.to_grid_y(kps[i].y);
    bool clamped = gx < 0 || gy < 0 || gx > f.width - 1 || gy > f.height - 1;
    gx = std::clamp(gx, 0.0, static_cast<double>(f.width - 1));
    gy = std::clamp(gy, 0.0, static_cast<double>(f.height - 1));
    int x0 = static_cast<int>(std::floor(gx)), y0 = static_cast<int>(std::floor(gy));
    int x1 = std::min(x0 + 1, f.width - 1), y1 = std::min(y0 + 1, f.height - 1);
    double wx = gx - x0, wy = gy - y0;
    T* row = out.vectors.row(static_cast<int>(i));
    for (int c = 0; c < f.channels; ++c) {
      const T* p = f.plane(c);
      double v = (1 - wy) * ((1 - wx) * p[y0 * f.width + x0] + wx * p[y0 * f.width + x1]) +
                 wy * ((1 - wx) * p[y1 * f.width + x0] + wx * p[y1 * f.width + x1]);
      row[c] = static_cast<T>(v);
    }
    double norm = l2_norm(row, f.channels);
    if (norm > 0.0) {
      for (int c = 0; c < f.channels; ++c)
        row[c] = static_cast<T>(static_cast<double>(row[c]) / norm);
      if (clamped) out.flags[i] = 2;
    } else {
      out.flags[i] = 1;
    }
  }
  return out;
}

/// All-grid-locations descriptor set (training view of a map).
template <typename T>
DescriptorSet<T> grid_descriptors(const FeatureMap<T>& f) {
  DescriptorSet<T> out;
  out.vectors = map_descriptors(f, &out.flags);
  return out;
}

}  // namespace unifeat
