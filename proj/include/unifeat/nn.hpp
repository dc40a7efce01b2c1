#pragma once

#include <Eigen/Core>

#include "unifeat/core.hpp"

namespace unifeat {

template <typename T>
using EigenRowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<EigenRowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const EigenRowMat<T>>;
template <typename T>
using StridedMatMap = Eigen::Map<EigenRowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMatMap = Eigen::Map<const EigenRowMat<T>, 0, Eigen::OuterStride<>>;

inline int conv_output_extent(int in, int kernel, int stride, int pad, int dilation) {
  int span = dilation * (kernel - 1) + 1;
  return (in + 2 * pad - span) / stride + 1;
}

/// 2D convolution with optional stride, zero padding and dilation. Forward
/// and backward run as chunked im2col + GEMM; 1x1/stride-1 convolutions skip
/// the gather entirely.
template <typename T>
struct Conv2d {
  int in_channels = 0, out_channels = 0, kernel = 1;
  int stride = 1, pad = 0, dilation = 1;
  bool has_bias = false;
  std::vector<T> w;   // [out][in][k][k]
  std::vector<T> b;   // [out]
  std::vector<T> gw;  // gradient accumulators, same layout as w/b
  std::vector<T> gb;

  Conv2d() = default;
  Conv2d(int in, int out, int k, int stride_ = 1, int pad_ = 0, int dilation_ = 1, bool bias = false)
      : in_channels(in), out_channels(out), kernel(k), stride(stride_), pad(pad_),
        dilation(dilation_), has_bias(bias), w(static_cast<size_t>(out) * in * k * k, T(0)),
        b(bias ? static_cast<size_t>(out) : 0, T(0)), gw(w.size(), T(0)), gb(b.size(), T(0)) {}

  void init_he(Rng& rng) {
    double std_dev = std::sqrt(2.0 / (static_cast<double>(in_channels) * kernel * kernel));
    for (T& v : w) v = static_cast<T>(rng.normal() * std_dev);
    std::fill(b.begin(), b.end(), T(0));
  }

  void zero_grad() {
    std::fill(gw.begin(), gw.end(), T(0));
    std::fill(gb.begin(), gb.end(), T(0));
  }

  int patch_size() const { return in_channels * kernel * kernel; }

  /// `cols_keep`, when given, receives the full im2col buffer so a matching
  /// backward call can skip the gather (the buffer is patch_size x cells).
  FeatureMap<T> forward(const FeatureMap<T>& x, int stride_override = 0,
                        int dilation_override = 0, std::vector<T>* cols_keep = nullptr) const {
    const int s = stride_override > 0 ? stride_override : stride;
    const int d = dilation_override > 0 ? dilation_override : dilation;
    const int p = pad * d;  // base pad is for dilation 1; scales to keep geometry
    if (x.channels != in_channels) throw DimensionError("conv2d: input channel mismatch");
    int oh = conv_output_extent(x.height, kernel, s, p, d);
    int ow = conv_output_extent(x.width, kernel, s, p, d);
    if (oh < 1 || ow < 1) throw DimensionError("conv2d: input too small");
    FeatureMap<T> y(out_channels, oh, ow, x.stride * s, x.origin);

    const int cells = oh * ow;
    ConstMatMap<T> wm(w.data(), out_channels, patch_size());
    if (kernel == 1 && s == 1 && p == 0) {
      ConstMatMap<T> xm(x.data.data(), in_channels, x.height * x.width);
      MatMap<T> ym(y.data.data(), out_channels, cells);
      ym.noalias() = wm * xm;
    } else if (cols_keep) {
      cols_keep->resize(static_cast<size_t>(patch_size()) * cells);
      im2col(x, 0, cells, ow, s, p, d, cols_keep->data());
      ConstMatMap<T> cm(cols_keep->data(), patch_size(), cells);
      MatMap<T> ym(y.data.data(), out_channels, cells);
      ym.noalias() = wm * cm;
    } else {
      const int chunk = chunk_cells(cells);
      std::vector<T>& cols = scratch_a();
      cols.resize(static_cast<size_t>(patch_size()) * chunk);
      for (int s0 = 0; s0 < cells; s0 += chunk) {
        int n = std::min(chunk, cells - s0);
        im2col(x, s0, n, ow, s, p, d, cols.data());
        ConstMatMap<T> cm(cols.data(), patch_size(), n);
        StridedMatMap<T> ym(y.data.data() + s0, out_channels, n, Eigen::OuterStride<>(cells));
        ym.noalias() = wm * cm;
      }
    }
    if (has_bias)
      for (int c = 0; c < out_channels; ++c) {
        T* plane = y.plane(c);
        for (int i = 0; i < cells; ++i) plane[i] += b[static_cast<size_t>(c)];
      }
    return y;
  }

  /// Accumulates gw/gb and (when dx != nullptr) writes the input gradient.
  /// `cols_reuse` may carry the im2col buffer kept from the forward pass.
  void backward(const FeatureMap<T>& x, const FeatureMap<T>& dy, FeatureMap<T>* dx,
                int stride_override = 0, int dilation_override = 0,
                const std::vector<T>* cols_reuse = nullptr) {
    const int s = stride_override > 0 ? stride_override : stride;
    const int d = dilation_override > 0 ? dilation_override : dilation;
    const int p = pad * d;
    const int cells = dy.height * dy.width;
    ConstMatMap<T> wm(w.data(), out_channels, patch_size());
    MatMap<T> gwm(gw.data(), out_channels, patch_size());
    if (dx) *dx = FeatureMap<T>(x.channels, x.height, x.width, x.stride, x.origin);

    if (kernel == 1 && s == 1 && p == 0) {
      ConstMatMap<T> xm(x.data.data(), in_channels, cells);
      ConstMatMap<T> dym(dy.data.data(), out_channels, cells);
      gwm.noalias() += dym * xm.transpose();
      if (dx) {
        MatMap<T> dxm(dx->data.data(), in_channels, cells);
        dxm.noalias() = wm.transpose() * dym;
      }
    } else if (cols_reuse &&
               cols_reuse->size() == static_cast<size_t>(patch_size()) * cells) {
      ConstMatMap<T> cm(cols_reuse->data(), patch_size(), cells);
      ConstMatMap<T> dym(dy.data.data(), out_channels, cells);
      gwm.noalias() += dym * cm.transpose();
      if (dx) {
        std::vector<T>& dcols = scratch_b();
        dcols.resize(static_cast<size_t>(patch_size()) * cells);
        MatMap<T> dcm(dcols.data(), patch_size(), cells);
        dcm.noalias() = wm.transpose() * dym;
        col2im_add(*dx, 0, cells, dy.width, s, p, d, dcols.data());
      }
    } else {
      const int chunk = chunk_cells(cells);
      std::vector<T>& cols = scratch_a();
      std::vector<T>& dcols = scratch_b();
      cols.resize(static_cast<size_t>(patch_size()) * chunk);
      dcols.resize(static_cast<size_t>(patch_size()) * chunk);
      for (int s0 = 0; s0 < cells; s0 += chunk) {
        int n = std::min(chunk, cells - s0);
        im2col(x, s0, n, dy.width, s, p, d, cols.data());
        ConstMatMap<T> cm(cols.data(), patch_size(), n);
        ConstStridedMatMap<T> dym(dy.data.data() + s0, out_channels, n, Eigen::OuterStride<>(cells));
        gwm.noalias() += dym * cm.transpose();
        if (dx) {
          MatMap<T> dcm(dcols.data(), patch_size(), n);
          dcm.noalias() = wm.transpose() * dym;
          col2im_add(*dx, s0, n, dy.width, s, p, d, dcols.data());
        }
      }
    }
    if (has_bias)
      for (int c = 0; c < out_channels; ++c) {
        const T* plane = dy.plane(c);
        double acc = 0;
        for (int i = 0; i < cells; ++i) acc += static_cast<double>(plane[i]);
        gb[static_cast<size_t>(c)] += static_cast<T>(acc);
      }
  }

 private:
  static std::vector<T>& scratch_a() {
    thread_local std::vector<T> buf;
    return buf;
  }
  static std::vector<T>& scratch_b() {
    thread_local std::vector<T> buf;
    return buf;
  }

  int chunk_cells(int cells) const {
    constexpr size_t budget = size_t(16) << 20;  // 16M elements per buffer
    size_t per_cell = static_cast<size_t>(patch_size());
    int chunk = static_cast<int>(std::max<size_t>(1, budget / per_cell));
    return std::min(cells, chunk);
  }

  void im2col(const FeatureMap<T>& x, int cell0, int n, int ow, int s, int p, int d,
              T* cols) const {
    for (int c = 0; c < in_channels; ++c) {
      const T* plane = x.plane(c);
      for (int ky = 0; ky < kernel; ++ky)
        for (int kx = 0; kx < kernel; ++kx) {
          T* dst = cols + (static_cast<size_t>(c) * kernel * kernel + ky * kernel + kx) * n;
          if (s == 1) {
            // contiguous row segments: copy spans instead of gathering
            int i = 0;
            while (i < n) {
              int cell = cell0 + i;
              int oy = cell / ow, ox = cell % ow;
              int run = std::min(n - i, ow - ox);
              int iy = oy - p + ky * d;
              if (iy < 0 || iy >= x.height) {
                std::fill(dst + i, dst + i + run, T(0));
              } else {
                const T* src_row = plane + iy * x.width;
                int ix = ox - p + kx * d;
                int lead = std::clamp(-ix, 0, run);
                int body_end = std::clamp(x.width - ix, 0, run);
                std::fill(dst + i, dst + i + lead, T(0));
                if (body_end > lead)
                  std::copy(src_row + ix + lead, src_row + ix + body_end, dst + i + lead);
                std::fill(dst + i + body_end, dst + i + run, T(0));
              }
              i += run;
            }
          } else {
            for (int i = 0; i < n; ++i) {
              int cell = cell0 + i;
              int oy = cell / ow, ox = cell % ow;
              int iy = oy * s - p + ky * d;
              int ix = ox * s - p + kx * d;
              dst[i] = (iy >= 0 && iy < x.height && ix >= 0 && ix < x.width)
                           ? plane[iy * x.width + ix]
                           : T(0);
            }
          }
        }
    }
  }

  void col2im_add(FeatureMap<T>& dx, int cell0, int n, int ow, int s, int p, int d,
                  const T* dcols) const {
    for (int c = 0; c < in_channels; ++c) {
      T* plane = dx.plane(c);
      for (int ky = 0; ky < kernel; ++ky)
        for (int kx = 0; kx < kernel; ++kx) {
          const T* src = dcols + (static_cast<size_t>(c) * kernel * kernel + ky * kernel + kx) * n;
          if (s == 1) {
            int i = 0;
            while (i < n) {
              int cell = cell0 + i;
              int oy = cell / ow, ox = cell % ow;
              int run = std::min(n - i, ow - ox);
              int iy = oy - p + ky * d;
              if (iy >= 0 && iy < dx.height) {
                T* dst_row = plane + iy * dx.width;
                int ix = ox - p + kx * d;
                int lead = std::clamp(-ix, 0, run);
                int body_end = std::clamp(dx.width - ix, 0, run);
                for (int k = lead; k < body_end; ++k) dst_row[ix + k] += src[i + k];
              }
              i += run;
            }
          } else {
            for (int i = 0; i < n; ++i) {
              int cell = cell0 + i;
              int oy = cell / ow, ox = cell % ow;
              int iy = oy * s - p + ky * d;
              int ix = ox * s - p + kx * d;
              if (iy >= 0 && iy < dx.height && ix >= 0 && ix < dx.width)
                plane[iy * dx.width + ix] += src[i];
            }
          }
        }
    }
  }
};

/// Batch normalization in inference mode: a per-channel affine transform from
/// frozen running statistics. Training fine-tunes gamma/beta only; the
/// statistics never update.
template <typename T>
struct BatchNorm {
  int channels = 0;
  double eps = 1e-5;
  std::vector<T> gamma, beta, running_mean, running_var;
  std::vector<T> g_gamma, g_beta;

  BatchNorm() = default;
  explicit BatchNorm(int c)
      : channels(c), gamma(c, T(1)), beta(c, T(0)), running_mean(c, T(0)), running_var(c, T(1)),
        g_gamma(c, T(0)), g_beta(c, T(0)) {}

  void zero_grad() {
    std::fill(g_gamma.begin(), g_gamma.end(), T(0));
    std::fill(g_beta.begin(), g_beta.end(), T(0));
  }

  FeatureMap<T> forward(const FeatureMap<T>& x) const {
    if (x.channels != channels) throw DimensionError("batchnorm: channel mismatch");
    FeatureMap<T> y(x.channels, x.height, x.width, x.stride, x.origin);
    for (int c = 0; c < channels; ++c) {
      double inv = 1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps);
      double scale = static_cast<double>(gamma[c]) * inv;
      double shift = static_cast<double>(beta[c]) - static_cast<double>(running_mean[c]) * scale;
      const T* in = x.plane(c);
      T* out = y.plane(c);
      for (int i = 0; i < x.cells(); ++i)
        out[i] = static_cast<T>(static_cast<double>(in[i]) * scale + shift);
    }
    return y;
  }

  FeatureMap<T> backward(const FeatureMap<T>& x, const FeatureMap<T>& dy) {
    FeatureMap<T> dx(x.channels, x.height, x.width, x.stride, x.origin);
    for (int c = 0; c < channels; ++c) {
      double inv = 1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps);
      double scale = static_cast<double>(gamma[c]) * inv;
      const T* in = x.plane(c);
      const T* g = dy.plane(c);
      T* out = dx.plane(c);
      double acc_gamma = 0, acc_beta = 0;
      double mean = static_cast<double>(running_mean[c]);
      for (int i = 0; i < x.cells(); ++i) {
        out[i] = static_cast<T>(static_cast<double>(g[i]) * scale);
        acc_gamma += static_cast<double>(g[i]) * (static_cast<double>(in[i]) - mean) * inv;
        acc_beta += static_cast<double>(g[i]);
      }
      g_gamma[c] += static_cast<T>(acc_gamma);
      g_beta[c] += static_cast<T>(acc_beta);
    }
    return dx;
  }
};

template <typename T>
void relu_inplace(FeatureMap<T>& x) {
  for (T& v : x.data) v = std::max(v, T(0));
}

/// ReLU backward from the activation output (y > 0 gates the gradient).
template <typename T>
FeatureMap<T> relu_backward(const FeatureMap<T>& y, const FeatureMap<T>& dy) {
  FeatureMap<T> dx(y.channels, y.height, y.width, y.stride, y.origin);
  for (size_t i = 0; i < y.data.size(); ++i) dx.data[i] = y.data[i] > T(0) ? dy.data[i] : T(0);
  return dx;
}

/// Max pooling; caches flat argmax indices for the backward pass.
template <typename T>
FeatureMap<T> maxpool(const FeatureMap<T>& x, int kernel, int stride, int pad,
                      std::vector<int>* argmax = nullptr) {
  int oh = conv_output_extent(x.height, kernel, stride, pad, 1);
  int ow = conv_output_extent(x.width, kernel, stride, pad, 1);
  FeatureMap<T> y(x.channels, oh, ow, x.stride * stride, x.origin);
  if (argmax) argmax->assign(y.size(), -1);
  for (int c = 0; c < x.channels; ++c) {
    const T* in = x.plane(c);
    T* out = y.plane(c);
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        T best = std::numeric_limits<T>::lowest();
        int best_idx = -1;
        for (int ky = 0; ky < kernel; ++ky)
          for (int kx = 0; kx < kernel; ++kx) {
            int iy = oy * stride - pad + ky;
            int ix = ox * stride - pad + kx;
            if (iy < 0 || iy >= x.height || ix < 0 || ix >= x.width) continue;
            T v = in[iy * x.width + ix];
            if (v > best) {
              best = v;
              best_idx = iy * x.width + ix;
            }
          }
        out[oy * ow + ox] = best;
        if (argmax)
          (*argmax)[(static_cast<size_t>(c) * oh + oy) * ow + ox] =
              best_idx + c * x.height * x.width;
      }
  }
  return y;
}

template <typename T>
FeatureMap<T> maxpool_backward(const FeatureMap<T>& x, const FeatureMap<T>& dy,
                               const std::vector<int>& argmax) {
  FeatureMap<T> dx(x.channels, x.height, x.width, x.stride, x.origin);
  for (size_t i = 0; i < dy.data.size(); ++i)
    if (argmax[i] >= 0) dx.data[static_cast<size_t>(argmax[i])] += dy.data[i];
  return dx;
}

/// Bilinear resize to an exact target grid (half-pixel-center convention).
/// Resizing to the same size is an exact copy.
template <typename T>
FeatureMap<T> upsample_bilinear(const FeatureMap<T>& x, int out_h, int out_w) {
  if (out_h == x.height && out_w == x.width) return x;
  double sy = static_cast<double>(x.height) / out_h;
  double sx = static_cast<double>(x.width) / out_w;
  FeatureMap<T> y(x.channels, out_h, out_w, x.stride * sx, x.origin);
  for (int c = 0; c < x.channels; ++c) {
    const T* in = x.plane(c);
    T* out = y.plane(c);
    for (int oy = 0; oy < out_h; ++oy) {
      double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, static_cast<double>(x.height - 1));
      int y0 = static_cast<int>(std::floor(fy));
      int y1 = std::min(y0 + 1, x.height - 1);
      double wy = fy - y0;
      for (int ox = 0; ox < out_w; ++ox) {
        double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, static_cast<double>(x.width - 1));
        int x0 = static_cast<int>(std::floor(fx));
        int x1 = std::min(x0 + 1, x.width - 1);
        double wx = fx - x0;
        double v = (1 - wy) * ((1 - wx) * in[y0 * x.width + x0] + wx * in[y0 * x.width + x1]) +
                   wy * ((1 - wx) * in[y1 * x.width + x0] + wx * in[y1 * x.width + x1]);
        out[oy * out_w + ox] = static_cast<T>(v);
      }
    }
  }
  return y;
}

/// Transpose of upsample_bilinear (scatter-add of interpolation weights).
template <typename T>
FeatureMap<T> upsample_bilinear_backward(const FeatureMap<T>& dy, int in_h, int in_w) {
  if (dy.height == in_h && dy.width == in_w) return dy;
  double sy = static_cast<double>(in_h) / dy.height;
  double sx = static_cast<double>(in_w) / dy.width;
  FeatureMap<T> dx(dy.channels, in_h, in_w);
  for (int c = 0; c < dy.channels; ++c) {
    const T* g = dy.plane(c);
    T* out = dx.plane(c);
    for (int oy = 0; oy < dy.height; ++oy) {
      double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, static_cast<double>(in_h - 1));
      int y0 = static_cast<int>(std::floor(fy));
      int y1 = std::min(y0 + 1, in_h - 1);
      double wy = fy - y0;
      for (int ox = 0; ox < dy.width; ++ox) {
        double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, static_cast<double>(in_w - 1));
        int x0 = static_cast<int>(std::floor(fx));
        int x1 = std::min(x0 + 1, in_w - 1);
        double wx = fx - x0;
        double v = static_cast<double>(g[oy * dy.width + ox]);
        out[y0 * in_w + x0] += static_cast<T>(v * (1 - wy) * (1 - wx));
        out[y0 * in_w + x1] += static_cast<T>(v * (1 - wy) * wx);
        out[y1 * in_w + x0] += static_cast<T>(v * wy * (1 - wx));
        out[y1 * in_w + x1] += static_cast<T>(v * wy * wx);
      }
    }
  }
  return dx;
}

/// Channel-wise (2D) dropout: a dropped channel is zero at every spatial
/// position; survivors scale by 1/(1-p).
struct Dropout2dMask {
  std::vector<uint8_t> dropped;
  double scale = 1.0;
};

inline Dropout2dMask make_dropout2d_mask(int channels, double drop_prob, Rng& rng) {
  if (!(drop_prob >= 0.0 && drop_prob < 1.0))
    throw ArgumentError("dropout2d: drop_prob must be in [0, 1)");
  Dropout2dMask m;
  m.dropped.resize(static_cast<size_t>(channels));
  m.scale = 1.0 / (1.0 - drop_prob);
  for (int c = 0; c < channels; ++c) m.dropped[static_cast<size_t>(c)] = rng.bernoulli(drop_prob);
  return m;
}

template <typename T>
FeatureMap<T> apply_dropout2d(const FeatureMap<T>& x, const Dropout2dMask& mask) {
  if (static_cast<int>(mask.dropped.size()) != x.channels)
    throw DimensionError("dropout2d: mask channel mismatch");
  FeatureMap<T> y(x.channels, x.height, x.width, x.stride, x.origin);
  for (int c = 0; c < x.channels; ++c) {
    if (mask.dropped[static_cast<size_t>(c)]) continue;
    const T* in = x.plane(c);
    T* out = y.plane(c);
    for (int i = 0; i < x.cells(); ++i)
      out[i] = static_cast<T>(static_cast<double>(in[i]) * mask.scale);
  }
  return y;
}

template <typename T>
FeatureMap<T> concat_channels(const FeatureMap<T>& a, const FeatureMap<T>& b) {
  if (a.height != b.height || a.width != b.width)
    throw DimensionError("concat_channels: spatial size mismatch");
  FeatureMap<T> y(a.channels + b.channels, a.height, a.width, a.stride, a.origin);
  std::copy(a.data.begin(), a.data.end(), y.data.begin());
  std::copy(b.data.begin(), b.data.end(), y.data.begin() + a.data.size());
  return y;
}

template <typename T>
FeatureMap<T> slice_channels(const FeatureMap<T>& x, int begin, int count) {
  if (begin < 0 || begin + count > x.channels) throw DimensionError("slice_channels: out of range");
  FeatureMap<T> y(count, x.height, x.width, x.stride, x.origin);
  std::copy(x.data.begin() + static_cast<size_t>(begin) * x.cells(),
            x.data.begin() + static_cast<size_t>(begin + count) * x.cells(), y.data.begin());
  return y;
}

template <typename T>
void add_inplace(FeatureMap<T>& dst, const FeatureMap<T>& src) {
  if (!dst.same_shape(src)) throw DimensionError("add_inplace: shape mismatch");
  for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace unifeat
