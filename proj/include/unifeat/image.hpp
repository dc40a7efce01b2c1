#pragma once

#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "unifeat/core.hpp"

namespace unifeat {

/// RGB image, planar 3.H.W, values in [0, 1]. Backbone input normalization
/// (per-channel mean/std) happens at extraction time, not here.
struct ImageTensor {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;  // 3 * height * width, planar

  ImageTensor() = default;
  ImageTensor(int h, int w) : height(h), width(w), pixels(static_cast<size_t>(3) * h * w, 0.f) {}

  float& at(int c, int y, int x) {
    return pixels[(static_cast<size_t>(c) * height + y) * width + x];
  }
  const float& at(int c, int y, int x) const {
    return pixels[(static_cast<size_t>(c) * height + y) * width + x];
  }
};

constexpr int kMinImageSize = 64;  // four stride-2 stages need spatial extent

inline void validate_image(const ImageTensor& img) {
  if (img.height < kMinImageSize || img.width < kMinImageSize)
    throw DimensionError("image smaller than minimum size " + std::to_string(kMinImageSize));
  if (!all_finite(img.pixels)) throw ArgumentError("image contains non-finite values");
}

namespace detail {

inline int pnm_next_int(std::istream& in) {
  // skips whitespace and '#' comments per the PNM grammar
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  if (c == EOF) throw IoError("truncated PNM header");
  int value = 0;
  bool any = false;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    any = true;
    c = in.get();
  }
  if (!any) throw IoError("malformed PNM header");
  return value;
}

}  // namespace detail

/// Reads binary or ASCII PPM/PGM (P2/P3/P5/P6), 8-bit. Grayscale images are
/// replicated across the three channels.
inline ImageTensor load_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image: " + path);
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (!in || magic[0] != 'P') throw IoError("unsupported image format (expect PPM/PGM): " + path);
  int kind = magic[1] - '0';
  if (kind != 2 && kind != 3 && kind != 5 && kind != 6)
    throw IoError("unsupported PNM variant in " + path);
  int width = detail::pnm_next_int(in);
  int height = detail::pnm_next_int(in);
  int maxval = detail::pnm_next_int(in);
  if (maxval <= 0 || maxval > 255) throw IoError("unsupported PNM maxval in " + path);
  bool color = (kind == 3 || kind == 6);
  bool ascii = (kind == 2 || kind == 3);
  size_t samples = static_cast<size_t>(width) * height * (color ? 3 : 1);

  std::vector<uint8_t> raw(samples);
  if (ascii) {
    for (size_t i = 0; i < samples; ++i) raw[i] = static_cast<uint8_t>(detail::pnm_next_int(in));
  } else {
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(samples));
    if (static_cast<size_t>(in.gcount()) != samples) throw IoError("truncated PNM payload in " + path);
  }

  ImageTensor img(height, width);
  const float inv = 1.0f / static_cast<float>(maxval);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      size_t base = (static_cast<size_t>(y) * width + x) * (color ? 3 : 1);
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = inv * raw[base + (color ? c : 0)];
    }
  return img;
}

inline void save_image_ppm(const ImageTensor& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image: " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<uint8_t> raw(static_cast<size_t>(3) * img.width * img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        float v = std::clamp(img.at(c, y, x), 0.f, 1.f);
        raw[(static_cast<size_t>(y) * img.width + x) * 3 + c] =
            static_cast<uint8_t>(std::lround(v * 255.f));
      }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError("short write: " + path);
}

/// 3x3 homography, row-major. Maps source image coordinates to target
/// coordinates in homogeneous form.
struct Homography {
  double h[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Homography identity() { return Homography{}; }

  double det() const {
    return h[0] * (h[4] * h[8] - h[5] * h[7]) - h[1] * (h[3] * h[8] - h[5] * h[6]) +
           h[2] * (h[3] * h[7] - h[4] * h[6]);
  }

  /// Projects (x, y); returns false when the point maps to infinity
  /// (|w| < 1e-12).
  bool project(double x, double y, double* ox, double* oy) const {
    double w = h[6] * x + h[7] * y + h[8];
    if (std::abs(w) < 1e-12) return false;
    *ox = (h[0] * x + h[1] * y + h[2]) / w;
    *oy = (h[3] * x + h[4] * y + h[5]) / w;
    return true;
  }

  Homography inverse() const {
    double d = det();
    if (std::abs(d) < 1e-15) throw ArgumentError("homography is singular");
    const double* m = h;
    Homography r;
    r.h[0] = (m[4] * m[8] - m[5] * m[7]) / d;
    r.h[1] = (m[2] * m[7] - m[1] * m[8]) / d;
    r.h[2] = (m[1] * m[5] - m[2] * m[4]) / d;
    r.h[3] = (m[5] * m[6] - m[3] * m[8]) / d;
    r.h[4] = (m[0] * m[8] - m[2] * m[6]) / d;
    r.h[5] = (m[2] * m[3] - m[0] * m[5]) / d;
    r.h[6] = (m[3] * m[7] - m[4] * m[6]) / d;
    r.h[7] = (m[1] * m[6] - m[0] * m[7]) / d;
    r.h[8] = (m[0] * m[4] - m[1] * m[3]) / d;
    return r;
  }

  static Homography compose(const Homography& a, const Homography& b) {  // a after b
    Homography r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += a.h[i * 3 + k] * b.h[k * 3 + j];
        r.h[i * 3 + j] = s;
      }
    return r;
  }
};

/// Similarity transform about the image center plus a mild projective term.
inline Homography make_similarity_homography(int width, int height, double rot_deg, double scale,
                                             double tx = 0, double ty = 0, double perspective = 0) {
  double cx = 0.5 * width, cy = 0.5 * height;
  double a = rot_deg * 3.14159265358979323846 / 180.0;
  double ca = std::cos(a) * scale, sa = std::sin(a) * scale;
  Homography to_center;
  to_center.h[2] = -cx;
  to_center.h[5] = -cy;
  Homography rot;
  rot.h[0] = ca;
  rot.h[1] = -sa;
  rot.h[3] = sa;
  rot.h[4] = ca;
  rot.h[6] = perspective;
  rot.h[7] = -perspective;
  Homography back;
  back.h[2] = cx + tx;
  back.h[5] = cy + ty;
  return Homography::compose(back, Homography::compose(rot, to_center));
}

/// Bilinear sample with border clamp.
inline float sample_bilinear(const ImageTensor& img, int c, double x, double y) {
  double cx = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  double cy = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  int x0 = static_cast<int>(std::floor(cx)), y0 = static_cast<int>(std::floor(cy));
  int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
  double fx = cx - x0, fy = cy - y0;
  double v00 = img.at(c, y0, x0), v01 = img.at(c, y0, x1);
  double v10 = img.at(c, y1, x0), v11 = img.at(c, y1, x1);
  return static_cast<float>((v00 * (1 - fx) + v01 * fx) * (1 - fy) +
                            (v10 * (1 - fx) + v11 * fx) * fy);
}

/// Warps `src` by homography H (src -> dst coordinates); dst(x) = src(H^-1 x).
inline ImageTensor warp_image(const ImageTensor& src, const Homography& H, int out_h, int out_w) {
  Homography inv = H.inverse();
  ImageTensor dst(out_h, out_w);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      double sx, sy;
      if (!inv.project(x, y, &sx, &sy)) continue;
      for (int c = 0; c < 3; ++c) dst.at(c, y, x) = sample_bilinear(src, c, sx, sy);
    }
  return dst;
}

/// Bilinear resize to an exact target size (aspect ratio not preserved).
inline ImageTensor resize_image(const ImageTensor& src, int out_h, int out_w) {
  ImageTensor dst(out_h, out_w);
  double sy = static_cast<double>(src.height) / out_h;
  double sx = static_cast<double>(src.width) / out_w;
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      double ix = (x + 0.5) * sx - 0.5;
      double iy = (y + 0.5) * sy - 0.5;
      for (int c = 0; c < 3; ++c) dst.at(c, y, x) = sample_bilinear(src, c, ix, iy);
    }
  return dst;
}

}  // namespace unifeat
