#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace unifeat {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimensionError : Error {
  using Error::Error;
};
struct ArgumentError : Error {
  using Error::Error;
};
struct StateError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

/// Dense C.H.W activation grid. `stride`/`origin` map grid cells to image
/// pixels: x_img = x_grid * stride + origin (center-of-cell convention).
template <typename T>
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  double stride = 1.0;
  double origin = 0.0;
  std::vector<T> data;

  FeatureMap() = default;
  FeatureMap(int c, int h, int w, double map_stride = 1.0, double map_origin = 0.0)
      : channels(c), height(h), width(w), stride(map_stride), origin(map_origin),
        data(static_cast<size_t>(c) * h * w, T(0)) {
    if (c < 0 || h < 0 || w < 0) throw DimensionError("FeatureMap: negative dimension");
  }

  T& at(int c, int y, int x) {
    return data[(static_cast<size_t>(c) * height + y) * width + x];
  }
  const T& at(int c, int y, int x) const {
    return data[(static_cast<size_t>(c) * height + y) * width + x];
  }
  T* plane(int c) { return data.data() + static_cast<size_t>(c) * height * width; }
  const T* plane(int c) const { return data.data() + static_cast<size_t>(c) * height * width; }

  size_t size() const { return data.size(); }
  int cells() const { return height * width; }
  bool same_shape(const FeatureMap& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  double to_image_x(double grid_x) const { return grid_x * stride + origin; }
  double to_image_y(double grid_y) const { return grid_y * stride + origin; }
  double to_grid_x(double image_x) const { return (image_x - origin) / stride; }
  double to_grid_y(double image_y) const { return (image_y - origin) / stride; }
};

/// Row-major dense matrix; used for descriptor sets (N x D) and affinity
/// matrices (N1 x N2).
template <typename T>
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, T(0)) {
    if (r < 0 || c < 0) throw DimensionError("Matrix: negative dimension");
  }

  T& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  const T& at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
  T* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
  const T* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
  size_t size() const { return data.size(); }
};

/// Deterministic RNG. Wraps a 64-bit Mersenne twister with a Box-Muller
/// normal sampler so the stream does not depend on the standard library's
/// distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : seed_(seed), gen_(seed ^ 0x9e3779b97f4a7c15ull) {}

  uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int uniform_int(int lo, int hi) {  // inclusive range
    if (hi < lo) throw ArgumentError("Rng::uniform_int: empty range");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(gen_() % span);
  }

  double normal() {
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Derives an independent stream from the construction seed and a label;
  /// decouples e.g. dropout draws from tuple sampling so adding one consumer
  /// does not shift another.
  Rng fork(uint64_t label) const {
    uint64_t z = seed_ + 0x9e3779b97f4a7c15ull * (label + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return Rng(z ^ (z >> 31));
  }

 private:
  uint64_t seed_ = 0;
  std::mt19937_64 gen_;
};

template <typename T>
double l2_norm(const T* v, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += static_cast<double>(v[i]) * static_cast<double>(v[i]);
  return std::sqrt(s);
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
  for (T x : v)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

}  // namespace unifeat
