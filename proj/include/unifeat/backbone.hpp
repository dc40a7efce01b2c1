#pragma once

#include <functional>
#include <optional>

#include "unifeat/checkpoint.hpp"
#include "unifeat/image.hpp"
#include "unifeat/nn.hpp"

namespace unifeat {

enum class RunMode { train, test };

enum class FreezePolicy { freeze_b2b3, gradient_cut, none };

inline std::string to_string(FreezePolicy p) {
  switch (p) {
    case FreezePolicy::freeze_b2b3: return "freeze_b2b3";
    case FreezePolicy::gradient_cut: return "gradient_cut";
    default: return "none";
  }
}

inline FreezePolicy freeze_policy_from_string(const std::string& s) {
  if (s == "freeze_b2b3") return FreezePolicy::freeze_b2b3;
  if (s == "gradient_cut") return FreezePolicy::gradient_cut;
  if (s == "none") return FreezePolicy::none;
  throw ArgumentError("unknown freeze policy: " + s);
}

/// Residual backbone geometry. Stage block counts are configurable so small
/// test networks share the code path with the full 101-layer default; channel
/// widths follow the standard bottleneck design (expansion 4).
struct BackboneConfig {
  std::vector<int> stage_blocks = {3, 4, 23, 3};
  std::vector<int> stage_planes = {64, 128, 256, 512};
  int stem_channels = 64;

  static BackboneConfig resnet101() { return BackboneConfig{}; }
  static BackboneConfig small_test() { return BackboneConfig{{2, 2, 2, 2}, {64, 128, 256, 512}, 64}; }

  int block_channels(int stage) const { return stage_planes[static_cast<size_t>(stage)] * 4; }
};

/// Feature maps from the four residual blocks, all non-negative (taken after
/// the block's final ReLU). Strides in train mode are (4, 8, 16, 32); the
/// test-time dilation trick keeps B2 and B3 at stride 4 and B4 at stride 8.
template <typename T>
struct BlockFeatures {
  FeatureMap<T> c1, c2, c3, c4;

  const FeatureMap<T>& at(int i) const {
    switch (i) {
      case 0: return c1;
      case 1: return c2;
      case 2: return c3;
      default: return c4;
    }
  }
  FeatureMap<T>& at(int i) {
    switch (i) {
      case 0: return c1;
      case 1: return c2;
      case 2: return c3;
      default: return c4;
    }
  }
};

template <typename T>
struct FeaturePyramid {
  std::vector<FeatureMap<T>> levels;  // F1..F4, finest first
};

template <typename T>
struct ParamRef {
  std::string name;
  std::vector<T>* value;
  std::vector<T>* grad;  // nullptr for non-trainable buffers
  int stage;             // -1 stem, 0..3 residual stages, 4 heads/fpn
};

namespace detail {

/// Per-mode conv2 geometry of one bottleneck, following the standard
/// replace-stride-with-dilation construction so the test-mode output
/// subsampled back to the train grid computes the identical function.
struct BlockPlan {
  int train_stride = 1;
  int test_stride = 1;
  int test_dilation = 1;
};

}  // namespace detail

template <typename T>
struct BottleneckCache {
  FeatureMap<T> x, c1, a1, c2, a2, c3, down_out;
  FeatureMap<T> out;
};

template <typename T>
struct Bottleneck {
  Conv2d<T> conv1, conv2, conv3;
  BatchNorm<T> bn1, bn2, bn3;
  bool has_down = false;
  Conv2d<T> down_conv;
  BatchNorm<T> down_bn;
  detail::BlockPlan plan;

  Bottleneck(int in_ch, int planes, detail::BlockPlan p, bool downsample) : plan(p) {
    conv1 = Conv2d<T>(in_ch, planes, 1);
    bn1 = BatchNorm<T>(planes);
    conv2 = Conv2d<T>(planes, planes, 3, /*stride*/ 1, /*pad*/ 1);
    bn2 = BatchNorm<T>(planes);
    conv3 = Conv2d<T>(planes, planes * 4, 1);
    bn3 = BatchNorm<T>(planes * 4);
    has_down = downsample;
    if (downsample) {
      down_conv = Conv2d<T>(in_ch, planes * 4, 1);
      down_bn = BatchNorm<T>(planes * 4);
    }
  }

  FeatureMap<T> forward(const FeatureMap<T>& x, RunMode mode, BottleneckCache<T>* cache) const {
    int s = mode == RunMode::train ? plan.train_stride : plan.test_stride;
    int d = mode == RunMode::train ? 1 : plan.test_dilation;
    FeatureMap<T> c1o = conv1.forward(x);
    FeatureMap<T> a1 = bn1.forward(c1o);
    relu_inplace(a1);
    FeatureMap<T> c2o = conv2.forward(a1, s, d);
    FeatureMap<T> a2 = bn2.forward(c2o);
    relu_inplace(a2);
    FeatureMap<T> c3o = conv3.forward(a2);
    FeatureMap<T> out = bn3.forward(c3o);
    FeatureMap<T> down;
    if (has_down) {
      FeatureMap<T> dc = down_conv.forward(x, s, 1);
      down = down_bn.forward(dc);
      add_inplace(out, down);
      if (cache) cache->down_out = std::move(dc);
    } else {
      add_inplace(out, x);
    }
    relu_inplace(out);
    if (cache) {
      cache->x = x;
      cache->c1 = std::move(c1o);
      cache->a1 = std::move(a1);
      cache->c2 = std::move(c2o);
      cache->a2 = std::move(a2);
      cache->c3 = std::move(c3o);
      cache->out = out;
    }
    return out;
  }

  FeatureMap<T> backward(const FeatureMap<T>& dout, const BottleneckCache<T>& cache, RunMode mode) {
    int s = mode == RunMode::train ? plan.train_stride : plan.test_stride;
    int d = mode == RunMode::train ? 1 : plan.test_dilation;
    FeatureMap<T> dsum = relu_backward(cache.out, dout);
    FeatureMap<T> dc3 = bn3.backward(cache.c3, dsum);
    FeatureMap<T> da2;
    conv3.backward(cache.a2, dc3, &da2);
    FeatureMap<T> db2 = relu_backward(cache.a2, da2);
    FeatureMap<T> dc2 = bn2.backward(cache.c2, db2);
    FeatureMap<T> da1;
    conv2.backward(cache.a1, dc2, &da1, s, d);
    FeatureMap<T> db1 = relu_backward(cache.a1, da1);
    FeatureMap<T> dc1 = bn1.backward(cache.c1, db1);
    FeatureMap<T> dx;
    conv1.backward(cache.x, dc1, &dx);
    if (has_down) {
      FeatureMap<T> ddc = down_bn.backward(cache.down_out, dsum);
      FeatureMap<T> dskip;
      down_conv.backward(cache.x, ddc, &dskip, s, 1);
      add_inplace(dx, dskip);
    } else {
      add_inplace(dx, dsum);
    }
    return dx;
  }

  void visit(const std::string& prefix, int stage, const std::function<void(ParamRef<T>)>& fn,
             bool buffers) {
    auto conv = [&](const std::string& n, Conv2d<T>& c) {
      if (!buffers) {
        fn({n + ".weight", &c.w, &c.gw, stage});
        if (c.has_bias) fn({n + ".bias", &c.b, &c.gb, stage});
      }
    };
    auto bn = [&](const std::string& n, BatchNorm<T>& m) {
      if (buffers) {
        fn({n + ".running_mean", &m.running_mean, nullptr, stage});
        fn({n + ".running_var", &m.running_var, nullptr, stage});
      } else {
        fn({n + ".weight", &m.gamma, &m.g_gamma, stage});
        fn({n + ".bias", &m.beta, &m.g_beta, stage});
      }
    };
    conv(prefix + ".conv1", conv1);
    bn(prefix + ".bn1", bn1);
    conv(prefix + ".conv2", conv2);
    bn(prefix + ".bn2", bn2);
    conv(prefix + ".conv3", conv3);
    bn(prefix + ".bn3", bn3);
    if (has_down) {
      conv(prefix + ".downsample.0", down_conv);
      bn(prefix + ".downsample.1", down_bn);
    }
  }
};

template <typename T>
struct BackboneCache {
  RunMode mode = RunMode::train;
  int cache_from_stage = 0;  // 0 caches everything, 3 caches only the last stage
  FeatureMap<T> input, stem_conv, stem_act, pool_out;
  std::vector<int> pool_argmax;
  std::vector<BottleneckCache<T>> stage_blocks[4];
};

/// ImageNet-style per-channel input normalization.
inline constexpr double kInputMean[3] = {0.485, 0.456, 0.406};
inline constexpr double kInputStd[3] = {0.229, 0.224, 0.225};

template <typename T>
FeatureMap<T> normalize_input(const ImageTensor& img) {
  FeatureMap<T> x(3, img.height, img.width, 1.0, 0.0);
  for (int c = 0; c < 3; ++c) {
    const float* in = img.pixels.data() + static_cast<size_t>(c) * img.height * img.width;
    T* out = x.plane(c);
    for (int i = 0; i < img.height * img.width; ++i)
      out[i] = static_cast<T>((static_cast<double>(in[i]) - kInputMean[c]) / kInputStd[c]);
  }
  return x;
}

template <typename T>
class ResNetBackbone {
 public:
  ResNetBackbone() = default;

  explicit ResNetBackbone(const BackboneConfig& cfg) { build(cfg); }

  void build(const BackboneConfig& cfg) {
    if (cfg.stage_blocks.size() != 4 || cfg.stage_planes.size() != 4)
      throw ArgumentError("backbone: expected four stages");
    cfg_ = cfg;
    stem_ = Conv2d<T>(3, cfg.stem_channels, 7, 2, 3);
    stem_bn_ = BatchNorm<T>(cfg.stem_channels);
    int in_ch = cfg.stem_channels;
    // Test-mode dilation plan: stages 2 and 3 trade their stride for dilation
    // (stage 4 keeps stride 2 and inherits the accumulated dilation).
    const bool dilate_stage[4] = {false, true, true, false};
    int dilation = 1;
    for (int s = 0; s < 4; ++s) {
      int planes = cfg.stage_planes[static_cast<size_t>(s)];
      int stride = (s == 0) ? 1 : 2;
      int prev_dilation = dilation;
      int test_stride = stride;
      if (dilate_stage[s] && stride > 1) {
        dilation *= stride;
        test_stride = 1;
      }
      stages_[s].clear();
      for (int b = 0; b < cfg.stage_blocks[static_cast<size_t>(s)]; ++b) {
        detail::BlockPlan plan;
        plan.train_stride = (b == 0) ? stride : 1;
        plan.test_stride = (b == 0) ? test_stride : 1;
        plan.test_dilation = (b == 0) ? prev_dilation : dilation;
        bool down = (b == 0) && (stride != 1 || in_ch != planes * 4);
        stages_[s].emplace_back(in_ch, planes, plan, down);
        in_ch = planes * 4;
      }
    }
    loaded_ = false;
  }

  const BackboneConfig& config() const { return cfg_; }
  bool loaded() const { return loaded_; }
  void mark_loaded() { loaded_ = true; }

  void init_random(uint64_t seed) {
    Rng rng(seed);
    stem_.init_he(rng);
    for (int s = 0; s < 4; ++s)
      for (auto& block : stages_[s]) {
        block.conv1.init_he(rng);
        block.conv2.init_he(rng);
        block.conv3.init_he(rng);
        if (block.has_down) block.down_conv.init_he(rng);
        // damp each block's residual branch so deep random stacks keep
        // activations in a workable range
        for (T& g : block.bn3.gamma) g = static_cast<T>(0.5);
      }
    loaded_ = true;
  }

  /// Multi-level features from the four residual stages. Test mode activates
  /// the dilation trick so B2 and B3 come out at a shared stride of 4.
  BlockFeatures<T> extract_block_features(const ImageTensor& img, RunMode mode,
                                          BackboneCache<T>* cache = nullptr) const {
    validate_image(img);
    if (!loaded_) throw StateError("backbone weights not initialized");
    FeatureMap<T> x = normalize_input<T>(img);
    return forward_features(std::move(x), mode, cache);
  }

  BlockFeatures<T> forward_features(FeatureMap<T> x, RunMode mode,
                                    BackboneCache<T>* cache = nullptr) const {
    if (cache) cache->mode = mode;
    bool cache_stem = cache && cache->cache_from_stage <= 0;
    if (cache_stem) cache->input = x;
    FeatureMap<T> stem_out = stem_.forward(x);
    if (cache_stem) cache->stem_conv = stem_out;
    FeatureMap<T> act = stem_bn_.forward(stem_out);
    relu_inplace(act);
    if (cache_stem) cache->stem_act = act;
    FeatureMap<T> cur = maxpool(act, 3, 2, 1, cache_stem ? &cache->pool_argmax : nullptr);
    if (cache_stem) cache->pool_out = cur;

    BlockFeatures<T> blocks;
    for (int s = 0; s < 4; ++s) {
      bool cache_stage = cache && cache->cache_from_stage <= s;
      if (cache_stage) cache->stage_blocks[s].resize(stages_[s].size());
      for (size_t b = 0; b < stages_[s].size(); ++b) {
        auto* bc = cache_stage ? &cache->stage_blocks[s][b]
                               : static_cast<BottleneckCache<T>*>(nullptr);
        cur = stages_[s][b].forward(cur, mode, bc);
      }
      double stride = block_stride(s, mode);
      cur.stride = stride;
      cur.origin = stride * 0.5;  // center-of-cell convention
      blocks.at(s) = cur;
    }
    return blocks;
  }

  /// Runs a single residual stage (0-based) on a precomputed input; used when
  /// frozen lower stages are served from a cache. Fills the stage's block
  /// caches when a cache is provided.
  FeatureMap<T> forward_stage(int stage, const FeatureMap<T>& input, RunMode mode,
                              BackboneCache<T>* cache = nullptr) const {
    if (stage < 0 || stage > 3) throw ArgumentError("forward_stage: stage out of range");
    if (cache) {
      cache->mode = mode;
      cache->stage_blocks[stage].resize(stages_[stage].size());
    }
    FeatureMap<T> cur = input;
    for (size_t b = 0; b < stages_[stage].size(); ++b) {
      auto* bc = cache ? &cache->stage_blocks[stage][b] : static_cast<BottleneckCache<T>*>(nullptr);
      cur = stages_[stage][b].forward(cur, mode, bc);
    }
    double stride = block_stride(stage, mode);
    cur.stride = stride;
    cur.origin = stride * 0.5;
    return cur;
  }

  /// Backward from per-block gradients. Stage 4 always accumulates parameter
  /// gradients; earlier stages and the stem participate only when
  /// `through_all` is set (i.e. the backbone is not frozen through B3).
  void backward(const BlockFeatures<T>& dblocks, BackboneCache<T>& cache, bool through_all) {
    RunMode mode = cache.mode;
    FeatureMap<T> flow;  // gradient flowing into the output of the previous stage
    for (int s = 3; s >= 0; --s) {
      if (!through_all && s < 3) return;
      if (cache.stage_blocks[s].empty()) throw StateError("backbone backward: missing cache");
      FeatureMap<T> d = dblocks.at(s);
      if (flow.size() > 0) {
        if (d.size() == 0) d = std::move(flow);
        else add_inplace(d, flow);
      }
      if (d.size() == 0) {
        d = FeatureMap<T>(stages_[s].back().bn3.channels, cache.stage_blocks[s].back().out.height,
                          cache.stage_blocks[s].back().out.width);
      }
      for (int b = static_cast<int>(stages_[s].size()) - 1; b >= 0; --b)
        d = stages_[s][b].backward(d, cache.stage_blocks[s][static_cast<size_t>(b)], mode);
      flow = std::move(d);
    }
    // stem
    FeatureMap<T> dact = maxpool_backward(cache.stem_act, flow, cache.pool_argmax);
    dact = relu_backward(cache.stem_act, dact);
    FeatureMap<T> dconv = stem_bn_.backward(cache.stem_conv, dact);
    stem_.backward(cache.input, dconv, nullptr);
  }

  void visit_params(const std::function<void(ParamRef<T>)>& fn, bool buffers = false) {
    if (!buffers) {
      fn({"conv1.weight", &stem_.w, &stem_.gw, -1});
      fn({"bn1.weight", &stem_bn_.gamma, &stem_bn_.g_gamma, -1});
      fn({"bn1.bias", &stem_bn_.beta, &stem_bn_.g_beta, -1});
    } else {
      fn({"bn1.running_mean", &stem_bn_.running_mean, nullptr, -1});
      fn({"bn1.running_var", &stem_bn_.running_var, nullptr, -1});
    }
    for (int s = 0; s < 4; ++s)
      for (size_t b = 0; b < stages_[s].size(); ++b)
        stages_[s][b].visit("layer" + std::to_string(s + 1) + "." + std::to_string(b), s, fn,
                            buffers);
  }

  void zero_grad() {
    visit_params([](ParamRef<T> p) { std::fill(p.grad->begin(), p.grad->end(), T(0)); });
  }

  static double block_stride(int stage, RunMode mode) {
    static const double train_strides[4] = {4, 8, 16, 32};
    static const double test_strides[4] = {4, 4, 4, 8};
    return mode == RunMode::train ? train_strides[stage] : test_strides[stage];
  }

 private:
  BackboneConfig cfg_;
  Conv2d<T> stem_;
  BatchNorm<T> stem_bn_;
  std::vector<Bottleneck<T>> stages_[4];
  bool loaded_ = false;
};

/// Keeps the lateral convolutions' im2col buffers between a forward pass and
/// the matching backward pass.
template <typename T>
struct FpnColsCache {
  std::vector<T> cols[4];
};

/// Top-down pyramid: F4 = ReLU(Conv3x3(C4)); F_r = ReLU(Conv3x3(C_r) +
/// Upsample(F_{r+1})). Every level maps to a fixed channel width.
template <typename T>
class Fpn {
 public:
  Fpn() = default;

  Fpn(const BackboneConfig& cfg, int width) : width_(width) {
    for (int i = 0; i < 4; ++i)
      lateral_[i] = Conv2d<T>(cfg.block_channels(i), width, 3, 1, 1, 1, /*bias*/ true);
  }

  int width() const { return width_; }

  void init_random(uint64_t seed) {
    Rng rng(seed);
    for (auto& conv : lateral_) conv.init_he(rng);
  }

  FeaturePyramid<T> forward(const BlockFeatures<T>& blocks, FpnColsCache<T>* cols = nullptr) const {
    FeaturePyramid<T> pyr;
    pyr.levels.resize(4);
    for (int r = 3; r >= 0; --r) {
      FeatureMap<T> sum = lateral_[r].forward(blocks.at(r), 0, 0, cols ? &cols->cols[r] : nullptr);
      if (r < 3) {
        FeatureMap<T> up = upsample_bilinear(pyr.levels[static_cast<size_t>(r) + 1], sum.height,
                                             sum.width);
        if (!sum.same_shape(up)) throw DimensionError("fpn: upsample size mismatch");
        add_inplace(sum, up);
      }
      relu_inplace(sum);
      sum.stride = blocks.at(r).stride;
      sum.origin = blocks.at(r).origin;
      pyr.levels[static_cast<size_t>(r)] = std::move(sum);
    }
    return pyr;
  }

  /// Backward through the pyramid; accumulates lateral conv gradients and
  /// per-block input gradients for stages >= min_grad_stage (a frozen
  /// backbone only needs the stage-4 input gradient).
  void backward(const std::vector<FeatureMap<T>>& dpyr, const FeaturePyramid<T>& pyr,
                const BlockFeatures<T>& blocks, BlockFeatures<T>* dblocks,
                int min_grad_stage = 0, const FpnColsCache<T>* cols = nullptr) {
    std::vector<FeatureMap<T>> dlevels = dpyr;
    for (int r = 0; r < 4; ++r) {
      if (dlevels[static_cast<size_t>(r)].size() == 0) continue;
      FeatureMap<T> dsum = relu_backward(pyr.levels[static_cast<size_t>(r)],
                                         dlevels[static_cast<size_t>(r)]);
      if (r < 3) {
        const FeatureMap<T>& upper = pyr.levels[static_cast<size_t>(r) + 1];
        FeatureMap<T> dup = upsample_bilinear_backward(dsum, upper.height, upper.width);
        if (dlevels[static_cast<size_t>(r) + 1].size() == 0)
          dlevels[static_cast<size_t>(r) + 1] =
              FeatureMap<T>(upper.channels, upper.height, upper.width);
        add_inplace(dlevels[static_cast<size_t>(r) + 1], dup);
      }
      bool want_block_grad = dblocks && r >= min_grad_stage;
      FeatureMap<T> dblock;
      lateral_[r].backward(blocks.at(r), dsum, want_block_grad ? &dblock : nullptr, 0, 0,
                           cols ? &cols->cols[r] : nullptr);
      if (want_block_grad) {
        if (dblocks->at(r).size() == 0) dblocks->at(r) = std::move(dblock);
        else add_inplace(dblocks->at(r), dblock);
      }
    }
  }

  void visit_params(const std::function<void(ParamRef<T>)>& fn) {
    for (int i = 0; i < 4; ++i) {
      std::string n = "fpn.lateral" + std::to_string(i + 1);
      fn({n + ".weight", &lateral_[i].w, &lateral_[i].gw, 4});
      fn({n + ".bias", &lateral_[i].b, &lateral_[i].gb, 4});
    }
  }

  void zero_grad() {
    for (auto& conv : lateral_) conv.zero_grad();
  }

  /// Weight/gradient plumbing for worker copies used by parallel backward
  /// passes.
  void copy_weights_from(const Fpn& other) {
    for (int i = 0; i < 4; ++i) {
      lateral_[i].w = other.lateral_[i].w;
      lateral_[i].b = other.lateral_[i].b;
    }
  }

  void merge_grads_into(Fpn* other) const {
    for (int i = 0; i < 4; ++i) {
      for (size_t k = 0; k < lateral_[i].gw.size(); ++k)
        other->lateral_[i].gw[k] += lateral_[i].gw[k];
      for (size_t k = 0; k < lateral_[i].gb.size(); ++k)
        other->lateral_[i].gb[k] += lateral_[i].gb[k];
    }
  }

 private:
  Conv2d<T> lateral_[4];
  int width_ = 256;
};

/// Concatenated B2 || B3 local feature map. Test-mode maps are already
/// aligned by the dilation trick; train mode upsamples B3 to B2's grid.
template <typename T>
FeatureMap<T> concat_local_features(const BlockFeatures<T>& blocks, RunMode mode) {
  const FeatureMap<T>& b2 = blocks.c2;
  if (mode == RunMode::test) {
    if (b2.height != blocks.c3.height || b2.width != blocks.c3.width)
      throw DimensionError("concat_local_features: B2/B3 not aligned in test mode");
    FeatureMap<T> out = concat_channels(b2, blocks.c3);
    out.stride = b2.stride;
    out.origin = b2.origin;
    return out;
  }
  FeatureMap<T> up = upsample_bilinear(blocks.c3, b2.height, b2.width);
  FeatureMap<T> out = concat_channels(b2, up);
  out.stride = b2.stride;
  out.origin = b2.origin;
  return out;
}

}  // namespace unifeat
