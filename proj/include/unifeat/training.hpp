#pragma once

#include <map>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "unifeat/pipeline.hpp"

namespace unifeat {

constexpr int kTupleNegatives = 5;

/// One training sample: an anchor, a same-scene positive, and five images
/// from other scenes. This is the only supervision the trainer consumes.
struct TrainingTuple {
  std::string anchor;
  std::string positive;
  std::vector<std::string> negatives;
};

inline double lr_at_epoch(double base_lr, int epoch) {
  if (epoch < 0) throw ArgumentError("lr_at_epoch: negative epoch");
  return base_lr * std::exp(-0.1 * epoch);
}

/// Draws `epoch_size` tuples: a uniformly chosen manifest pair plus five
/// negatives drawn from the images of other scenes (without replacement when
/// the pool allows). Deterministic under the seed.
inline std::vector<TrainingTuple> sample_tuples(const std::vector<ManifestRecord>& manifest,
                                                int epoch_size, uint64_t seed) {
  if (manifest.empty()) throw ArgumentError("sample_tuples: empty manifest");
  std::unordered_set<std::string> scenes;
  for (const ManifestRecord& r : manifest) scenes.insert(r.scene);
  if (scenes.size() < 2)
    throw ArgumentError("sample_tuples: need at least two scenes for negatives");

  Rng rng(seed);
  std::vector<TrainingTuple> out;
  out.reserve(static_cast<size_t>(epoch_size));
  for (int t = 0; t < epoch_size; ++t) {
    const ManifestRecord& rec =
        manifest[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(manifest.size()) - 1))];
    TrainingTuple tuple;
    tuple.anchor = rec.anchor;
    tuple.positive = rec.positive;
    std::vector<const std::string*> pool;
    for (const ManifestRecord& r : manifest) {
      if (r.scene == rec.scene) continue;
      pool.push_back(&r.anchor);
      pool.push_back(&r.positive);
    }
    if (static_cast<int>(pool.size()) >= kTupleNegatives) {
      // partial Fisher-Yates: five distinct draws
      for (int k = 0; k < kTupleNegatives; ++k) {
        int j = rng.uniform_int(k, static_cast<int>(pool.size()) - 1);
        std::swap(pool[static_cast<size_t>(k)], pool[static_cast<size_t>(j)]);
        tuple.negatives.push_back(*pool[static_cast<size_t>(k)]);
      }
    } else {
      for (int k = 0; k < kTupleNegatives; ++k)
        tuple.negatives.push_back(
            *pool[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))]);
    }
    out.push_back(std::move(tuple));
  }
  return out;
}

/// Adam with frozen-aware per-parameter state, keyed by parameter name so
/// checkpoints can carry the moments.
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.99, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(double lr, const std::vector<ParamRef<float>>& params) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const ParamRef<float>& p : params) {
      std::vector<float>& m = m_[p.name];
      std::vector<float>& v = v_[p.name];
      if (m.size() != p.value->size()) m.assign(p.value->size(), 0.f);
      if (v.size() != p.value->size()) v.assign(p.value->size(), 0.f);
      for (size_t i = 0; i < p.value->size(); ++i) {
        double g = static_cast<double>((*p.grad)[i]);
        double mi = beta1_ * m[i] + (1.0 - beta1_) * g;
        double vi = beta2_ * v[i] + (1.0 - beta2_) * g * g;
        m[i] = static_cast<float>(mi);
        v[i] = static_cast<float>(vi);
        (*p.value)[i] -= static_cast<float>(lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps_));
      }
    }
  }

  int64_t t() const { return t_; }
  void set_t(int64_t t) { t_ = t; }

  void export_state(Checkpoint* ckpt) const {
    for (const auto& [name, m] : m_)
      ckpt->tensors.push_back({"adam.m:" + name, {static_cast<int>(m.size())}, m});
    for (const auto& [name, v] : v_)
      ckpt->tensors.push_back({"adam.v:" + name, {static_cast<int>(v.size())}, v});
  }

  void import_state(const Checkpoint& ckpt) {
    m_.clear();
    v_.clear();
    for (const TensorEntry& t : ckpt.tensors) {
      if (t.name.rfind("adam.m:", 0) == 0) m_[t.name.substr(7)] = t.data;
      else if (t.name.rfind("adam.v:", 0) == 0) v_[t.name.substr(7)] = t.data;
    }
  }

 private:
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::map<std::string, std::vector<float>> m_, v_;
};

/// Loads and resizes tuple images once per resolution.
class ImageCache {
 public:
  const ImageTensor& get(const std::string& path, int resolution) {
    std::string key = path + "#" + std::to_string(resolution);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    ImageTensor img = load_image(path);
    if (img.height != resolution || img.width != resolution)
      img = resize_image(img, resolution, resolution);
    return cache_.emplace(std::move(key), std::move(img)).first->second;
  }

 private:
  std::map<std::string, ImageTensor> cache_;
};

struct StepRecord {
  int64_t step = 0;
  LossBreakdown loss;
};

/// Joint trainer: forwards the two-branch network over every tuple image,
/// evaluates the combined objective, backpropagates through the trainable
/// parts per the freeze policy, and applies Adam updates on the decayed
/// learning-rate schedule.
class Trainer {
 public:
  Trainer(Model<float>* model, const RunConfig& cfg)
      : model_(model), cfg_(cfg), policy_(freeze_policy_from_string(cfg.freeze_policy)),
        dropout_rng_(Rng(cfg.seed).fork(0x9d0f)) {
    cfg_.validate();
    loss_cfg_.margin_m = cfg.margin;
    loss_cfg_.margin_tau = cfg.tau;
    loss_cfg_.lambda = cfg.lambda;
  }

  FreezePolicy policy() const { return policy_; }
  int epoch() const { return epoch_; }
  void set_epoch(int e) { epoch_ = e; }
  int64_t global_step() const { return global_step_; }
  Adam& adam() { return adam_; }

  std::vector<ParamRef<float>> trainable_params() {
    std::vector<ParamRef<float>> out;
    model_->visit_params([&](ParamRef<float> p) {
      if (policy_ == FreezePolicy::freeze_b2b3 && p.stage < 3) return;
      out.push_back(p);
    });
    return out;
  }

  /// One optimizer step over a batch of tuples; returns the batch-mean loss.
  LossBreakdown step(const std::vector<TrainingTuple>& batch, ImageCache& images) {
    if (batch.empty()) throw ArgumentError("trainer: empty batch");
    model_->zero_grad();
    LossBreakdown mean;
    const double inv_batch = 1.0 / batch.size();
    const bool frozen_path = policy_ == FreezePolicy::freeze_b2b3 && cfg_.location_cap == 0;
    if (frozen_path) {
      mean = batch_forward_backward_frozen(batch, images, inv_batch);
    } else {
      for (const TrainingTuple& tuple : batch) {
        LossBreakdown one = tuple_forward_backward(tuple, images, inv_batch);
        if (!std::isfinite(one.total)) throw StateError(non_finite_dump(tuple, one));
        mean.lm_b2 += one.lm_b2 * inv_batch;
        mean.lm_b3 += one.lm_b3 * inv_batch;
        mean.lm_student += one.lm_student * inv_batch;
        mean.lc += one.lc * inv_batch;
        mean.ldis += one.ldis * inv_batch;
      }
    }
    mean.total = mean.lm_b2 + mean.lm_b3 + mean.lm_student + mean.lc + cfg_.lambda * mean.ldis;
    if (!std::isfinite(mean.total))
      throw StateError(non_finite_dump(batch.front(), mean));
    auto params = trainable_params();
    adam_.step(lr_at_epoch(cfg_.lr, epoch_), params);
    ++global_step_;
    return mean;
  }

  /// Epoch-driven loop. Writes one checkpoint per epoch into out_dir (when
  /// non-empty) and appends per-step loss lines to `log`. `max_steps` of 0
  /// runs cfg.epochs epochs.
  std::vector<StepRecord> run(const std::vector<ManifestRecord>& manifest,
                              const std::string& out_dir, int64_t max_steps = 0,
                              std::ostream* log = nullptr) {
    ImageCache images;
    std::vector<StepRecord> records;
    if (log && global_step_ == 0)
      *log << "step,lm_b2,lm_b3,lm_student,lc,ldis,total\n";
    for (; epoch_ < cfg_.epochs; ) {
      // per-epoch streams so a run resumed at an epoch boundary reproduces an
      // uninterrupted run exactly
      dropout_rng_ = Rng(cfg_.seed).fork(7000 + static_cast<uint64_t>(epoch_));
      std::vector<TrainingTuple> tuples =
          sample_tuples(manifest, cfg_.tuples_per_epoch, Rng(cfg_.seed).fork(100 + epoch_).next_u64());
      for (size_t start = 0; start < tuples.size(); start += static_cast<size_t>(cfg_.batch_tuples)) {
        std::vector<TrainingTuple> batch(
            tuples.begin() + static_cast<std::ptrdiff_t>(start),
            tuples.begin() + static_cast<std::ptrdiff_t>(
                                 std::min(tuples.size(), start + static_cast<size_t>(cfg_.batch_tuples))));
        LossBreakdown loss = step(batch, images);
        records.push_back({global_step_, loss});
        if (log) {
          char buf[200];
          std::snprintf(buf, sizeof(buf), "%lld,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                        static_cast<long long>(global_step_), loss.lm_b2, loss.lm_b3,
                        loss.lm_student, loss.lc, loss.ldis, loss.total);
          *log << buf;
        }
        if (max_steps > 0 && global_step_ >= max_steps) {
          ++epoch_;
          if (!out_dir.empty()) save(out_dir);
          return records;
        }
      }
      ++epoch_;
      if (!out_dir.empty()) save(out_dir);
    }
    return records;
  }

  void save(const std::string& out_dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    char name[64];
    std::snprintf(name, sizeof(name), "epoch_%04d.ckpt", epoch_);
    save_checkpoint_file((fs::path(out_dir) / name).string());
  }

  void save_checkpoint_file(const std::string& path) const {
    nlohmann::json tmeta{{"epoch", epoch_},
                         {"adam_t", adam_.t()},
                         {"global_step", global_step_},
                         {"freeze_policy", cfg_.freeze_policy}};
    Checkpoint ckpt = make_model_checkpoint(*model_, tmeta);
    adam_.export_state(&ckpt);
    save_checkpoint(ckpt, path);
  }

  /// Restores optimizer state and the epoch counter from a model checkpoint
  /// (the model tensors themselves come from load_model_checkpoint).
  void restore(const Checkpoint& ckpt) {
    nlohmann::json tmeta = ckpt.meta.value("training", nlohmann::json::object());
    epoch_ = tmeta.value("epoch", 0);
    global_step_ = tmeta.value("global_step", static_cast<int64_t>(0));
    adam_.set_t(tmeta.value("adam_t", static_cast<int64_t>(0)));
    adam_.import_state(ckpt);
  }

 private:
  struct FamilyGrads {
    std::vector<Matrix<float>> desc;   // normalized grid descriptors per image
    std::vector<Matrix<float>> ddesc;  // accumulated gradients
    Matrix<float> m_ap;                // cached anchor/positive affinity
    double loss = 0;
  };

  /// Margin loss over one map family; fills normalized descriptors, their
  /// gradient accumulators, and caches the (a, p) affinity matrix.
  FamilyGrads family_forward_backward(const std::vector<const FeatureMap<float>*>& maps,
                                      double grad_scale, bool want_grads) {
    FamilyGrads fam;
    const size_t n = maps.size();
    fam.desc.resize(n);
    std::vector<std::vector<int>> selection(n);
    for (size_t i = 0; i < n; ++i) {
      fam.desc[i] = map_descriptors(*maps[i]);
      if (cfg_.location_cap > 0 && fam.desc[i].rows > cfg_.location_cap)
        fam.desc[i] = select_top_rows(*maps[i], fam.desc[i], cfg_.location_cap, &selection[i]);
    }
    if (want_grads) {
      fam.ddesc.resize(n);
      for (size_t i = 0; i < n; ++i) fam.ddesc[i] = Matrix<float>(fam.desc[i].rows, fam.desc[i].cols);
    }
    float s_ap = 0;
    std::vector<float> s_an;
    std::vector<std::vector<int>> row_args(n), col_args(n);
    for (size_t j = 1; j < n; ++j) {
      Matrix<float> m = affinity_matrix(fam.desc[0], fam.desc[j]);
      float s = affinity_score_argmax(m, &row_args[j], &col_args[j]);
      if (j == 1) {
        s_ap = s;
        fam.m_ap = std::move(m);
      } else {
        s_an.push_back(s);
      }
    }
    float d_ap = 0;
    std::vector<float> d_an;
    fam.loss = matching_margin_loss_grad(s_ap, s_an, cfg_.margin, &d_ap, &d_an);
    if (want_grads) {
      accumulate_score_grad(fam, 0, 1, row_args[1], col_args[1], d_ap * grad_scale);
      for (size_t j = 2; j < n; ++j)
        accumulate_score_grad(fam, 0, j, row_args[j], col_args[j], d_an[j - 2] * grad_scale);
      // scatter capped gradients back to full grids
      for (size_t i = 0; i < n; ++i) {
        if (selection[i].empty()) continue;
        Matrix<float> full(maps[i]->cells(), maps[i]->channels);
        Matrix<float> full_desc = map_descriptors(*maps[i]);
        for (size_t r = 0; r < selection[i].size(); ++r)
          for (int c = 0; c < full.cols; ++c)
            full.at(selection[i][r], c) = fam.ddesc[i].at(static_cast<int>(r), c);
        fam.ddesc[i] = std::move(full);
        fam.desc[i] = std::move(full_desc);
      }
    }
    return fam;
  }

  /// ds/dD for the row/col max score of pair (i0, j0), scaled by `w`.
  void accumulate_score_grad(FamilyGrads& fam, size_t i0, size_t j0, const std::vector<int>& row_arg,
                             const std::vector<int>& col_arg, double w) {
    if (w == 0.0) return;
    Matrix<float>& d0 = fam.ddesc[i0];
    Matrix<float>& d1 = fam.ddesc[j0];
    const Matrix<float>& a = fam.desc[i0];
    const Matrix<float>& b = fam.desc[j0];
    const double rw = w / (2.0 * a.rows);
    const double cw = w / (2.0 * b.rows);
    for (int i = 0; i < a.rows; ++i) {
      int j = row_arg[static_cast<size_t>(i)];
      add_scaled(d0.row(i), b.row(j), rw, a.cols);
      add_scaled(d1.row(j), a.row(i), rw, a.cols);
    }
    for (int j = 0; j < b.rows; ++j) {
      int i = col_arg[static_cast<size_t>(j)];
      add_scaled(d0.row(i), b.row(j), cw, a.cols);
      add_scaled(d1.row(j), a.row(i), cw, a.cols);
    }
  }

  static void add_scaled(float* dst, const float* src, double w, int n) {
    for (int i = 0; i < n; ++i) dst[i] += static_cast<float>(w * src[i]);
  }

  static Matrix<float> select_top_rows(const FeatureMap<float>& map, const Matrix<float>& desc,
                                       int cap, std::vector<int>* selection) {
    std::vector<std::pair<double, int>> scored(static_cast<size_t>(map.cells()));
    for (int s = 0; s < map.cells(); ++s) {
      double norm2 = 0;
      for (int c = 0; c < map.channels; ++c) {
        double v = map.data[static_cast<size_t>(c) * map.cells() + s];
        norm2 += v * v;
      }
      scored[static_cast<size_t>(s)] = {-norm2, s};  // descending by norm, stable by index
    }
    std::sort(scored.begin(), scored.end());
    selection->resize(static_cast<size_t>(cap));
    Matrix<float> out(cap, desc.cols);
    for (int r = 0; r < cap; ++r) {
      int s = scored[static_cast<size_t>(r)].second;
      (*selection)[static_cast<size_t>(r)] = s;
      std::copy(desc.row(s), desc.row(s) + desc.cols, out.row(r));
    }
    return out;
  }

  // ---------------------------------------------------------------------
  // Frozen fast path. Under freeze_b2b3 everything through B3 is constant
  // for the whole run, so per-image block features, teacher maps, detection
  // scores and per-pair B2/B3 affinity scores are computed once and reused.
  // ---------------------------------------------------------------------

  struct FrozenImage {
    FeatureMap<float> c1, c2, c3;
    FeatureMap<float> teacher;
    Matrix<float> teacher_desc;
    Matrix<float> b2_desc, b3_desc;
    FeatureMap<float> det;  // soft detection scores (values only; never backpropagated)
  };

  const FrozenImage& frozen_image(const std::string& path, ImageCache& images) {
    auto it = frozen_images_.find(path);
    if (it != frozen_images_.end()) return it->second;
    FrozenImage fz;
    BlockFeatures<float> blocks = model_->backbone.extract_block_features(
        images.get(path, cfg_.train_resolution), RunMode::train);
    fz.teacher = concat_local_features(blocks, RunMode::train);
    fz.teacher_desc = map_descriptors(fz.teacher);
    fz.b2_desc = map_descriptors(blocks.c2);
    fz.b3_desc = map_descriptors(blocks.c3);
    if (cfg_.lambda != 0.0) fz.det = soft_detection(fz.teacher, loss_cfg_.soft_window);
    fz.c1 = std::move(blocks.c1);
    fz.c2 = std::move(blocks.c2);
    fz.c3 = std::move(blocks.c3);
    return frozen_images_.emplace(path, std::move(fz)).first->second;
  }

  double frozen_pair_score(int family, const std::string& a, const std::string& b,
                           ImageCache& images) {
    std::string key = a + "\x1f" + b;
    auto it = pair_scores_[family].find(key);
    if (it != pair_scores_[family].end()) return it->second;
    const FrozenImage& fa = frozen_image(a, images);
    const FrozenImage& fb = frozen_image(b, images);
    const Matrix<float>& da = family == 0 ? fa.b2_desc : fa.b3_desc;
    const Matrix<float>& db = family == 0 ? fb.b2_desc : fb.b3_desc;
    double s = static_cast<double>(affinity_score(affinity_matrix(da, db)));
    pair_scores_[family].emplace(std::move(key), s);
    return s;
  }

  const Matrix<float>& frozen_m_high(const std::string& a, const std::string& p,
                                     ImageCache& images) {
    std::string key = a + "\x1f" + p;
    auto it = m_high_cache_.find(key);
    if (it != m_high_cache_.end()) return it->second;
    Matrix<float> m = affinity_matrix(frozen_image(a, images).teacher_desc,
                                      frozen_image(p, images).teacher_desc);
    return m_high_cache_.emplace(std::move(key), std::move(m)).first->second;
  }

  /// Whole-batch frozen-path step. Tuples in a batch share images, so each
  /// unique image runs the trainable forward/backward once; per-tuple losses
  /// only combine per-image results. The dropout mask is drawn once per
  /// optimizer step.
  LossBreakdown batch_forward_backward_frozen(const std::vector<TrainingTuple>& batch,
                                              ImageCache& images, double inv_batch) {
    refresh_fpn_workers();
    Dropout2dMask mask;
    const bool use_mask = cfg_.drop_prob > 0.0;
    if (use_mask) mask = make_dropout2d_mask(model_->teacher_dim(), cfg_.drop_prob, dropout_rng_);

    // unique images in first-appearance order
    std::vector<std::string> paths;
    std::map<std::string, int> slot_of;
    auto slot = [&](const std::string& p) {
      auto it = slot_of.find(p);
      if (it != slot_of.end()) return it->second;
      int s = static_cast<int>(paths.size());
      paths.push_back(p);
      slot_of.emplace(p, s);
      return s;
    };
    struct TupleSlots {
      int anchor, positive;
      std::vector<int> negatives;
    };
    std::vector<TupleSlots> tuples;
    for (const TrainingTuple& t : batch) {
      if (t.negatives.empty()) throw ArgumentError("trainer: tuple without negatives");
      TupleSlots ts{slot(t.anchor), slot(t.positive), {}};
      for (const std::string& neg : t.negatives) ts.negatives.push_back(slot(neg));
      tuples.push_back(std::move(ts));
    }
    const size_t n = paths.size();

    std::vector<const FrozenImage*> fz(n);
    for (size_t i = 0; i < n; ++i) fz[i] = &frozen_image(paths[i], images);  // serial cache fill

    // trainable forward, once per unique image
    std::vector<BackboneCache<float>> bcache(n);
    std::vector<BlockFeatures<float>> blocks(n);
    std::vector<FeatureMap<float>> student(n);
    std::vector<Matrix<float>> sdesc(n), sddesc(n);
    std::vector<FeaturePyramid<float>> pyr(n);
    std::vector<FpnColsCache<float>> fpn_cols(n);
    std::vector<GlobalDescCache<float>> gcache(n);
    std::vector<GlobalDescriptor<float>> globals(n);
    std::vector<std::vector<float>> dglobals(n);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < static_cast<int>(n); ++i) {
      bcache[i].cache_from_stage = 3;
      blocks[i].c1 = fz[i]->c1;
      blocks[i].c2 = fz[i]->c2;
      blocks[i].c3 = fz[i]->c3;
      blocks[i].c4 = model_->backbone.forward_stage(3, fz[i]->c3, RunMode::train, &bcache[i]);
      student[i] = reduce_dim(fz[i]->teacher, model_->head, use_mask ? &mask : nullptr);
      sdesc[i] = map_descriptors(student[i]);
      sddesc[i] = Matrix<float>(sdesc[i].rows, sdesc[i].cols);
      pyr[i] = model_->fpn.forward(blocks[i], &fpn_cols[i]);
      globals[i] = global_descriptor(pyr[i].levels, cfg_.gem_p, &gcache[i]);
      dglobals[i].assign(globals[i].v.size(), 0.f);
    }

    // per-tuple losses; gradients accumulate into the per-image buffers
    LossBreakdown mean;
    std::vector<Matrix<float>> sddesc_dis(n);  // distillation student grads, cut from the teacher
    for (const TupleSlots& t : tuples) {
      for (int family : {0, 1}) {
        double s_ap = frozen_pair_score(family, paths[static_cast<size_t>(t.anchor)],
                                        paths[static_cast<size_t>(t.positive)], images);
        std::vector<double> s_an;
        for (int neg : t.negatives)
          s_an.push_back(frozen_pair_score(family, paths[static_cast<size_t>(t.anchor)],
                                           paths[static_cast<size_t>(neg)], images));
        double loss = matching_margin_loss(s_ap, s_an, cfg_.margin);
        (family == 0 ? mean.lm_b2 : mean.lm_b3) += loss * inv_batch;
      }

      // student margin over this tuple's slots
      std::vector<int> slots{t.anchor, t.positive};
      slots.insert(slots.end(), t.negatives.begin(), t.negatives.end());
      float s_ap = 0;
      std::vector<float> s_an;
      std::vector<std::vector<int>> row_args(slots.size()), col_args(slots.size());
      Matrix<float> m_ap;
      for (size_t j = 1; j < slots.size(); ++j) {
        Matrix<float> m = affinity_matrix(sdesc[static_cast<size_t>(slots[0])],
                                          sdesc[static_cast<size_t>(slots[j])]);
        float s = affinity_score_argmax(m, &row_args[j], &col_args[j]);
        if (j == 1) {
          s_ap = s;
          m_ap = std::move(m);
        } else {
          s_an.push_back(s);
        }
      }
      float d_ap = 0;
      std::vector<float> d_an;
      mean.lm_student +=
          static_cast<double>(matching_margin_loss_grad(s_ap, s_an, cfg_.margin, &d_ap, &d_an)) *
          inv_batch;
      accumulate_pair_score_grad(sdesc, sddesc, slots[0], slots[1], row_args[1], col_args[1],
                                 d_ap * inv_batch);
      for (size_t j = 2; j < slots.size(); ++j)
        accumulate_pair_score_grad(sdesc, sddesc, slots[0], slots[static_cast<size_t>(j)],
                                   row_args[j], col_args[j], d_an[j - 2] * inv_batch);

      // distillation on the positive pair
      if (cfg_.lambda != 0.0) {
        const Matrix<float>& m_high = frozen_m_high(paths[static_cast<size_t>(t.anchor)],
                                                    paths[static_cast<size_t>(t.positive)], images);
        Matrix<float> dm_low;
        mean.ldis += static_cast<double>(distillation_loss_grad(
                         m_high, fz[static_cast<size_t>(t.anchor)]->det,
                         fz[static_cast<size_t>(t.positive)]->det, m_ap, &dm_low)) *
                     inv_batch;
        const double w = cfg_.lambda * inv_batch;
        for (int s : {t.anchor, t.positive})
          if (sddesc_dis[static_cast<size_t>(s)].rows == 0)
            sddesc_dis[static_cast<size_t>(s)] =
                Matrix<float>(sdesc[static_cast<size_t>(s)].rows, sdesc[static_cast<size_t>(s)].cols);
        ConstMatMap<float> dml(dm_low.data.data(), dm_low.rows, dm_low.cols);
        const Matrix<float>& a = sdesc[static_cast<size_t>(t.anchor)];
        const Matrix<float>& p = sdesc[static_cast<size_t>(t.positive)];
        ConstMatMap<float> am(a.data.data(), a.rows, a.cols);
        ConstMatMap<float> pm(p.data.data(), p.rows, p.cols);
        Matrix<float>& ga = sddesc_dis[static_cast<size_t>(t.anchor)];
        Matrix<float>& gp = sddesc_dis[static_cast<size_t>(t.positive)];
        MatMap<float> gam(ga.data.data(), ga.rows, ga.cols);
        MatMap<float> gpm(gp.data.data(), gp.rows, gp.cols);
        gam.noalias() += static_cast<float>(w) * (dml * pm);
        gpm.noalias() += static_cast<float>(w) * (dml.transpose() * am);
      }

      // contrastive global term
      std::vector<float> da, db;
      mean.lc += static_cast<double>(contrastive_loss_grad(
                     globals[static_cast<size_t>(t.anchor)].v,
                     globals[static_cast<size_t>(t.positive)].v, 1, cfg_.tau, &da, &db)) *
                 inv_batch;
      axpy(dglobals[static_cast<size_t>(t.anchor)], da, inv_batch);
      axpy(dglobals[static_cast<size_t>(t.positive)], db, inv_batch);
      for (int neg : t.negatives) {
        mean.lc += static_cast<double>(contrastive_loss_grad(
                       globals[static_cast<size_t>(t.anchor)].v,
                       globals[static_cast<size_t>(neg)].v, 0, cfg_.tau, &da, &db)) *
                   inv_batch;
        axpy(dglobals[static_cast<size_t>(t.anchor)], da, inv_batch);
        axpy(dglobals[static_cast<size_t>(neg)], db, inv_batch);
      }
    }

    // backward, once per unique image
    std::vector<BlockFeatures<float>> dblocks(n);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < static_cast<int>(n); ++i) {
      std::vector<FeatureMap<float>> dlevels = global_descriptor_backward(
          pyr[i].levels, cfg_.gem_p, globals[i], gcache[i], dglobals[i]);
      Fpn<float>& worker = fpn_workers_[static_cast<size_t>(worker_index())];
      worker.backward(dlevels, pyr[i], blocks[i], &dblocks[i], /*min_grad_stage=*/3,
                      &fpn_cols[i]);
    }
    for (size_t i = 0; i < n; ++i) {
      FeatureMap<float> dstudent_map = map_descriptors_backward(student[i], sdesc[i], sddesc[i]);
      reduce_dim_backward(fz[i]->teacher, model_->head, use_mask ? &mask : nullptr, dstudent_map,
                          /*want_input_grad=*/false);
      if (sddesc_dis[i].rows > 0) {
        FeatureMap<float> dstudent_dis =
            map_descriptors_backward(student[i], sdesc[i], sddesc_dis[i]);
        reduce_dim_backward(fz[i]->teacher, model_->head, use_mask ? &mask : nullptr, dstudent_dis,
                            /*want_input_grad=*/false);
      }
      model_->backbone.backward(dblocks[i], bcache[i], /*through_all=*/false);
    }
    for (Fpn<float>& worker : fpn_workers_) worker.merge_grads_into(&model_->fpn);
    return mean;
  }

  /// ds/dD for one scored pair, into per-image gradient accumulators.
  void accumulate_pair_score_grad(const std::vector<Matrix<float>>& desc,
                                  std::vector<Matrix<float>>& ddesc, int i0, int j0,
                                  const std::vector<int>& row_arg, const std::vector<int>& col_arg,
                                  double w) {
    if (w == 0.0) return;
    const Matrix<float>& a = desc[static_cast<size_t>(i0)];
    const Matrix<float>& b = desc[static_cast<size_t>(j0)];
    Matrix<float>& d0 = ddesc[static_cast<size_t>(i0)];
    Matrix<float>& d1 = ddesc[static_cast<size_t>(j0)];
    const double rw = w / (2.0 * a.rows);
    const double cw = w / (2.0 * b.rows);
    for (int i = 0; i < a.rows; ++i) {
      int j = row_arg[static_cast<size_t>(i)];
      add_scaled(d0.row(i), b.row(j), rw, a.cols);
      add_scaled(d1.row(j), a.row(i), rw, a.cols);
    }
    for (int j = 0; j < b.rows; ++j) {
      int i = col_arg[static_cast<size_t>(j)];
      add_scaled(d0.row(i), b.row(j), cw, a.cols);
      add_scaled(d1.row(j), a.row(i), cw, a.cols);
    }
  }

  static int worker_index() {
#ifdef _OPENMP
    return omp_get_thread_num();
#else
    return 0;
#endif
  }

  static int worker_count() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
  }

  void refresh_fpn_workers() {
    if (fpn_workers_.empty())
      fpn_workers_.assign(static_cast<size_t>(worker_count()),
                          Fpn<float>(model_->backbone.config(), model_->fpn.width()));
    for (Fpn<float>& worker : fpn_workers_) {
      worker.copy_weights_from(model_->fpn);
      worker.zero_grad();
    }
  }

  LossBreakdown tuple_forward_backward(const TrainingTuple& tuple, ImageCache& images,
                                       double inv_batch) {
    if (static_cast<int>(tuple.negatives.size()) < 1)
      throw ArgumentError("trainer: tuple without negatives");
    const size_t n = 2 + tuple.negatives.size();
    std::vector<const ImageTensor*> imgs;
    imgs.push_back(&images.get(tuple.anchor, cfg_.train_resolution));
    imgs.push_back(&images.get(tuple.positive, cfg_.train_resolution));
    for (const std::string& neg : tuple.negatives)
      imgs.push_back(&images.get(neg, cfg_.train_resolution));

    const bool through_all = policy_ != FreezePolicy::freeze_b2b3;
    const bool teacher_dis_grads = policy_ == FreezePolicy::none && cfg_.lambda != 0.0;

    // forward: backbone, teacher/student maps, FPN + global descriptors
    std::vector<BackboneCache<float>> bcache(n);
    std::vector<BlockFeatures<float>> blocks(n);
    std::vector<FeatureMap<float>> teacher(n), student(n);
    std::vector<FeaturePyramid<float>> pyr(n);
    std::vector<GlobalDescCache<float>> gcache(n);
    std::vector<GlobalDescriptor<float>> globals(n);

    Dropout2dMask mask;
    const bool use_mask = cfg_.drop_prob > 0.0;
    if (use_mask)
      mask = make_dropout2d_mask(model_->teacher_dim(), cfg_.drop_prob, dropout_rng_);

    for (size_t i = 0; i < n; ++i) {
      bcache[i].cache_from_stage = through_all ? 0 : 3;
      blocks[i] = model_->backbone.extract_block_features(*imgs[i], RunMode::train, &bcache[i]);
      teacher[i] = concat_local_features(blocks[i], RunMode::train);
      student[i] = reduce_dim(teacher[i], model_->head, use_mask ? &mask : nullptr);
      pyr[i] = model_->fpn.forward(blocks[i]);
      globals[i] = global_descriptor(pyr[i].levels, cfg_.gem_p, &gcache[i]);
    }

    LossBreakdown out;

    // margin families
    auto family_maps = [&](auto getter) {
      std::vector<const FeatureMap<float>*> maps(n);
      for (size_t i = 0; i < n; ++i) maps[i] = getter(i);
      return maps;
    };
    FamilyGrads fam_b2 = family_forward_backward(
        family_maps([&](size_t i) { return &blocks[i].c2; }), inv_batch, through_all);
    FamilyGrads fam_b3 = family_forward_backward(
        family_maps([&](size_t i) { return &blocks[i].c3; }), inv_batch, through_all);
    FamilyGrads fam_student = family_forward_backward(
        family_maps([&](size_t i) { return &student[i]; }), inv_batch, true);
    out.lm_b2 = fam_b2.loss;
    out.lm_b3 = fam_b3.loss;
    out.lm_student = fam_student.loss;

    // distillation on the positive pair; its student-side gradients stay in
    // their own accumulators so the gradient-cut policy can stop them at the
    // reduction input
    std::vector<Matrix<float>> dteacher_desc(2);
    std::vector<Matrix<float>> ddesc_dis(2);
    FeatureMap<float> ddet_a, ddet_p;
    SoftDetectionCache<float> sdc_a, sdc_p;
    std::vector<Matrix<float>> teacher_desc(2);
    FeatureMap<float> det_a, det_p;
    if (cfg_.lambda != 0.0) {
      teacher_desc[0] = map_descriptors(teacher[0]);
      teacher_desc[1] = map_descriptors(teacher[1]);
      Matrix<float> m_high = affinity_matrix(teacher_desc[0], teacher_desc[1]);
      det_a = soft_detection(teacher[0], loss_cfg_.soft_window, &sdc_a);
      det_p = soft_detection(teacher[1], loss_cfg_.soft_window, &sdc_p);
      const Matrix<float>& m_low =
          (cfg_.location_cap > 0) ? affinity_matrix(fam_student.desc[0], fam_student.desc[1])
                                  : fam_student.m_ap;
      Matrix<float> dm_low, dm_high;
      out.ldis = distillation_loss_grad(m_high, det_a, det_p, m_low, &dm_low,
                                        teacher_dis_grads ? &dm_high : nullptr,
                                        teacher_dis_grads ? &ddet_a : nullptr,
                                        teacher_dis_grads ? &ddet_p : nullptr);
      // student descriptor gradients: lambda * dL/dM_low routed through the
      // affinity product
      const double w = cfg_.lambda * inv_batch;
      for (int i = 0; i < 2; ++i)
        ddesc_dis[i] = Matrix<float>(fam_student.desc[i].rows, fam_student.desc[i].cols);
      ConstMatMap<float> dml(dm_low.data.data(), dm_low.rows, dm_low.cols);
      ConstMatMap<float> d0(fam_student.desc[0].data.data(), fam_student.desc[0].rows,
                            fam_student.desc[0].cols);
      ConstMatMap<float> d1(fam_student.desc[1].data.data(), fam_student.desc[1].rows,
                            fam_student.desc[1].cols);
      MatMap<float> g0(ddesc_dis[0].data.data(), ddesc_dis[0].rows, ddesc_dis[0].cols);
      MatMap<float> g1(ddesc_dis[1].data.data(), ddesc_dis[1].rows, ddesc_dis[1].cols);
      g0.noalias() += static_cast<float>(w) * (dml * d1);
      g1.noalias() += static_cast<float>(w) * (dml.transpose() * d0);
      if (teacher_dis_grads) {
        for (int i = 0; i < 2; ++i)
          dteacher_desc[i] = Matrix<float>(teacher_desc[i].rows, teacher_desc[i].cols);
        ConstMatMap<float> dmh(dm_high.data.data(), dm_high.rows, dm_high.cols);
        ConstMatMap<float> t0(teacher_desc[0].data.data(), teacher_desc[0].rows,
                              teacher_desc[0].cols);
        ConstMatMap<float> t1(teacher_desc[1].data.data(), teacher_desc[1].rows,
                              teacher_desc[1].cols);
        MatMap<float> tg0(dteacher_desc[0].data.data(), dteacher_desc[0].rows,
                          dteacher_desc[0].cols);
        MatMap<float> tg1(dteacher_desc[1].data.data(), dteacher_desc[1].rows,
                          dteacher_desc[1].cols);
        tg0.noalias() += static_cast<float>(w) * (dmh * t1);
        tg1.noalias() += static_cast<float>(w) * (dmh.transpose() * t0);
      }
    }

    // contrastive global term
    std::vector<std::vector<float>> dglobals(n);
    for (size_t i = 0; i < n; ++i) dglobals[i].assign(globals[i].v.size(), 0.f);
    {
      std::vector<float> da, db;
      out.lc = contrastive_loss_grad(globals[0].v, globals[1].v, 1, cfg_.tau, &da, &db);
      axpy(dglobals[0], da, inv_batch);
      axpy(dglobals[1], db, inv_batch);
      for (size_t k = 2; k < n; ++k) {
        out.lc += contrastive_loss_grad(globals[0].v, globals[k].v, 0, cfg_.tau, &da, &db);
        axpy(dglobals[0], da, inv_batch);
        axpy(dglobals[k], db, inv_batch);
      }
    }

    // backward: student maps -> head (and teacher when the backbone trains)
    std::vector<BlockFeatures<float>> dblocks(n);
    for (size_t i = 0; i < n; ++i) {
      FeatureMap<float> dstudent_map =
          map_descriptors_backward(student[i], fam_student.desc[i], fam_student.ddesc[i]);
      FeatureMap<float> dteacher_map =
          reduce_dim_backward(teacher[i], model_->head, use_mask ? &mask : nullptr, dstudent_map,
                              /*want_input_grad=*/through_all);
      if (cfg_.lambda != 0.0 && i < 2) {
        // the distillation part reaches the reduction input only when nothing
        // protects the teacher (freeze and gradient_cut both stop it)
        FeatureMap<float> dstudent_dis =
            map_descriptors_backward(student[i], fam_student.desc[i], ddesc_dis[i]);
        bool into_teacher = policy_ == FreezePolicy::none;
        FeatureMap<float> dteacher_dis = reduce_dim_backward(
            teacher[i], model_->head, use_mask ? &mask : nullptr, dstudent_dis, into_teacher);
        if (into_teacher) add_inplace(dteacher_map, dteacher_dis);
      }
      if (!through_all) continue;

      // margin-family gradients on the raw block maps
      FeatureMap<float> db2 = map_descriptors_backward(blocks[i].c2, fam_b2.desc[i], fam_b2.ddesc[i]);
      FeatureMap<float> db3 = map_descriptors_backward(blocks[i].c3, fam_b3.desc[i], fam_b3.ddesc[i]);

      if (teacher_dis_grads && i < 2) {
        add_inplace(dteacher_map, map_descriptors_backward(teacher[i], teacher_desc[i],
                                                           dteacher_desc[i]));
        const SoftDetectionCache<float>& sdc = (i == 0) ? sdc_a : sdc_p;
        FeatureMap<float>& ddet = (i == 0) ? ddet_a : ddet_p;
        for (float& v : ddet.data) v = static_cast<float>(v * cfg_.lambda * inv_batch);
        add_inplace(dteacher_map, soft_detection_backward(teacher[i], sdc, ddet));
      }

      // split the teacher concat back into B2 and upsampled-B3 parts
      FeatureMap<float> d_b2_part = slice_channels(dteacher_map, 0, blocks[i].c2.channels);
      FeatureMap<float> d_b3_up =
          slice_channels(dteacher_map, blocks[i].c2.channels, blocks[i].c3.channels);
      add_inplace(db2, d_b2_part);
      FeatureMap<float> d_b3_part =
          upsample_bilinear_backward(d_b3_up, blocks[i].c3.height, blocks[i].c3.width);
      add_inplace(db3, d_b3_part);
      dblocks[i].c2 = std::move(db2);
      dblocks[i].c3 = std::move(db3);
    }

    // global path backward and backbone updates
    for (size_t i = 0; i < n; ++i) {
      std::vector<FeatureMap<float>> dlevels = global_descriptor_backward(
          pyr[i].levels, cfg_.gem_p, globals[i], gcache[i], vec_cast(dglobals[i]));
      model_->fpn.backward(dlevels, pyr[i], blocks[i], &dblocks[i], through_all ? 0 : 3);
      model_->backbone.backward(dblocks[i], bcache[i], through_all);
    }
    out.total = out.lm_b2 + out.lm_b3 + out.lm_student + out.lc + cfg_.lambda * out.ldis;
    return out;
  }

  static void axpy(std::vector<float>& dst, const std::vector<float>& src, double w) {
    for (size_t i = 0; i < src.size(); ++i) dst[i] += static_cast<float>(w * src[i]);
  }

  static std::string non_finite_dump(const TrainingTuple& tuple, const LossBreakdown& loss) {
    std::ostringstream os;
    os << "trainer: non-finite loss (lm_b2=" << loss.lm_b2 << " lm_b3=" << loss.lm_b3
       << " lm_student=" << loss.lm_student << " lc=" << loss.lc << " ldis=" << loss.ldis
       << ") on tuple anchor='" << tuple.anchor << "' positive='" << tuple.positive << "'";
    for (const std::string& neg : tuple.negatives) os << " negative='" << neg << "'";
    return os.str();
  }

  static std::vector<float> vec_cast(const std::vector<float>& v) { return v; }

  Model<float>* model_;
  RunConfig cfg_;
  FreezePolicy policy_;
  Rng dropout_rng_;
  LossConfig loss_cfg_;
  Adam adam_;
  int epoch_ = 0;
  int64_t global_step_ = 0;
  std::map<std::string, FrozenImage> frozen_images_;
  std::map<std::string, double> pair_scores_[2];
  std::map<std::string, Matrix<float>> m_high_cache_;
  std::vector<Fpn<float>> fpn_workers_;
};

}  // namespace unifeat
