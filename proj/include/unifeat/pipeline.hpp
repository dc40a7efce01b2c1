#pragma once

#include <iostream>
#include <map>

#include "unifeat/descriptor.hpp"
#include "unifeat/formats.hpp"
#include "unifeat/global.hpp"

namespace unifeat {

constexpr int kFpnWidth = 256;

/// The full joint model: shared backbone, FPN global path, student reduction
/// head.
template <typename T>
struct Model {
  ResNetBackbone<T> backbone;
  Fpn<T> fpn;
  ReductionHead<T> head;

  void build(const BackboneConfig& cfg, int fpn_width, int dim_b2, int dim_b3) {
    backbone.build(cfg);
    fpn = Fpn<T>(cfg, fpn_width);
    head = ReductionHead<T>(cfg.block_channels(1), dim_b2, cfg.block_channels(2), dim_b3);
  }

  void visit_params(const std::function<void(ParamRef<T>)>& fn, bool buffers = false) {
    backbone.visit_params(fn, buffers);
    if (!buffers) {
      fpn.visit_params(fn);
      head.visit_params(fn);
    }
  }

  void zero_grad() {
    backbone.zero_grad();
    fpn.zero_grad();
    head.zero_grad();
  }

  int teacher_dim() const {
    return backbone.config().block_channels(1) + backbone.config().block_channels(2);
  }
  int student_dim() const { return head.out_channels(); }
};

// ---------------------------------------------------------------------------
// Checkpoint wiring
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json arch_json(const BackboneConfig& cfg) {
  return nlohmann::json{{"stages", cfg.stage_blocks},
                        {"planes", cfg.stage_planes},
                        {"stem", cfg.stem_channels}};
}

inline BackboneConfig arch_from_json(const nlohmann::json& j) {
  BackboneConfig cfg;
  cfg.stage_blocks = j.at("stages").get<std::vector<int>>();
  cfg.stage_planes = j.at("planes").get<std::vector<int>>();
  cfg.stem_channels = j.at("stem").get<int>();
  return cfg;
}

template <typename T>
void collect_tensors(Model<T>& model, bool backbone_only, Checkpoint* ckpt) {
  auto grab = [&](ParamRef<T> p) {
    TensorEntry t;
    t.name = p.name;
    t.shape = {static_cast<int>(p.value->size())};
    t.data.assign(p.value->begin(), p.value->end());
    ckpt->tensors.push_back(std::move(t));
  };
  if (backbone_only) {
    model.backbone.visit_params(grab, false);
    model.backbone.visit_params(grab, true);
  } else {
    model.visit_params(grab, false);
    model.visit_params(grab, true);
  }
}

template <typename T>
void fill_tensors(Model<T>& model, const Checkpoint& ckpt, bool backbone_only) {
  auto fill = [&](ParamRef<T> p) {
    const TensorEntry* t = ckpt.find(p.name);
    if (!t) throw StateError("checkpoint is missing tensor " + p.name);
    if (t->data.size() != p.value->size())
      throw StateError("checkpoint tensor " + p.name + " has wrong size");
    std::copy(t->data.begin(), t->data.end(), p.value->begin());
  };
  if (backbone_only) {
    model.backbone.visit_params(fill, false);
    model.backbone.visit_params(fill, true);
  } else {
    model.visit_params(fill, false);
    model.visit_params(fill, true);
  }
  model.backbone.mark_loaded();
}

}  // namespace detail

/// A deterministic randomly-initialized backbone checkpoint (stand-in when no
/// converted pretrained weights are available; also the test fixture source).
inline Checkpoint make_backbone_checkpoint(const BackboneConfig& cfg, uint64_t seed) {
  Model<float> model;
  model.build(cfg, kFpnWidth, 1, 1);  // head unused; minimal dims
  model.backbone.init_random(seed);
  Checkpoint ckpt;
  ckpt.kind = "backbone";
  ckpt.meta = {{"arch", detail::arch_json(cfg)}, {"seed", seed}};
  detail::collect_tensors(model, /*backbone_only=*/true, &ckpt);
  return ckpt;
}

/// Builds a model from config + backbone checkpoint. FPN and head start from
/// a seed-deterministic initialization; training replaces them, and a trained
/// model checkpoint restores them via load_model_checkpoint.
inline Model<float> build_model(const RunConfig& cfg) {
  std::string path = resolve_checkpoint_path(cfg.backbone);
  if (path.empty()) throw ArgumentError("config: backbone checkpoint path not set");
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.kind != "backbone" && ckpt.kind != "model")
    throw IoError("unexpected checkpoint kind: " + ckpt.kind);
  BackboneConfig arch = detail::arch_from_json(ckpt.meta.at("arch"));
  Model<float> model;
  model.build(arch, kFpnWidth, cfg.dim_b2, cfg.dim_b3);
  if (ckpt.kind == "model") {
    detail::fill_tensors(model, ckpt, false);
  } else {
    detail::fill_tensors(model, ckpt, true);
    model.fpn.init_random(cfg.seed + 1);
    model.head.init_random(cfg.seed + 2);
  }
  return model;
}

inline Checkpoint make_model_checkpoint(Model<float>& model, const nlohmann::json& training_meta) {
  Checkpoint ckpt;
  ckpt.kind = "model";
  ckpt.meta = {{"arch", detail::arch_json(model.backbone.config())},
               {"fpn_width", model.fpn.width()},
               {"dim_b2", model.head.b2.out_channels},
               {"dim_b3", model.head.b3.out_channels},
               {"training", training_meta}};
  detail::collect_tensors(model, /*backbone_only=*/false, &ckpt);
  return ckpt;
}

inline Model<float> load_model_checkpoint(const std::string& path, nlohmann::json* training_meta,
                                          int dim_b2 = 0, int dim_b3 = 0) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.kind != "model") throw IoError("expected a trained model checkpoint: " + path);
  BackboneConfig arch = detail::arch_from_json(ckpt.meta.at("arch"));
  int d2 = dim_b2 > 0 ? dim_b2 : ckpt.meta.at("dim_b2").get<int>();
  int d3 = dim_b3 > 0 ? dim_b3 : ckpt.meta.at("dim_b3").get<int>();
  Model<float> model;
  model.build(arch, ckpt.meta.value("fpn_width", kFpnWidth), d2, d3);
  detail::fill_tensors(model, ckpt, false);
  if (training_meta) *training_meta = ckpt.meta.value("training", nlohmann::json::object());
  return model;
}

// ---------------------------------------------------------------------------
// Test-time extraction
// ---------------------------------------------------------------------------

struct ExtractionResult {
  KeypointSet keypoints;
  DescriptorSet<float> descriptors;
  GlobalDescriptor<float> global;
  double local_stride = 0;
  int descriptor_dim = 0;
};

/// One image through the testing pipeline: dilated backbone, GC-DAD detection
/// on the mode's source map, descriptor sampling, FPN + GeM global
/// description.
inline ExtractionResult extract_features(const Model<float>& model, const ImageTensor& img,
                                         const RunConfig& cfg) {
  ExtractionMode mode = extraction_mode_from_string(cfg.mode);
  BlockFeatures<float> blocks = model.backbone.extract_block_features(img, RunMode::test);
  FeaturePyramid<float> pyr = model.fpn.forward(blocks);

  ExtractionResult out;
  out.global = global_descriptor(pyr.levels, cfg.gem_p);

  FeatureMap<float> teacher = teacher_descriptor_map(blocks, RunMode::test);
  DetectorConfig det = cfg.detector_config();
  out.local_stride = teacher.stride;
  switch (mode) {
    case ExtractionMode::teacher: {
      out.keypoints = detect_gcdad(teacher, det);
      out.descriptors = sample_descriptors(teacher, out.keypoints);
      break;
    }
    case ExtractionMode::ts: {
      out.keypoints = detect_gcdad(teacher, det);
      FeatureMap<float> student = reduce_dim(teacher, model.head);
      out.descriptors = sample_descriptors(student, out.keypoints);
      break;
    }
    case ExtractionMode::ss: {
      FeatureMap<float> student = reduce_dim(teacher, model.head);
      out.keypoints = detect_gcdad(student, det);
      out.descriptors = sample_descriptors(student, out.keypoints);
      break;
    }
  }
  out.descriptor_dim = out.descriptors.dim();
  return out;
}

// ---------------------------------------------------------------------------
// Homography-sequence evaluation (HPatches directory convention: sequence
// dirs holding 1.ppm .. N.ppm with H_1_k files; i_* dirs are illumination
// sequences, v_* viewpoint).
// ---------------------------------------------------------------------------

struct HpatchesResult {
  std::vector<double> thresholds;
  std::vector<double> overall, illumination, viewpoint;
  int pairs_used = 0;
  int pairs_skipped = 0;
  int sequences = 0;
};

inline HpatchesResult evaluate_hpatches(const Model<float>& model, const std::string& root,
                                        const RunConfig& cfg, std::ostream* warn = nullptr) {
  namespace fs = std::filesystem;
  HpatchesResult res;
  res.thresholds = default_mma_thresholds();
  std::vector<double> sum_all(res.thresholds.size(), 0.0), sum_i(res.thresholds.size(), 0.0),
      sum_v(res.thresholds.size(), 0.0);
  int n_all = 0, n_i = 0, n_v = 0;

  std::vector<fs::path> seq_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) seq_dirs.push_back(e.path());
  std::sort(seq_dirs.begin(), seq_dirs.end());

  for (const fs::path& dir : seq_dirs) {
    fs::path ref_path = dir / "1.ppm";
    if (!fs::exists(ref_path)) continue;
    ++res.sequences;
    std::string name = dir.filename().string();
    bool illum = name.rfind("i_", 0) == 0;
    bool view = name.rfind("v_", 0) == 0;

    ExtractionResult ref = extract_features(model, load_image(ref_path.string()), cfg);
    for (int k = 2;; ++k) {
      fs::path img_path = dir / (std::to_string(k) + ".ppm");
      if (!fs::exists(img_path)) break;
      fs::path h_path = dir / ("H_1_" + std::to_string(k));
      Homography H;
      try {
        H = read_homography_file(h_path.string());
      } catch (const Error& e) {
        ++res.pairs_skipped;
        if (warn) *warn << "warning: skipping " << img_path.string() << ": " << e.what() << "\n";
        continue;
      }
      ExtractionResult tgt = extract_features(model, load_image(img_path.string()), cfg);
      std::vector<double> curve(res.thresholds.size(), 0.0);
      if (ref.keypoints.empty() || tgt.keypoints.empty()) {
        // no detections: counts as an all-zero curve
      } else {
        MatchSet matches = mutual_nn_matches(ref.descriptors, tgt.descriptors);
        curve = mma_curve(matches, ref.keypoints, tgt.keypoints, H, res.thresholds);
      }
      ++res.pairs_used;
      ++n_all;
      for (size_t t = 0; t < curve.size(); ++t) sum_all[t] += curve[t];
      if (illum) {
        ++n_i;
        for (size_t t = 0; t < curve.size(); ++t) sum_i[t] += curve[t];
      } else if (view) {
        ++n_v;
        for (size_t t = 0; t < curve.size(); ++t) sum_v[t] += curve[t];
      }
    }
  }
  auto mean = [](std::vector<double> v, int n) {
    if (n > 0)
      for (double& x : v) x /= n;
    return v;
  };
  res.overall = mean(sum_all, n_all);
  res.illumination = mean(sum_i, n_i);
  res.viewpoint = mean(sum_v, n_v);
  return res;
}

inline void write_hpatches_csv(const HpatchesResult& res, std::ostream& out) {
  out << "threshold,overall,illumination,viewpoint\n";
  for (size_t t = 0; t < res.thresholds.size(); ++t) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%.1f,%.6f,%.6f,%.6f\n", res.thresholds[t], res.overall[t],
                  res.illumination[t], res.viewpoint[t]);
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// Retrieval evaluation over a persisted index directory (one .gdesc per
// image plus manifest.txt listing ids).
// ---------------------------------------------------------------------------

inline RetrievalIndex load_retrieval_index(const std::string& index_dir) {
  namespace fs = std::filesystem;
  std::ifstream manifest(fs::path(index_dir) / "manifest.txt");
  if (!manifest) throw IoError("cannot open index manifest in " + index_dir);
  RetrievalIndex index;
  std::string id;
  while (std::getline(manifest, id)) {
    if (id.empty()) continue;
    GlobalDescFile g = read_global_file((fs::path(index_dir) / (id + ".gdesc")).string());
    index.add(id, std::move(g.descriptor));
  }
  return index;
}

struct RetrievalEvalResult {
  double map = 0.0;
  std::vector<std::pair<std::string, double>> per_query;
  int excluded = 0;
};

inline RetrievalEvalResult evaluate_retrieval(const std::string& index_dir,
                                              const std::vector<std::string>& query_ids,
                                              const std::map<std::string, std::unordered_set<std::string>>& relevance,
                                              std::ostream* warn = nullptr) {
  namespace fs = std::filesystem;
  RetrievalIndex index = load_retrieval_index(index_dir);
  std::vector<std::vector<std::string>> rankings;
  std::vector<std::unordered_set<std::string>> relevant;
  std::vector<std::string> used_ids;
  int excluded = 0;
  for (const std::string& q : query_ids) {
    auto rel = relevance.find(q);
    if (rel == relevance.end() || rel->second.empty()) {
      ++excluded;
      if (warn) *warn << "warning: query " << q << " has no relevant items; excluded\n";
      continue;
    }
    GlobalDescFile g = read_global_file((fs::path(index_dir) / (q + ".gdesc")).string());
    auto ranked = rank(g.descriptor, index);
    std::vector<std::string> ids;
    ids.reserve(ranked.size());
    for (const auto& [id, sim] : ranked) ids.push_back(id);
    rankings.push_back(std::move(ids));
    relevant.push_back(rel->second);
    used_ids.push_back(q);
  }
  if (rankings.empty()) throw ArgumentError("evaluate_retrieval: no usable queries");
  RetrievalEvalResult res;
  std::vector<double> per_query;
  res.map = mean_average_precision(rankings, relevant, &per_query, nullptr);
  res.excluded = excluded;
  for (size_t i = 0; i < used_ids.size(); ++i) res.per_query.emplace_back(used_ids[i], per_query[i]);
  return res;
}

}  // namespace unifeat
