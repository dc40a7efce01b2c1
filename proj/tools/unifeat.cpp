// unifeat command-line tool: feature extraction, matching, training and the
// two evaluation harnesses, glued together by the JSON run configuration.

#include <CLI11.hpp>

#include <iostream>

#include "unifeat/pipeline.hpp"
#include "unifeat/training.hpp"

namespace {

using namespace unifeat;

constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

std::string stem_of(const std::string& path) {
  return std::filesystem::path(path).stem().string();
}

Model<float> model_for_inference(const RunConfig& cfg, const std::string& checkpoint) {
  if (!checkpoint.empty()) {
    nlohmann::json meta;
    return load_model_checkpoint(resolve_checkpoint_path(checkpoint), &meta, 0, 0);
  }
  if (cfg.mode != "teacher")
    throw ArgumentError("mode '" + cfg.mode + "' needs a trained checkpoint (--checkpoint)");
  return build_model(cfg);
}

int cmd_extract(const std::string& config_path, const std::string& checkpoint,
                const std::string& mode_override, const std::string& out_dir, bool index,
                const std::vector<std::string>& images) {
  RunConfig cfg = RunConfig::load(config_path);
  if (!mode_override.empty()) {
    cfg.mode = mode_override;
    cfg.validate();
  }
  Model<float> model = model_for_inference(cfg, checkpoint);

  namespace fs = std::filesystem;
  std::ofstream manifest;
  if (index) {
    if (out_dir.empty()) throw ArgumentError("--index requires --out-dir");
    fs::create_directories(out_dir);
    manifest.open(fs::path(out_dir) / "manifest.txt", std::ios::app);
  }
  for (const std::string& path : images) {
    ImageTensor img = load_image(path);
    ExtractionResult res = extract_features(model, img, cfg);

    fs::path base = out_dir.empty() ? fs::path(path).parent_path() : fs::path(out_dir);
    if (!base.empty()) fs::create_directories(base);
    std::string id = stem_of(path);

    FeatureFile ff;
    ff.dim = res.descriptor_dim;
    ff.count = static_cast<int>(res.keypoints.size());
    ff.image_width = img.width;
    ff.image_height = img.height;
    ff.stride = res.local_stride;
    ff.mode = cfg.mode;
    ff.groups = cfg.groups;
    ff.keypoints = res.keypoints;
    ff.descriptors = res.descriptors.vectors;
    write_feature_file((base / (id + ".feat")).string(), ff);

    GlobalDescFile gf;
    gf.id = id;
    gf.descriptor.assign(res.global.v.begin(), res.global.v.end());
    if (!res.global.valid)
      std::cerr << "warning: " << path << ": degenerate (all-zero) global descriptor\n";
    write_global_file((base / (id + ".gdesc")).string(), gf);
    if (manifest.is_open()) manifest << id << "\n";

    std::cout << path << ": " << ff.count << " keypoints, dim " << ff.dim << ", global dim "
              << gf.descriptor.size() << "\n";
  }
  return 0;
}

int cmd_match(const std::string& feat_a, const std::string& feat_b, const std::string& h_path,
              const std::string& out_path) {
  FeatureFile a = read_feature_file(feat_a);
  FeatureFile b = read_feature_file(feat_b);
  if (a.dim != b.dim)
    throw ArgumentError("descriptor dimensions differ: " + std::to_string(a.dim) + " vs " +
                        std::to_string(b.dim));

  MatchSet matches;
  if (a.count > 0 && b.count > 0) {
    DescriptorSet<float> da{a.descriptors, {}}, db{b.descriptors, {}};
    matches = mutual_nn_matches(da, db);
  } else {
    std::cerr << "warning: empty keypoint set; writing zero matches\n";
  }

  std::vector<MatchRecord> records;
  records.reserve(matches.size());
  for (const Match& m : matches)
    records.push_back({a.keypoints[static_cast<size_t>(m.index_a)].x,
                       a.keypoints[static_cast<size_t>(m.index_a)].y,
                       b.keypoints[static_cast<size_t>(m.index_b)].x,
                       b.keypoints[static_cast<size_t>(m.index_b)].y, m.similarity});

  std::vector<std::pair<double, double>> mma_table;
  if (!h_path.empty()) {
    Homography H = read_homography_file(h_path);
    std::vector<double> thresholds = default_mma_thresholds();
    std::vector<double> curve(thresholds.size(), 0.0);
    if (!matches.empty()) curve = mma_curve(matches, a.keypoints, b.keypoints, H, thresholds);
    for (size_t t = 0; t < thresholds.size(); ++t) {
      mma_table.emplace_back(thresholds[t], curve[t]);
      std::printf("mma @ %4.1f px: %.4f\n", thresholds[t], curve[t]);
    }
  }
  write_match_file(out_path, records, h_path.empty() ? nullptr : &mma_table);
  std::cout << matches.size() << " mutual matches -> " << out_path << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& manifest_path,
              const std::string& out_dir, const std::string& resume, int64_t max_steps) {
  RunConfig cfg = RunConfig::load(config_path);
  std::vector<ManifestRecord> manifest = read_manifest(manifest_path);

  Model<float> model;
  Trainer trainer(&model, cfg);
  if (!resume.empty()) {
    nlohmann::json meta;
    model = load_model_checkpoint(resolve_checkpoint_path(resume), &meta);
    trainer = Trainer(&model, cfg);
    trainer.restore(load_checkpoint(resolve_checkpoint_path(resume)));
    std::cout << "resumed at epoch " << trainer.epoch() << ", step " << trainer.global_step()
              << "\n";
  } else {
    model = build_model(cfg);
  }

  std::filesystem::create_directories(out_dir);
  std::ofstream log(std::filesystem::path(out_dir) / "loss_log.csv",
                    resume.empty() ? std::ios::trunc : std::ios::app);
  std::vector<StepRecord> steps = trainer.run(manifest, out_dir, max_steps, &log);
  if (!steps.empty())
    std::cout << "trained " << steps.size() << " steps; final total loss "
              << steps.back().loss.total << "\n";
  std::cout << "checkpoints in " << out_dir << "\n";
  return 0;
}

int cmd_eval_hpatches(const std::string& config_path, const std::string& checkpoint,
                      const std::string& data_root, const std::string& out_path) {
  RunConfig cfg = RunConfig::load(config_path);
  Model<float> model = model_for_inference(cfg, checkpoint);
  HpatchesResult res = evaluate_hpatches(model, data_root, cfg, &std::cerr);
  if (out_path.empty()) {
    write_hpatches_csv(res, std::cout);
  } else {
    std::ofstream out(out_path);
    if (!out) throw IoError("cannot write " + out_path);
    write_hpatches_csv(res, out);
  }
  std::cerr << res.sequences << " sequences, " << res.pairs_used << " pairs evaluated, "
            << res.pairs_skipped << " skipped\n";
  return 0;
}

int cmd_eval_retrieval(const std::string& index_dir, const std::string& queries_path,
                       const std::string& relevance_path) {
  std::ifstream qf(queries_path);
  if (!qf) throw IoError("cannot open query list: " + queries_path);
  std::vector<std::string> queries;
  std::string line;
  while (std::getline(qf, line))
    if (!line.empty()) queries.push_back(line);

  std::ifstream rf(relevance_path);
  if (!rf) throw IoError("cannot open relevance file: " + relevance_path);
  std::map<std::string, std::unordered_set<std::string>> relevance;
  while (std::getline(rf, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string q, rel;
    ss >> q;
    while (ss >> rel) relevance[q].insert(rel);
  }

  RetrievalEvalResult res = evaluate_retrieval(index_dir, queries, relevance, &std::cerr);
  for (const auto& [id, ap] : res.per_query) std::printf("ap %s %.6f\n", id.c_str(), ap);
  std::printf("map %.6f\n", res.map);
  if (res.excluded > 0) std::cerr << res.excluded << " queries excluded (no relevant items)\n";
  return 0;
}

int cmd_init_backbone(const std::string& out_path, const std::string& arch_name,
                      const std::string& stages_csv, uint64_t seed) {
  BackboneConfig cfg;
  if (arch_name == "resnet101") cfg = BackboneConfig::resnet101();
  else if (arch_name == "small") cfg = BackboneConfig::small_test();
  else throw ArgumentError("unknown arch: " + arch_name + " (use resnet101 or small)");
  if (!stages_csv.empty()) {
    std::vector<int> stages;
    std::istringstream ss(stages_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) stages.push_back(std::stoi(tok));
    if (stages.size() != 4) throw ArgumentError("--stages needs four comma-separated counts");
    cfg.stage_blocks = stages;
  }
  Checkpoint ckpt = make_backbone_checkpoint(cfg, seed);
  save_checkpoint(ckpt, out_path);
  std::cout << "wrote " << out_path << " (stages";
  for (int s : cfg.stage_blocks) std::cout << " " << s;
  std::cout << ", seed " << seed << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unifeat: joint local-feature matching and image retrieval"};
  app.require_subcommand(1);

  // extract
  auto* extract = app.add_subcommand("extract", "Extract keypoints, descriptors and a global descriptor");
  std::string ex_config, ex_checkpoint, ex_mode, ex_out_dir;
  bool ex_index = false;
  std::vector<std::string> ex_images;
  extract->add_option("--config", ex_config, "Run configuration (JSON)")->required();
  extract->add_option("--checkpoint", ex_checkpoint, "Trained model checkpoint");
  extract->add_option("--mode", ex_mode, "Override extraction mode (teacher|ts|ss)");
  extract->add_option("--out-dir", ex_out_dir, "Output directory (default: next to each image)");
  extract->add_flag("--index", ex_index, "Append ids to <out-dir>/manifest.txt");
  extract->add_option("images", ex_images, "Input images (PPM/PGM)")->required();

  // match
  auto* match = app.add_subcommand("match", "Mutual-NN matching between two feature files");
  std::string m_a, m_b, m_h, m_out;
  match->add_option("--a", m_a, "First feature file")->required();
  match->add_option("--b", m_b, "Second feature file")->required();
  match->add_option("--homography", m_h, "Ground-truth homography (adds an MMA report)");
  match->add_option("--out", m_out, "Match output file")->required();

  // train
  auto* train = app.add_subcommand("train", "Train the joint objective from an image-pair manifest");
  std::string t_config, t_manifest, t_out, t_resume;
  int64_t t_max_steps = 0;
  train->add_option("--config", t_config, "Run configuration (JSON)")->required();
  train->add_option("--manifest", t_manifest, "Training manifest (JSON lines)")->required();
  train->add_option("--out-dir", t_out, "Checkpoint/log directory")->required();
  train->add_option("--resume", t_resume, "Resume from a model checkpoint");
  train->add_option("--max-steps", t_max_steps, "Stop after N optimizer steps (0 = run all epochs)");

  // eval-hpatches
  auto* evalh = app.add_subcommand("eval-hpatches", "Homography-sequence MMA evaluation");
  std::string eh_config, eh_checkpoint, eh_data, eh_out;
  evalh->add_option("--config", eh_config, "Run configuration (JSON)")->required();
  evalh->add_option("--checkpoint", eh_checkpoint, "Trained model checkpoint");
  evalh->add_option("--data", eh_data, "Dataset root (sequence directories)")->required();
  evalh->add_option("--out", eh_out, "CSV output path (default: stdout)");

  // eval-retrieval
  auto* evalr = app.add_subcommand("eval-retrieval", "Ranked-retrieval mAP over an index directory");
  std::string er_index, er_queries, er_relevance;
  evalr->add_option("--index", er_index, "Index directory (gdesc files + manifest.txt)")->required();
  evalr->add_option("--queries", er_queries, "Query id list (one per line)")->required();
  evalr->add_option("--relevance", er_relevance, "Relevance file: 'query rel1 rel2 ...'")->required();

  // init-backbone
  auto* init = app.add_subcommand("init-backbone", "Write a seed-initialized backbone checkpoint");
  std::string ib_out, ib_arch = "resnet101", ib_stages;
  uint64_t ib_seed = 0;
  init->add_option("--out", ib_out, "Output checkpoint path")->required();
  init->add_option("--arch", ib_arch, "Architecture preset (resnet101|small)");
  init->add_option("--stages", ib_stages, "Override stage block counts, e.g. 2,2,2,2");
  init->add_option("--seed", ib_seed, "Initialization seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (app.got_subcommand(extract))
      return cmd_extract(ex_config, ex_checkpoint, ex_mode, ex_out_dir, ex_index, ex_images);
    if (app.got_subcommand(match)) return cmd_match(m_a, m_b, m_h, m_out);
    if (app.got_subcommand(train)) return cmd_train(t_config, t_manifest, t_out, t_resume, t_max_steps);
    if (app.got_subcommand(evalh)) return cmd_eval_hpatches(eh_config, eh_checkpoint, eh_data, eh_out);
    if (app.got_subcommand(evalr)) return cmd_eval_retrieval(er_index, er_queries, er_relevance);
    if (app.got_subcommand(init)) return cmd_init_backbone(ib_out, ib_arch, ib_stages, ib_seed);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
