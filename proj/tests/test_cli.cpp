#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>

#include "unifeat/formats.hpp"
#include "unifeat/pipeline.hpp"

#include "testutil.hpp"

using namespace unifeat;

namespace {

#ifndef UNIFEAT_BIN_PATH
#define UNIFEAT_BIN_PATH "unifeat"
#endif
#ifndef UNIFEAT_FIXTURES
#define UNIFEAT_FIXTURES "fixtures"
#endif

int run(const std::string& args, const std::string& log = "/dev/null") {
  std::string cmd = std::string(UNIFEAT_BIN_PATH) + " " + args + " >" + log + " 2>&1";
  int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

struct CliFixture {
  testutil::TempDir tmp{"cli"};
  std::string backbone, config;

  CliFixture() {
    backbone = tmp.str("backbone.ckpt");
    REQUIRE(run("init-backbone --arch small --seed 7 --out " + backbone) == 0);
    RunConfig cfg;
    cfg.backbone = backbone;
    cfg.dim_b2 = 64;
    cfg.dim_b3 = 64;
    cfg.train_resolution = 64;
    cfg.batch_tuples = 1;
    cfg.tuples_per_epoch = 2;
    cfg.epochs = 1;
    config = tmp.str("config.json");
    cfg.save(config);
  }
};

}  // namespace

TEST_CASE("exit code contract: usage and validation errors exit 2, io errors 3") {
  CliFixture fx;
  CHECK(run("definitely-not-a-command") == 2);
  CHECK(run("extract") == 2);  // missing required options
  CHECK(run("extract --config " + fx.config + " --mode ss " + fx.tmp.str("img.ppm")) == 2);
  // student mode without checkpoint is a validation error even with an image
  ImageTensor img = testutil::make_texture_image(64, 64, 3);
  save_image_ppm(img, fx.tmp.str("img.ppm"));
  CHECK(run("extract --config " + fx.config + " --mode ss " + fx.tmp.str("img.ppm")) == 2);
  // unreadable image is an io error
  CHECK(run("extract --config " + fx.config + " " + fx.tmp.str("missing.ppm")) == 3);
  // malformed config rejects with a validation error
  std::ofstream(fx.tmp.str("bad.json")) << "{\"bogus\": 1}";
  CHECK(run("extract --config " + fx.tmp.str("bad.json") + " " + fx.tmp.str("img.ppm")) == 2);
  CHECK(run("--help") == 0);
}

TEST_CASE("extract writes feature and global descriptor files") {
  CliFixture fx;
  ImageTensor img = testutil::make_texture_image(96, 96, 5);
  save_image_ppm(img, fx.tmp.str("a.ppm"));
  std::string out = fx.tmp.str("out");
  REQUIRE(run("extract --config " + fx.config + " --out-dir " + out + " --index " +
              fx.tmp.str("a.ppm"), fx.tmp.str("extract.log")) == 0);

  FeatureFile ff = read_feature_file(out + "/a.feat");
  CHECK(ff.dim == 1536);  // teacher mode: concatenated B2 || B3
  CHECK(ff.mode == "teacher");
  CHECK(ff.groups == 6);
  CHECK(ff.count > 0);
  CHECK(ff.stride == 4.0);
  GlobalDescFile gf = read_global_file(out + "/a.gdesc");
  CHECK(gf.descriptor.size() == 1024);
  CHECK(slurp(out + "/manifest.txt") == "a\n");
  CHECK(slurp(fx.tmp.str("extract.log")).find("keypoints") != std::string::npos);
}

TEST_CASE("blank images and zero-keypoint files stay valid end to end") {
  CliFixture fx;
  // a constant image still yields a well-formed extraction (padding effects
  // near borders may produce detections; the contract is file validity)
  ImageTensor blank(96, 96);
  save_image_ppm(blank, fx.tmp.str("blank.ppm"));
  std::string out = fx.tmp.str("out_blank");
  REQUIRE(run("extract --config " + fx.config + " --out-dir " + out + " " +
              fx.tmp.str("blank.ppm")) == 0);
  FeatureFile ff = read_feature_file(out + "/blank.feat");
  CHECK(ff.dim == 1536);
  CHECK(ff.count == ff.descriptors.rows);

  // an N = 0 feature file is valid input: match warns and writes zero matches
  FeatureFile empty;
  empty.dim = 1536;
  empty.image_width = 96;
  empty.image_height = 96;
  empty.stride = 4.0;
  empty.mode = "teacher";
  empty.groups = 6;
  empty.descriptors = Matrix<float>(0, 1536);
  write_feature_file(fx.tmp.str("empty.feat"), empty);
  std::string log = fx.tmp.str("empty_match.log");
  REQUIRE(run("match --a " + fx.tmp.str("empty.feat") + " --b " + fx.tmp.str("empty.feat") +
              " --out " + fx.tmp.str("empty_matches.txt"), log) == 0);
  CHECK(read_match_file(fx.tmp.str("empty_matches.txt")).empty());
  CHECK(slurp(log).find("warning") != std::string::npos);
}

TEST_CASE("match command with and without a homography") {
  CliFixture fx;
  ImageTensor img = testutil::make_texture_image(96, 96, 7);
  save_image_ppm(img, fx.tmp.str("m.ppm"));
  std::string out = fx.tmp.str("mout");
  REQUIRE(run("extract --config " + fx.config + " --out-dir " + out + " " + fx.tmp.str("m.ppm")) == 0);

  write_homography_file(fx.tmp.str("H_identity"), Homography::identity());
  std::string match_log = fx.tmp.str("match.log");
  REQUIRE(run("match --a " + out + "/m.feat --b " + out + "/m.feat --homography " +
              fx.tmp.str("H_identity") + " --out " + fx.tmp.str("matches.txt"), match_log) == 0);

  // identity pair: every threshold at 1.0 in the appended report
  std::string match_text = slurp(fx.tmp.str("matches.txt"));
  for (int t = 1; t <= 10; ++t)
    CHECK(match_text.find("# mma " + std::to_string(t) + ".0 1.000000") != std::string::npos);
  std::vector<MatchRecord> records = read_match_file(fx.tmp.str("matches.txt"));
  FeatureFile ff = read_feature_file(out + "/m.feat");
  CHECK(records.size() == static_cast<size_t>(ff.count));

  // dimension mismatch exits 2
  FeatureFile other = ff;
  other.dim = 8;
  other.descriptors = Matrix<float>(ff.count, 8);
  for (int i = 0; i < ff.count; ++i) other.descriptors.at(i, 0) = 1.f;
  write_feature_file(fx.tmp.str("other.feat"), other);
  CHECK(run("match --a " + out + "/m.feat --b " + fx.tmp.str("other.feat") + " --out " +
            fx.tmp.str("m2.txt")) == 2);
}

TEST_CASE("train smoke run, bad manifests, and resume") {
  CliFixture fx;
  testutil::make_toy_dataset(fx.tmp.path() / "data", 3, 64, 31);
  std::string manifest = (fx.tmp.path() / "data" / "manifest.jsonl").string();
  std::string run_dir = fx.tmp.str("run");

  REQUIRE(run("train --config " + fx.config + " --manifest " + manifest + " --out-dir " + run_dir,
              fx.tmp.str("train.log")) == 0);
  CHECK(std::filesystem::exists(run_dir + "/epoch_0001.ckpt"));
  std::string log = slurp(run_dir + "/loss_log.csv");
  CHECK(log.find("step,lm_b2,lm_b3,lm_student,lc,ldis,total") == 0);
  CHECK(std::count(log.begin(), log.end(), '\n') >= 2);

  // invalid manifest line reports its number and exits 2
  std::ofstream(fx.tmp.str("broken.jsonl")) << "{\"scene\": \"a\"}\n";
  CHECK(run("train --config " + fx.config + " --manifest " + fx.tmp.str("broken.jsonl") +
            " --out-dir " + fx.tmp.str("run2")) == 2);

  // resume picks up the epoch counter and schedule
  std::string resume_log = fx.tmp.str("resume.log");
  RunConfig cfg = RunConfig::load(fx.config);
  cfg.epochs = 2;
  cfg.save(fx.config);
  REQUIRE(run("train --config " + fx.config + " --manifest " + manifest + " --out-dir " + run_dir +
              " --resume " + run_dir + "/epoch_0001.ckpt", resume_log) == 0);
  CHECK(slurp(resume_log).find("resumed at epoch 1") != std::string::npos);
  CHECK(std::filesystem::exists(run_dir + "/epoch_0002.ckpt"));

  // the trained checkpoint unlocks the student modes; the header dim follows
  // the reduction head (64 + 64 here)
  ImageTensor img = testutil::make_texture_image(96, 96, 47);
  save_image_ppm(img, fx.tmp.str("student.ppm"));
  std::string sdir = fx.tmp.str("student_out");
  REQUIRE(run("extract --config " + fx.config + " --mode ss --checkpoint " + run_dir +
              "/epoch_0002.ckpt --out-dir " + sdir + " " + fx.tmp.str("student.ppm")) == 0);
  FeatureFile ss = read_feature_file(sdir + "/student.feat");
  CHECK(ss.dim == 128);
  CHECK(ss.mode == "ss");
  REQUIRE(run("extract --config " + fx.config + " --mode ts --checkpoint " + run_dir +
              "/epoch_0002.ckpt --out-dir " + sdir + " " + fx.tmp.str("student.ppm")) == 0);
  CHECK(read_feature_file(sdir + "/student.feat").dim == 128);
}

TEST_CASE("eval-hpatches on the committed mini fixture") {
  CliFixture fx;
  std::string csv = fx.tmp.str("mma.csv");
  REQUIRE(run("eval-hpatches --config " + fx.config + " --data " +
              std::string(UNIFEAT_FIXTURES) + "/hpatches_mini --out " + csv,
              fx.tmp.str("eval.log")) == 0);
  std::string table = slurp(csv);
  CHECK(table.find("threshold,overall,illumination,viewpoint") == 0);
  // ten threshold rows follow the header
  CHECK(std::count(table.begin(), table.end(), '\n') == 11);

  // a missing homography file only warns
  namespace fs = std::filesystem;
  fs::path root = fx.tmp.path() / "hp_missing";
  fs::copy(std::string(UNIFEAT_FIXTURES) + "/hpatches_mini", root, fs::copy_options::recursive);
  fs::remove(root / "v_toy" / "H_1_3");
  std::string warn_log = fx.tmp.str("warn.log");
  CHECK(run("eval-hpatches --config " + fx.config + " --data " + root.string(), warn_log) == 0);
  CHECK(slurp(warn_log).find("1 skipped") != std::string::npos);
}

TEST_CASE("eval-retrieval self-retrieval and dimension drift") {
  CliFixture fx;
  namespace fs = std::filesystem;
  ImageTensor a = testutil::make_texture_image(96, 96, 41);
  ImageTensor b = testutil::make_texture_image(96, 96, 43);
  save_image_ppm(a, fx.tmp.str("qa.ppm"));
  save_image_ppm(b, fx.tmp.str("qb.ppm"));
  std::string index = fx.tmp.str("index");
  REQUIRE(run("extract --config " + fx.config + " --out-dir " + index + " --index " +
              fx.tmp.str("qa.ppm") + " " + fx.tmp.str("qb.ppm")) == 0);

  std::ofstream(fx.tmp.str("queries.txt")) << "qa\nqb\n";
  std::ofstream(fx.tmp.str("relevance.txt")) << "qa qa\nqb qb\n";
  std::string out_log = fx.tmp.str("retrieval.log");
  REQUIRE(run("eval-retrieval --index " + index + " --queries " + fx.tmp.str("queries.txt") +
              " --relevance " + fx.tmp.str("relevance.txt"), out_log) == 0);
  CHECK(slurp(out_log).find("map 1.000000") != std::string::npos);

  // drift one descriptor dimension inside the index -> exit 2
  GlobalDescFile drift;
  drift.id = "qc";
  drift.descriptor.assign(16, 0.f);
  drift.descriptor[0] = 1.f;
  write_global_file(index + "/qc.gdesc", drift);
  std::ofstream(index + "/manifest.txt", std::ios::app) << "qc\n";
  CHECK(run("eval-retrieval --index " + index + " --queries " + fx.tmp.str("queries.txt") +
            " --relevance " + fx.tmp.str("relevance.txt")) == 2);
}
