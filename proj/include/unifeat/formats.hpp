#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "unifeat/detector.hpp"
#include "unifeat/matching.hpp"

namespace unifeat {

// ---------------------------------------------------------------------------
// Feature file: text header, then raw float32 little-endian payload with the
// keypoint array (N x 4: x, y, score, group_id) followed by the descriptor
// array (N x D, row-major).
// ---------------------------------------------------------------------------

struct FeatureFile {
  int version = 1;
  int dim = 0;
  int count = 0;
  int image_width = 0;
  int image_height = 0;
  double stride = 0;
  std::string mode;
  int groups = 0;
  KeypointSet keypoints;
  Matrix<float> descriptors;
};

inline void write_feature_file(const std::string& path, const FeatureFile& f) {
  if (f.descriptors.rows != static_cast<int>(f.keypoints.size()) || f.descriptors.cols != f.dim)
    throw ArgumentError("feature file: keypoint/descriptor shape mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write feature file: " + path);
  size_t n = f.keypoints.size();
  size_t payload = 4 * (4 * n + n * static_cast<size_t>(f.dim));
  out << "UNIFEAT-FEATURES v1\n";
  out << "dim " << f.dim << "\n";
  out << "count " << n << "\n";
  out << "image_size " << f.image_width << " " << f.image_height << "\n";
  out << "stride " << f.stride << "\n";
  out << "mode " << f.mode << "\n";
  out << "groups " << f.groups << "\n";
  out << "payload_bytes " << payload << "\n";
  out << "END\n";
  std::vector<float> kp_block;
  kp_block.reserve(4 * n);
  for (const Keypoint& kp : f.keypoints) {
    kp_block.push_back(static_cast<float>(kp.x));
    kp_block.push_back(static_cast<float>(kp.y));
    kp_block.push_back(static_cast<float>(kp.score));
    kp_block.push_back(static_cast<float>(kp.group_id));
  }
  out.write(reinterpret_cast<const char*>(kp_block.data()),
            static_cast<std::streamsize>(kp_block.size() * sizeof(float)));
  out.write(reinterpret_cast<const char*>(f.descriptors.data.data()),
            static_cast<std::streamsize>(f.descriptors.data.size() * sizeof(float)));
  if (!out) throw IoError("short write: " + path);
}

namespace detail {

inline std::string expect_key(std::istream& in, const std::string& key, const std::string& path) {
  std::string line;
  if (!std::getline(in, line)) throw IoError("truncated header in " + path);
  if (line.rfind(key + " ", 0) != 0) throw IoError("expected '" + key + "' in " + path);
  return line.substr(key.size() + 1);
}

}  // namespace detail

inline FeatureFile read_feature_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open feature file: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "UNIFEAT-FEATURES v1")
    throw IoError("not a feature file: " + path);
  FeatureFile f;
  f.dim = std::stoi(detail::expect_key(in, "dim", path));
  f.count = std::stoi(detail::expect_key(in, "count", path));
  {
    std::istringstream ss(detail::expect_key(in, "image_size", path));
    ss >> f.image_width >> f.image_height;
  }
  f.stride = std::stod(detail::expect_key(in, "stride", path));
  f.mode = detail::expect_key(in, "mode", path);
  f.groups = std::stoi(detail::expect_key(in, "groups", path));
  size_t payload = std::stoull(detail::expect_key(in, "payload_bytes", path));
  if (!std::getline(in, line) || line != "END") throw IoError("missing END marker in " + path);
  size_t n = static_cast<size_t>(f.count);
  if (payload != 4 * (4 * n + n * static_cast<size_t>(f.dim)))
    throw IoError("payload size mismatch in " + path);

  std::vector<float> kp_block(4 * n);
  in.read(reinterpret_cast<char*>(kp_block.data()),
          static_cast<std::streamsize>(kp_block.size() * sizeof(float)));
  f.descriptors = Matrix<float>(f.count, f.dim);
  in.read(reinterpret_cast<char*>(f.descriptors.data.data()),
          static_cast<std::streamsize>(f.descriptors.data.size() * sizeof(float)));
  if (!in) throw IoError("truncated payload in " + path);
  f.keypoints.resize(n);
  for (size_t i = 0; i < n; ++i) {
    f.keypoints[i].x = kp_block[4 * i + 0];
    f.keypoints[i].y = kp_block[4 * i + 1];
    f.keypoints[i].score = kp_block[4 * i + 2];
    f.keypoints[i].group_id = static_cast<int>(kp_block[4 * i + 3]);
  }
  return f;
}

// ---------------------------------------------------------------------------
// Global descriptor file
// ---------------------------------------------------------------------------

struct GlobalDescFile {
  int version = 1;
  std::string id;
  std::vector<float> descriptor;
};

inline void write_global_file(const std::string& path, const GlobalDescFile& g) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write global descriptor file: " + path);
  out << "UNIFEAT-GLOBAL v1\n";
  out << "dim " << g.descriptor.size() << "\n";
  out << "id " << g.id << "\n";
  out << "END\n";
  out.write(reinterpret_cast<const char*>(g.descriptor.data()),
            static_cast<std::streamsize>(g.descriptor.size() * sizeof(float)));
  if (!out) throw IoError("short write: " + path);
}

inline GlobalDescFile read_global_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open global descriptor file: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "UNIFEAT-GLOBAL v1")
    throw IoError("not a global descriptor file: " + path);
  GlobalDescFile g;
  int dim = std::stoi(detail::expect_key(in, "dim", path));
  g.id = detail::expect_key(in, "id", path);
  if (!std::getline(in, line) || line != "END") throw IoError("missing END marker in " + path);
  g.descriptor.resize(static_cast<size_t>(dim));
  in.read(reinterpret_cast<char*>(g.descriptor.data()),
          static_cast<std::streamsize>(g.descriptor.size() * sizeof(float)));
  if (!in) throw IoError("truncated payload in " + path);
  double norm = l2_norm(g.descriptor.data(), dim);
  if (std::abs(norm - 1.0) > 1e-5)
    throw IoError("global descriptor is not unit norm after read-back: " + path);
  return g;
}

// ---------------------------------------------------------------------------
// Match export: one line per match "xa ya xb yb sim"; '#' lines are comments.
// ---------------------------------------------------------------------------

struct MatchRecord {
  double xa, ya, xb, yb, sim;
};

inline void write_match_file(const std::string& path, const std::vector<MatchRecord>& matches,
                             const std::vector<std::pair<double, double>>* mma = nullptr) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write match file: " + path);
  char buf[160];
  for (const MatchRecord& m : matches) {
    std::snprintf(buf, sizeof(buf), "%.4f %.4f %.4f %.4f %.6f\n", m.xa, m.ya, m.xb, m.yb, m.sim);
    out << buf;
  }
  if (mma)
    for (const auto& [threshold, value] : *mma) {
      std::snprintf(buf, sizeof(buf), "# mma %.1f %.6f\n", threshold, value);
      out << buf;
    }
  if (!out) throw IoError("short write: " + path);
}

inline std::vector<MatchRecord> read_match_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open match file: " + path);
  std::vector<MatchRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    MatchRecord m{};
    if (!(ss >> m.xa >> m.ya >> m.xb >> m.yb >> m.sim))
      throw IoError("malformed match line in " + path);
    out.push_back(m);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Homography text file: 3x3, row-major, whitespace separated.
// ---------------------------------------------------------------------------

inline Homography read_homography_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open homography file: " + path);
  Homography H;
  for (int i = 0; i < 9; ++i)
    if (!(in >> H.h[i])) throw IoError("malformed homography file: " + path);
  return H;
}

inline void write_homography_file(const std::string& path, const Homography& H) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write homography file: " + path);
  char buf[64];
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      std::snprintf(buf, sizeof(buf), "%.12g%c", H.h[r * 3 + c], c == 2 ? '\n' : ' ');
      out << buf;
    }
  }
}

// ---------------------------------------------------------------------------
// Training manifest: line-delimited JSON records
// {"scene": s, "anchor": path, "positive": path}.
// ---------------------------------------------------------------------------

struct ManifestRecord {
  std::string scene;
  std::string anchor;
  std::string positive;
};

inline std::vector<ManifestRecord> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path);
  std::vector<ManifestRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("scene") || !j.contains("anchor") ||
        !j.contains("positive"))
      throw ArgumentError("manifest: invalid record at line " + std::to_string(line_no));
    out.push_back({j["scene"].get<std::string>(), j["anchor"].get<std::string>(),
                   j["positive"].get<std::string>()});
  }
  return out;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest: " + path);
  for (const ManifestRecord& r : records) {
    nlohmann::json j{{"scene", r.scene}, {"anchor", r.anchor}, {"positive", r.positive}};
    out << j.dump() << "\n";
  }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
  int groups = 6;
  double rel_threshold = 0.2;
  int nms_radius = 1;
  double edge_ratio = 10.0;
  int max_keypoints = 5000;
  double drop_prob = 0.3;
  int dim_b2 = 256;
  int dim_b3 = 256;
  double gem_p = 3.0;
  double margin = 0.5;
  double tau = 0.85;
  double lambda = 0.1;
  double lr = 1e-3;
  int epochs = 100;
  int batch_tuples = 5;
  int tuples_per_epoch = 6000;
  std::string freeze_policy = "freeze_b2b3";
  std::string mode = "teacher";
  uint64_t seed = 0;
  std::string backbone;
  int train_resolution = 256;
  int location_cap = 0;  // 0 = use every grid location in the margin losses

  void validate() const {
    DetectorConfig det{groups, rel_threshold, nms_radius, edge_ratio, max_keypoints};
    det.validate();
    if (!(drop_prob >= 0.0 && drop_prob < 1.0)) throw ArgumentError("config: drop_prob in [0,1)");
    if (dim_b2 < 1 || dim_b3 < 1) throw ArgumentError("config: reduction dims must be >= 1");
    if (gem_p < 1.0) throw ArgumentError("config: gem_p must be >= 1");
    if (!(margin > 0.0)) throw ArgumentError("config: margin must be > 0");
    if (!(tau > 0.0)) throw ArgumentError("config: tau must be > 0");
    if (lambda < 0.0) throw ArgumentError("config: lambda must be >= 0");
    if (!(lr > 0.0)) throw ArgumentError("config: lr must be > 0");
    if (epochs < 1) throw ArgumentError("config: epochs must be >= 1");
    if (batch_tuples < 1) throw ArgumentError("config: batch_tuples must be >= 1");
    if (tuples_per_epoch < 1) throw ArgumentError("config: tuples_per_epoch must be >= 1");
    if (train_resolution < kMinImageSize)
      throw ArgumentError("config: train_resolution below minimum image size");
    if (location_cap < 0) throw ArgumentError("config: location_cap must be >= 0");
    if (freeze_policy != "freeze_b2b3" && freeze_policy != "gradient_cut" &&
        freeze_policy != "none")
      throw ArgumentError("config: freeze_policy must be freeze_b2b3, gradient_cut or none");
    extraction_mode_check(mode);
  }

  static void extraction_mode_check(const std::string& m) {
    if (m != "teacher" && m != "ts" && m != "ss")
      throw ArgumentError("config: mode must be teacher, ts or ss");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"groups", groups},
                          {"rel_threshold", rel_threshold},
                          {"nms_radius", nms_radius},
                          {"edge_ratio", edge_ratio},
                          {"max_keypoints", max_keypoints},
                          {"drop_prob", drop_prob},
                          {"dim_b2", dim_b2},
                          {"dim_b3", dim_b3},
                          {"gem_p", gem_p},
                          {"margin", margin},
                          {"tau", tau},
                          {"lambda", lambda},
                          {"lr", lr},
                          {"epochs", epochs},
                          {"batch_tuples", batch_tuples},
                          {"tuples_per_epoch", tuples_per_epoch},
                          {"freeze_policy", freeze_policy},
                          {"mode", mode},
                          {"seed", seed},
                          {"backbone", backbone},
                          {"train_resolution", train_resolution},
                          {"location_cap", location_cap}};
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    for (const auto& [key, value] : j.items()) {
      if (key == "groups") c.groups = value.get<int>();
      else if (key == "rel_threshold") c.rel_threshold = value.get<double>();
      else if (key == "nms_radius") c.nms_radius = value.get<int>();
      else if (key == "edge_ratio") c.edge_ratio = value.get<double>();
      else if (key == "max_keypoints") c.max_keypoints = value.get<int>();
      else if (key == "drop_prob") c.drop_prob = value.get<double>();
      else if (key == "dim_b2") c.dim_b2 = value.get<int>();
      else if (key == "dim_b3") c.dim_b3 = value.get<int>();
      else if (key == "gem_p") c.gem_p = value.get<double>();
      else if (key == "margin") c.margin = value.get<double>();
      else if (key == "tau") c.tau = value.get<double>();
      else if (key == "lambda") c.lambda = value.get<double>();
      else if (key == "lr") c.lr = value.get<double>();
      else if (key == "epochs") c.epochs = value.get<int>();
      else if (key == "batch_tuples") c.batch_tuples = value.get<int>();
      else if (key == "tuples_per_epoch") c.tuples_per_epoch = value.get<int>();
      else if (key == "freeze_policy") c.freeze_policy = value.get<std::string>();
      else if (key == "mode") c.mode = value.get<std::string>();
      else if (key == "seed") c.seed = value.get<uint64_t>();
      else if (key == "backbone") c.backbone = value.get<std::string>();
      else if (key == "train_resolution") c.train_resolution = value.get<int>();
      else if (key == "location_cap") c.location_cap = value.get<int>();
      else throw ArgumentError("config: unknown key '" + key + "'");
    }
    c.validate();
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ArgumentError("config: invalid JSON in " + path);
    return from_json(j);
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write config: " + path);
    out << to_json().dump(2) << "\n";
  }

  DetectorConfig detector_config() const {
    return DetectorConfig{groups, rel_threshold, nms_radius, edge_ratio, max_keypoints};
  }
};

/// Resolves a checkpoint path, falling back to $UNIFEAT_CHECKPOINT_DIR for
/// relative paths that do not exist as given.
inline std::string resolve_checkpoint_path(const std::string& path) {
  namespace fs = std::filesystem;
  if (path.empty() || fs::exists(path) || fs::path(path).is_absolute()) return path;
  if (const char* dir = std::getenv("UNIFEAT_CHECKPOINT_DIR")) {
    fs::path candidate = fs::path(dir) / path;
    if (fs::exists(candidate)) return candidate.string();
  }
  return path;
}

}  // namespace unifeat
