#pragma once

// File formats: IMU csv, feature-track csv, TUM trajectories and the JSON
// estimator configuration. Timestamps are integer nanoseconds on disk and
// seconds (ns * 1e-9) in memory.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "msfo/camera.hpp"
#include "msfo/errors.hpp"
#include "msfo/estimator.hpp"
#include "msfo/eval.hpp"
#include "msfo/imu.hpp"

namespace msfo::io {

namespace fs = std::filesystem;
using nlohmann::json;

inline double ns_to_seconds(std::int64_t ns) { return static_cast<double>(ns) * 1e-9; }
inline std::int64_t seconds_to_ns(double t) { return std::llround(t * 1e9); }

/// Shortest text that parses back to the same double; -0 prints as 0.
inline std::string format_double(double x) {
  if (x == 0.0) x = 0.0;
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

inline std::string format_stamp(std::int64_t ns) {
  char buf[48];
  const char* sign = ns < 0 ? "-" : "";
  const long long a = ns < 0 ? -static_cast<long long>(ns) : static_cast<long long>(ns);
  std::snprintf(buf, sizeof(buf), "%s%lld.%09lld", sign, a / 1000000000LL, a % 1000000000LL);
  return buf;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

template <class T>
bool parse_number(const std::string& s, T& out) {
  if (s.empty()) return false;
  const char* b = s.data();
  const char* e = b + s.size();
  if (*b == '+') ++b;
  auto res = std::from_chars(b, e, out);
  return res.ec == std::errc() && res.ptr == e;
}

inline bool is_header(const std::vector<std::string>& fields) {
  double d;
  return !fields.empty() && !parse_number(fields[0], d);
}

inline std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  return in;
}

inline std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  return out;
}

/// Seconds text with up to nine decimals to integer nanoseconds, exactly.
inline bool parse_stamp(const std::string& s, std::int64_t& ns) {
  const auto dot = s.find('.');
  std::int64_t whole = 0;
  bool neg = !s.empty() && s[0] == '-';
  const std::string ipart = s.substr(neg ? 1 : 0, dot == std::string::npos ? std::string::npos : dot - (neg ? 1 : 0));
  if (!ipart.empty() && !parse_number(ipart, whole)) return false;
  std::int64_t frac = 0;
  if (dot != std::string::npos) {
    std::string f = s.substr(dot + 1);
    if (f.size() > 9 || (!f.empty() && !parse_number(f, frac))) {
      double d;
      if (!parse_number(s, d)) return false;
      ns = std::llround(d * 1e9);
      return true;
    }
    for (std::size_t k = f.size(); k < 9; ++k) frac *= 10;
  }
  ns = whole * 1000000000LL + frac;
  if (neg) ns = -ns;
  return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// IMU

inline std::vector<ImuSample> read_imu_csv(const fs::path& path) {
  auto in = detail::open_in(path);
  std::vector<ImuSample> out;
  std::string line;
  std::size_t lineno = 0;
  std::optional<std::int64_t> last;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split(line, ',');
    if (lineno == 1 && detail::is_header(f)) continue;
    if (f.size() != 7) throw ParseError("imu csv: expected 7 fields", lineno);
    std::int64_t ns = 0;
    if (!detail::parse_number(f[0], ns)) throw ParseError("imu csv: bad timestamp", lineno);
    double v[6];
    for (int k = 0; k < 6; ++k) {
      if (!detail::parse_number(f[k + 1], v[k]) || !std::isfinite(v[k])) {
        throw ParseError("imu csv: bad value in column " + std::to_string(k + 2), lineno);
      }
    }
    if (last && ns <= *last) throw OrderingError("imu csv: timestamps must increase (line " + std::to_string(lineno) + ")");
    last = ns;
    ImuSample s;
    s.t = ns_to_seconds(ns);
    s.gyro = Vec3(v[0], v[1], v[2]);
    s.accel = Vec3(v[3], v[4], v[5]);
    out.push_back(s);
  }
  return out;
}

inline void write_imu_csv(const fs::path& path, const std::vector<ImuSample>& samples) {
  auto out = detail::open_out(path);
  out << "timestamp_ns,wx,wy,wz,ax,ay,az\n";
  for (const auto& s : samples) {
    out << seconds_to_ns(s.t);
    for (double x : {s.gyro.x(), s.gyro.y(), s.gyro.z(), s.accel.x(), s.accel.y(), s.accel.z()}) {
      out << ',' << format_double(x);
    }
    out << '\n';
  }
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Feature tracks

struct TrackFrame {
  std::int64_t frame_id = 0;
  std::int64_t stamp_ns = 0;
  std::vector<FeatureObservation> observations;
  double t() const { return ns_to_seconds(stamp_ns); }
};

struct TrackFile {
  std::vector<TrackFrame> frames;  // in order of first appearance
  std::size_t rejected_rows = 0;   // pixel outside the image
};

/// Rows `frame_id,timestamp_ns,feature_id,camera_id,u,v`. With a rig, rows
/// whose pixel lies outside that camera's image are dropped and counted.
inline TrackFile read_tracks_csv(const fs::path& path, const CameraRig* rig = nullptr) {
  auto in = detail::open_in(path);
  TrackFile out;
  std::map<std::int64_t, std::size_t> index;
  std::set<std::tuple<std::int64_t, std::int64_t, int>> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split(line, ',');
    if (lineno == 1 && detail::is_header(f)) continue;
    if (f.size() != 6) throw ParseError("tracks csv: expected 6 fields", lineno);
    std::int64_t frame = 0, ns = 0, feat = 0;
    int cam = 0;
    double u = 0, v = 0;
    if (!detail::parse_number(f[0], frame) || !detail::parse_number(f[1], ns) || !detail::parse_number(f[2], feat) ||
        !detail::parse_number(f[3], cam) || !detail::parse_number(f[4], u) || !detail::parse_number(f[5], v) ||
        !std::isfinite(u) || !std::isfinite(v)) {
      throw ParseError("tracks csv: malformed row", lineno);
    }
    if (cam < 0) throw ParseError("tracks csv: negative camera id", lineno);
    if (!seen.insert({frame, feat, cam}).second) {
      throw ParseError("tracks csv: duplicate (frame_id, feature_id, camera_id)", lineno);
    }
    auto it = index.find(frame);
    if (it == index.end()) {
      it = index.emplace(frame, out.frames.size()).first;
      out.frames.push_back(TrackFrame{frame, ns, {}});
    } else if (out.frames[it->second].stamp_ns != ns) {
      throw ParseError("tracks csv: frame timestamp changes within a frame", lineno);
    }
    const Vec2 uv(u, v);
    if (rig) {
      if (static_cast<std::size_t>(cam) >= rig->size()) throw ParseError("tracks csv: camera id outside rig", lineno);
      if (!(*rig)[cam].intrinsics.in_bounds(uv)) {
        ++out.rejected_rows;
        continue;
      }
    }
    out.frames[it->second].observations.push_back(FeatureObservation{frame, cam, feat, uv});
  }
  return out;
}

inline void write_tracks_csv(const fs::path& path, const std::vector<TrackFrame>& frames) {
  auto out = detail::open_out(path);
  out << "frame_id,timestamp_ns,feature_id,camera_id,u,v\n";
  for (const auto& fr : frames) {
    for (const auto& o : fr.observations) {
      out << fr.frame_id << ',' << fr.stamp_ns << ',' << o.feature_id << ',' << o.camera_id << ','
          << format_double(o.uv.x()) << ',' << format_double(o.uv.y()) << '\n';
    }
  }
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

/// Merges per-camera track files frame by frame, ordered by timestamp.
inline std::vector<TrackFrame> merge_tracks(const std::vector<TrackFile>& files) {
  std::map<std::int64_t, TrackFrame> by_frame;
  for (const auto& tf : files) {
    for (const auto& fr : tf.frames) {
      auto [it, fresh] = by_frame.try_emplace(fr.frame_id, TrackFrame{fr.frame_id, fr.stamp_ns, {}});
      if (!fresh && it->second.stamp_ns != fr.stamp_ns) {
        throw ParseError("tracks: frame " + std::to_string(fr.frame_id) + " has different timestamps across files");
      }
      auto& obs = it->second.observations;
      for (const auto& o : fr.observations) {
        for (const auto& e : obs) {
          if (e.feature_id == o.feature_id && e.camera_id == o.camera_id) {
            throw ParseError("tracks: duplicate observation across files in frame " + std::to_string(fr.frame_id));
          }
        }
        obs.push_back(o);
      }
    }
  }
  std::vector<TrackFrame> out;
  for (auto& [id, fr] : by_frame) out.push_back(std::move(fr));
  std::stable_sort(out.begin(), out.end(),
                   [](const TrackFrame& a, const TrackFrame& b) { return a.stamp_ns < b.stamp_ns; });
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i].stamp_ns == out[i - 1].stamp_ns) throw OrderingError("tracks: two frames share a timestamp");
  }
  return out;
}

// ---------------------------------------------------------------------------
// TUM trajectories: `timestamp tx ty tz qx qy qz qw`

inline void write_trajectory_tum(std::ostream& out, const Trajectory& traj) {
  for (const auto& sp : traj) {
    const auto& q = sp.pose.R.quaternion();
    out << format_stamp(seconds_to_ns(sp.t));
    for (double x : {sp.pose.p.x(), sp.pose.p.y(), sp.pose.p.z(), q.x(), q.y(), q.z(), q.w()}) {
      out << ' ' << format_double(x);
    }
    out << '\n';
  }
}

inline void write_trajectory_tum(const fs::path& path, const Trajectory& traj) {
  auto out = detail::open_out(path);
  write_trajectory_tum(out, traj);
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

inline Trajectory read_trajectory_tum(const fs::path& path) {
  auto in = detail::open_in(path);
  Trajectory out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::istringstream ss(t);
    std::vector<std::string> f;
    for (std::string w; ss >> w;) f.push_back(w);
    if (f.size() != 8) throw ParseError("tum: expected 8 fields", lineno);
    std::int64_t ns = 0;
    if (!detail::parse_stamp(f[0], ns)) throw ParseError("tum: bad timestamp", lineno);
    double v[7];
    for (int k = 0; k < 7; ++k) {
      if (!detail::parse_number(f[k + 1], v[k]) || !std::isfinite(v[k])) throw ParseError("tum: bad value", lineno);
    }
    StampedPose sp;
    sp.t = ns_to_seconds(ns);
    try {
      sp.pose = Pose(Rotation(v[6], v[3], v[4], v[5]), Vec3(v[0], v[1], v[2]));
    } catch (const ContractError&) {
      throw ParseError("tum: invalid quaternion", lineno);
    }
    if (!out.empty() && !(sp.t > out.back().t)) {
      throw OrderingError("tum: timestamps must increase (line " + std::to_string(lineno) + ")");
    }
    out.push_back(sp);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Configuration (JSON)

struct LoadedConfig {
  EstimatorConfig config;
  std::vector<std::string> warnings;  // unknown keys
};

namespace detail {

template <class T>
void read_key(const json& obj, const std::string& prefix, const char* key, T& dst) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    dst = it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(prefix + key, "wrong type");
  }
}

inline void warn_unknown(const json& obj, const std::string& prefix, std::initializer_list<const char*> known,
                         std::vector<std::string>& warnings) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) warnings.push_back("unknown config key '" + prefix + it.key() + "'");
  }
}

inline const json& section(const json& root, const char* key) {
  const json& s = root.at(key);
  if (!s.is_object()) throw ConfigError(key, "must be an object");
  return s;
}

}  // namespace detail

inline LoadedConfig parse_config(const json& root) {
  if (!root.is_object()) throw ConfigError("<root>", "config must be a JSON object");
  LoadedConfig lc;
  EstimatorConfig& c = lc.config;
  detail::warn_unknown(root, "", {"mode", "window_size", "cameras", "imu", "tracker", "solver"}, lc.warnings);

  if (!root.contains("mode")) throw ConfigError("mode", "missing");
  std::string mode;
  detail::read_key(root, "", "mode", mode);
  auto m = parse_mode(mode);
  if (!m) throw ConfigError("mode", "expected stereo, mono-imu or stereo-imu");
  c.mode = *m;
  detail::read_key(root, "", "window_size", c.window_size);

  if (!root.contains("cameras") || !root["cameras"].is_array()) throw ConfigError("cameras", "missing camera list");
  const auto& cams = root["cameras"];
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const std::string pre = "cameras[" + std::to_string(i) + "].";
    const json& cj = cams[i];
    if (!cj.is_object()) throw ConfigError(pre, "must be an object");
    detail::warn_unknown(cj, pre, {"fx", "fy", "cx", "cy", "width", "height", "extrinsic_pos", "extrinsic_quat"},
                         lc.warnings);
    Camera cam;
    for (const char* k : {"fx", "fy", "cx", "cy", "width", "height"}) {
      if (!cj.contains(k)) throw ConfigError(pre + k, "missing");
    }
    auto& K = cam.intrinsics;
    detail::read_key(cj, pre, "fx", K.fx);
    detail::read_key(cj, pre, "fy", K.fy);
    detail::read_key(cj, pre, "cx", K.cx);
    detail::read_key(cj, pre, "cy", K.cy);
    detail::read_key(cj, pre, "width", K.width);
    detail::read_key(cj, pre, "height", K.height);
    std::vector<double> pos{0, 0, 0}, quat{0, 0, 0, 1};
    detail::read_key(cj, pre, "extrinsic_pos", pos);
    detail::read_key(cj, pre, "extrinsic_quat", quat);
    if (pos.size() != 3) throw ConfigError(pre + "extrinsic_pos", "expected 3 values");
    if (quat.size() != 4) throw ConfigError(pre + "extrinsic_quat", "expected 4 values (qx, qy, qz, qw)");
    try {
      cam.T_bc = Pose(Rotation(quat[3], quat[0], quat[1], quat[2]), Vec3(pos[0], pos[1], pos[2]));
      K.validate();
    } catch (const ContractError& e) {
      throw ConfigError(pre.substr(0, pre.size() - 1), e.what());
    }
    c.rig.cameras.push_back(cam);
  }

  if (root.contains("imu")) {
    const json& s = detail::section(root, "imu");
    detail::warn_unknown(s, "imu.", {"sigma_g", "sigma_a", "sigma_bg", "sigma_ba", "gravity_norm"}, lc.warnings);
    detail::read_key(s, "imu.", "sigma_g", c.imu_noise.sigma_g);
    detail::read_key(s, "imu.", "sigma_a", c.imu_noise.sigma_a);
    detail::read_key(s, "imu.", "sigma_bg", c.imu_noise.sigma_bg);
    detail::read_key(s, "imu.", "sigma_ba", c.imu_noise.sigma_ba);
    detail::read_key(s, "imu.", "gravity_norm", c.gravity_norm);
  } else if (uses_imu(c.mode)) {
    throw ConfigError("imu", "section required in mode " + to_string(c.mode));
  }
  if (root.contains("tracker")) {
    const json& s = detail::section(root, "tracker");
    detail::warn_unknown(s, "tracker.", {"sigma_px", "keyframe_parallax_px", "outlier_px"}, lc.warnings);
    detail::read_key(s, "tracker.", "sigma_px", c.sigma_px);
    detail::read_key(s, "tracker.", "keyframe_parallax_px", c.keyframe_parallax_px);
    detail::read_key(s, "tracker.", "outlier_px", c.outlier_px);
  }
  if (root.contains("solver")) {
    const json& s = detail::section(root, "solver");
    detail::warn_unknown(s, "solver.", {"max_iters", "lambda0", "cost_tol", "delta_tol", "huber_px"}, lc.warnings);
    detail::read_key(s, "solver.", "max_iters", c.solver.max_iters);
    detail::read_key(s, "solver.", "lambda0", c.solver.lambda0);
    detail::read_key(s, "solver.", "cost_tol", c.solver.cost_tol);
    detail::read_key(s, "solver.", "delta_tol", c.solver.delta_tol);
    detail::read_key(s, "solver.", "huber_px", c.huber_px);
  }
  c.validate();
  return lc;
}

inline LoadedConfig load_config(const fs::path& path) {
  auto in = detail::open_in(path);
  json root;
  try {
    root = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("config '" + path.string() + "': " + e.what());
  }
  return parse_config(root);
}

/// Effective configuration with every key present.
inline json dump_config(const EstimatorConfig& c) {
  json root;
  root["mode"] = to_string(c.mode);
  root["window_size"] = c.window_size;
  root["cameras"] = json::array();
  for (const auto& cam : c.rig.cameras) {
    const auto& K = cam.intrinsics;
    const auto& q = cam.T_bc.R.quaternion();
    root["cameras"].push_back({{"fx", K.fx},
                               {"fy", K.fy},
                               {"cx", K.cx},
                               {"cy", K.cy},
                               {"width", K.width},
                               {"height", K.height},
                               {"extrinsic_pos", {cam.T_bc.p.x(), cam.T_bc.p.y(), cam.T_bc.p.z()}},
                               {"extrinsic_quat", {q.x(), q.y(), q.z(), q.w()}}});
  }
  root["imu"] = {{"sigma_g", c.imu_noise.sigma_g},
                 {"sigma_a", c.imu_noise.sigma_a},
                 {"sigma_bg", c.imu_noise.sigma_bg},
                 {"sigma_ba", c.imu_noise.sigma_ba},
                 {"gravity_norm", c.gravity_norm}};
  root["tracker"] = {
      {"sigma_px", c.sigma_px}, {"keyframe_parallax_px", c.keyframe_parallax_px}, {"outlier_px", c.outlier_px}};
  root["solver"] = {{"max_iters", c.solver.max_iters},
                    {"lambda0", c.solver.lambda0},
                    {"cost_tol", c.solver.cost_tol},
                    {"delta_tol", c.solver.delta_tol},
                    {"huber_px", c.huber_px}};
  return root;
}

// ---------------------------------------------------------------------------
// Dataset directory: imu.csv, cam0.csv, cam1.csv, groundtruth.tum

struct Dataset {
  std::vector<ImuSample> imu;
  std::vector<TrackFrame> frames;
  std::optional<Trajectory> groundtruth;
  std::size_t rejected_rows = 0;
};

inline constexpr const char* kImuFile = "imu.csv";
inline constexpr const char* kGroundTruthFile = "groundtruth.tum";
inline std::string track_file_name(int cam) { return "cam" + std::to_string(cam) + ".csv"; }

/// Reads everything the mode needs; any missing or malformed file rejects the
/// whole dataset.
inline Dataset load_dataset(const fs::path& dir, Mode mode, const CameraRig& rig) {
  if (!fs::is_directory(dir)) throw Error("dataset directory '" + dir.string() + "' does not exist");
  Dataset ds;
  const int ncam = mode == Mode::MonoImu ? 1 : 2;
  std::vector<TrackFile> files;
  for (int c = 0; c < ncam; ++c) {
    const fs::path p = dir / track_file_name(c);
    if (!fs::exists(p)) throw Error("missing track file '" + p.string() + "'");
    files.push_back(read_tracks_csv(p, &rig));
    ds.rejected_rows += files.back().rejected_rows;
  }
  ds.frames = merge_tracks(files);
  const fs::path imu = dir / kImuFile;
  if (uses_imu(mode)) {
    if (!fs::exists(imu)) throw Error("missing IMU file '" + imu.string() + "'");
    ds.imu = read_imu_csv(imu);
  }
  const fs::path gt = dir / kGroundTruthFile;
  if (fs::exists(gt)) ds.groundtruth = read_trajectory_tum(gt);
  return ds;
}

}  // namespace msfo::io
