#pragma once

// Sliding-window odometry: frame and IMU ingestion, landmark bookkeeping,
// triangulation, keyframe selection, window optimization and marginalization.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "msfo/camera.hpp"
#include "msfo/errors.hpp"
#include "msfo/eval.hpp"
#include "msfo/factors.hpp"
#include "msfo/imu.hpp"
#include "msfo/manifold.hpp"
#include "msfo/solver.hpp"
#include "msfo/state.hpp"
#include "msfo/values.hpp"

namespace msfo {

enum class Mode { Stereo, MonoImu, StereoImu };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::Stereo: return "stereo";
    case Mode::MonoImu: return "mono-imu";
    case Mode::StereoImu: return "stereo-imu";
  }
  return "?";
}

inline std::optional<Mode> parse_mode(const std::string& s) {
  if (s == "stereo") return Mode::Stereo;
  if (s == "mono-imu") return Mode::MonoImu;
  if (s == "stereo-imu") return Mode::StereoImu;
  return std::nullopt;
}

inline bool uses_imu(Mode m) { return m != Mode::Stereo; }

struct EstimatorConfig {
  Mode mode = Mode::Stereo;
  int window_size = 10;
  CameraRig rig;
  ImuNoise imu_noise;
  double gravity_norm = kDefaultGravity;
  double sigma_px = 1.0;
  double keyframe_parallax_px = 10.0;
  double outlier_px = 3.0;
  double huber_px = 1.0;
  OptimizerOptions solver;
  double init_duration = 0.5;   // s of IMU data for static initialization
  double min_baseline = 0.02;   // m between anchor and another view
  int min_features = 8;

  void validate() const {
    if (window_size < 4) throw ConfigError("window_size", "must be at least 4");
    try {
      rig.validate();
    } catch (const ContractError& e) {
      throw ConfigError("cameras", e.what());
    }
    if (mode == Mode::Stereo || mode == Mode::StereoImu) {
      if (rig.size() < 2) throw ConfigError("cameras", "stereo modes need two cameras");
    }
    if (uses_imu(mode)) {
      try {
        imu_noise.validate();
      } catch (const ContractError& e) {
        throw ConfigError("imu", e.what());
      }
    }
    if (!(gravity_norm > 0.0)) throw ConfigError("imu.gravity_norm", "must be positive");
    if (!(sigma_px > 0.0)) throw ConfigError("tracker.sigma_px", "must be positive");
    if (!(keyframe_parallax_px >= 0.0)) throw ConfigError("tracker.keyframe_parallax_px", "must be non-negative");
    if (!(outlier_px > 0.0)) throw ConfigError("tracker.outlier_px", "must be positive");
    if (!(huber_px > 0.0)) throw ConfigError("solver.huber_px", "must be positive");
    if (solver.max_iters < 1) throw ConfigError("solver.max_iters", "must be at least 1");
    if (solver.lambda0 < 0.0) throw ConfigError("solver.lambda0", "must be non-negative");
  }
};

// ---------------------------------------------------------------------------
// Triangulation

struct TriangulationView {
  Pose T_wc;  // camera pose in the world
  PinholeIntrinsics intrinsics;
  Vec2 uv;
};

enum class TriangulationStatus { Ok, InsufficientViews, InsufficientBaseline, NegativeDepth };

struct TriangulationResult {
  TriangulationStatus status = TriangulationStatus::InsufficientViews;
  double inv_depth = 0.0;
  bool ok() const { return status == TriangulationStatus::Ok; }
};

/// Depth along the anchor ray (views[0]) in the least-squares sense over the
/// linear projection constraints x P_z - P_x = 0, y P_z - P_y = 0 of every
/// other view. Returned as inverse depth in the anchor camera.
inline TriangulationResult triangulate(const std::vector<TriangulationView>& views, double min_baseline = 0.02) {
  TriangulationResult out;
  if (views.size() < 2) return out;
  const TriangulationView& a = views.front();
  const Vec3 ray_w = a.T_wc.R * pixel_ray(a.intrinsics, a.uv);
  double baseline = 0.0;
  double hh = 0.0, hb = 0.0;
  for (std::size_t k = 1; k < views.size(); ++k) {
    const TriangulationView& v = views[k];
    baseline = std::max(baseline, (v.T_wc.p - a.T_wc.p).norm());
    const Mat3 Rcw = v.T_wc.R.matrix().transpose();
    const Vec3 A = Rcw * (a.T_wc.p - v.T_wc.p);
    const Vec3 B = Rcw * ray_w;
    const Vec3 n = pixel_ray(v.intrinsics, v.uv);
    const Vec2 h(n.x() * B.z() - B.x(), n.y() * B.z() - B.y());
    const Vec2 c(-(n.x() * A.z() - A.x()), -(n.y() * A.z() - A.y()));
    hh += h.squaredNorm();
    hb += h.dot(c);
  }
  if (baseline < min_baseline || !(hh > 0.0)) {
    out.status = TriangulationStatus::InsufficientBaseline;
    return out;
  }
  const double depth = hb / hh;
  if (!(depth > 1e-3) || !std::isfinite(depth)) {
    out.status = TriangulationStatus::NegativeDepth;
    return out;
  }
  out.status = TriangulationStatus::Ok;
  out.inv_depth = 1.0 / depth;
  return out;
}

// ---------------------------------------------------------------------------

struct Landmark {
  std::int64_t id = 0;
  std::int64_t anchor_frame = 0;
  int anchor_cam = 0;
  double inv_depth = 0.0;
  bool triangulated = false;
  std::map<std::int64_t, std::map<int, Vec2>> obs;  // frame -> camera -> pixel

  std::size_t observation_count() const {
    std::size_t n = 0;
    for (const auto& [f, cams] : obs) n += cams.size();
    return n;
  }
  const Vec2& anchor_uv() const { return obs.at(anchor_frame).at(anchor_cam); }
};

enum class EstimateStatus { Initializing, Tracking, Degraded };

inline std::string to_string(EstimateStatus s) {
  switch (s) {
    case EstimateStatus::Initializing: return "initializing";
    case EstimateStatus::Tracking: return "tracking";
    case EstimateStatus::Degraded: return "degraded";
  }
  return "?";
}

struct PoseEstimate {
  std::int64_t frame_id = 0;
  double t = 0.0;
  Pose pose;
  Vec3 v = Vec3::Zero();
  EstimateStatus status = EstimateStatus::Initializing;
  bool keyframe = false;
  int iterations = 0;
  int outliers_removed = 0;
};

struct EstimatorStats {
  int frames = 0;
  int optimizations = 0;
  int iterations = 0;
  int outliers_removed = 0;
  int triangulation_rejected = 0;
  int imu_rejected = 0;
  int marginalizations = 0;
  int degraded_frames = 0;
};

class Estimator {
 public:
  explicit Estimator(EstimatorConfig cfg) : cfg_(std::move(cfg)), g_(gravity_vector(cfg_.gravity_norm)) {
    cfg_.validate();
  }

  const EstimatorConfig& config() const { return cfg_; }
  const std::vector<FrameState>& frames() const { return frames_; }
  const std::vector<std::shared_ptr<const Preintegration>>& preintegrations() const { return preints_; }
  const std::map<std::int64_t, Landmark>& landmarks() const { return landmarks_; }
  const std::shared_ptr<PriorFactor>& prior() const { return prior_; }
  const EstimatorStats& stats() const { return stats_; }
  const std::set<std::int64_t>& blacklist() const { return blacklist_; }
  bool initialized() const { return initialized_; }

  /// IMU-propagated state at the last accepted IMU sample (IMU modes, after
  /// the first frame).
  std::optional<FrameState> predicted_state() const { return prediction_; }

  /// Returns false when the sample is rejected as out of order.
  bool process_imu(const ImuSample& s) {
    if (!uses_imu(cfg_.mode)) throw ContractError("process_imu: estimator runs in stereo-only mode");
    if (!imu_.empty() && !(s.t > imu_.back().t)) {
      ++stats_.imu_rejected;
      return false;
    }
    if (prediction_ && !imu_.empty()) {
      const ImuSample pair[2] = {imu_.back(), s};
      prediction_ = integrate_step(*prediction_, pair[0], pair[1]);
    }
    imu_.push_back(s);
    return true;
  }

  PoseEstimate process_frame(std::int64_t frame_id, double t, const std::vector<FeatureObservation>& observations) {
    for (const auto& o : observations) {
      if (o.frame_id != frame_id) throw ContractError("process_frame: observations from more than one frame");
      if (o.camera_id < 0 || static_cast<std::size_t>(o.camera_id) >= cfg_.rig.size()) {
        throw ContractError("process_frame: camera id outside the rig");
      }
    }
    if (last_t_ && !(t > *last_t_)) throw OrderingError("process_frame: frame timestamps must increase");
    ++stats_.frames;

    PoseEstimate est;
    est.frame_id = frame_id;
    est.t = t;

    // observations usable by the graph
    std::map<std::int64_t, std::map<int, Vec2>> tracks;
    for (const auto& o : observations) {
      if (blacklist_.count(o.feature_id)) continue;
      if (cfg_.mode == Mode::MonoImu && o.camera_id != 0) continue;
      tracks[o.feature_id][o.camera_id] = o.uv;
    }
    const bool degraded = static_cast<int>(tracks.size()) < cfg_.min_features;

    FrameState init;
    init.frame_id = frame_id;
    init.t = t;
    std::shared_ptr<Preintegration> preint;
    if (uses_imu(cfg_.mode)) {
      if (!initialized_) {
        if (!static_initialize(t)) {
          est.status = EstimateStatus::Initializing;
          return est;
        }
        init.pose = init_state_.pose;
        init.bg = init_state_.bg;
        init.ba = init_state_.ba;
      } else {
        const FrameState& prev = frames_.back();
        auto samples = imu_interval(prev.t, t);
        preint = std::make_shared<Preintegration>(preintegrate(samples, prev.ba, prev.bg, cfg_.imu_noise));
        const auto [pose, v] = predict_state(prev, bias_corrected_delta(*preint, prev.ba, prev.bg), preint->dt_total, g_);
        init.pose = pose;
        init.v = v;
        init.ba = prev.ba;
        init.bg = prev.bg;
      }
    } else {
      init.pose = constant_velocity_prediction(t);
      if (degraded && !frames_.empty()) {
        ++stats_.degraded_frames;
        est.pose = init.pose;
        est.status = EstimateStatus::Degraded;
        record_output(frame_id, t, init.pose);
        remember(t, init.pose);
        last_t_ = t;
        return est;
      }
    }
    last_t_ = t;

    const bool keyframe = frames_.empty() || select_keyframe(tracks);

    frames_.push_back(init);
    if (preint) preints_.push_back(preint);
    add_observations(frame_id, tracks);
    triangulate_pending();

    if (frames_.size() >= 2 || !landmarks_.empty()) {
      const auto rep = optimize_window();
      est.iterations = rep.iterations;
      est.outliers_removed = reject_outliers();
      if (est.outliers_removed > 0) est.iterations += optimize_window().iterations;
      drop_invalid_landmarks();
    }

    const FrameState& cur = frames_.back();
    est.pose = cur.pose;
    est.v = cur.v;
    est.keyframe = keyframe;
    est.status = degraded ? EstimateStatus::Degraded : EstimateStatus::Tracking;
    if (degraded) ++stats_.degraded_frames;
    remember(t, cur.pose);

    if (keyframe) {
      keyframe_tracks_.clear();
      for (const auto& [id, cams] : tracks) {
        auto it = cams.find(0);
        if (it != cams.end()) keyframe_tracks_[id] = it->second;
      }
      if (static_cast<int>(frames_.size()) > cfg_.window_size) marginalize_oldest();
      trim_imu(t);
      if (uses_imu(cfg_.mode)) prediction_ = frames_.back();
    } else {
      discard_newest();
    }
    return est;
  }

  /// Mean cam-0 pixel displacement w.r.t. the last keyframe, or a drop of
  /// tracked features below 60 % of the keyframe's count.
  bool select_keyframe(const std::map<std::int64_t, std::map<int, Vec2>>& tracks) const {
    if (keyframe_tracks_.empty()) return true;
    double parallax = 0.0;
    std::size_t common = 0;
    for (const auto& [id, cams] : tracks) {
      auto c0 = cams.find(0);
      auto kf = keyframe_tracks_.find(id);
      if (c0 == cams.end() || kf == keyframe_tracks_.end()) continue;
      parallax += (c0->second - kf->second).norm();
      ++common;
    }
    if (static_cast<double>(common) < 0.6 * static_cast<double>(keyframe_tracks_.size())) return true;
    if (common == 0) return true;
    return parallax / static_cast<double>(common) > cfg_.keyframe_parallax_px;
  }

  /// Final trajectory: every processed frame at its last estimate, flushing
  /// the frames still in the window.
  Trajectory finish() {
    for (const auto& f : frames_) record_output(f.frame_id, f.t, f.pose);
    Trajectory out;
    for (const auto& [id, sp] : outputs_) out.push_back(sp);
    std::sort(out.begin(), out.end(), [](const StampedPose& a, const StampedPose& b) { return a.t < b.t; });
    return out;
  }

  // ---- graph construction, exposed for inspection in tests ----

  Values window_values() const {
    Values v;
    for (const auto& f : frames_) {
      v.poses[f.frame_id] = f.pose;
      if (uses_imu(cfg_.mode)) v.speed_biases[f.frame_id] = f.speed_bias();
    }
    for (const auto& [id, lm] : landmarks_) {
      if (active(lm)) v.inv_depths[id] = lm.inv_depth;
    }
    return v;
  }

  /// Camera factors of one landmark.
  void add_landmark_factors(FactorGraph& graph, const Landmark& lm) const {
    const Camera& ca = cfg_.rig[lm.anchor_cam];
    const Vec2 auv = lm.anchor_uv();
    for (const auto& [f, cams] : lm.obs) {
      for (const auto& [c, uv] : cams) {
        if (f == lm.anchor_frame && c == lm.anchor_cam) continue;
        if (f == lm.anchor_frame) {
          graph.emplace<StereoFactor>(lm.id, ca, cfg_.rig[c], auv, uv, cfg_.sigma_px, cfg_.huber_px);
        } else {
          graph.emplace<ReprojectionFactor>(lm.anchor_frame, f, lm.id, ca, cfg_.rig[c], auv, uv, cfg_.sigma_px,
                                            cfg_.huber_px);
        }
      }
    }
  }

  FactorGraph build_graph(bool with_gauge = true) const {
    FactorGraph graph;
    for (const auto& [id, lm] : landmarks_) {
      if (active(lm)) add_landmark_factors(graph, lm);
    }
    if (uses_imu(cfg_.mode)) {
      for (std::size_t k = 0; k + 1 < frames_.size(); ++k) {
        graph.emplace<ImuFactor>(frames_[k].frame_id, frames_[k + 1].frame_id, preints_[k], g_);
      }
    }
    if (prior_) graph.add(prior_);
    if (with_gauge && !frames_.empty()) {
      graph.emplace<GaugeFactor>(frames_.front().frame_id, frames_.front().pose, uses_imu(cfg_.mode));
    }
    return graph;
  }

  /// Removes landmarks whose mean reprojection error exceeds the threshold and
  /// blacklists their feature ids.
  int reject_outliers() {
    const Values values = window_values();
    std::vector<std::int64_t> bad;
    Eigen::VectorXd r;
    for (const auto& [id, lm] : landmarks_) {
      if (!active(lm)) continue;
      FactorGraph g;
      add_landmark_factors(g, lm);
      double sum = 0.0;
      int n = 0;
      bool invalid = false;
      for (const auto& f : g.factors) {
        if (!f->evaluate(values, r, nullptr)) {
          invalid = true;
          break;
        }
        sum += r.norm() * cfg_.sigma_px;
        ++n;
      }
      if (invalid || (n > 0 && sum / n > cfg_.outlier_px)) bad.push_back(id);
    }
    for (auto id : bad) remove_landmark(id, true);
    stats_.outliers_removed += static_cast<int>(bad.size());
    return static_cast<int>(bad.size());
  }

 private:
  static bool active(const Landmark& lm) { return lm.triangulated && lm.observation_count() >= 2; }

  FrameState integrate_step(FrameState s, const ImuSample& a, const ImuSample& b) const {
    const double dt = b.t - a.t;
    const Rotation R0 = s.pose.R;
    const Rotation R1 = R0 * so3_exp((0.5 * (a.gyro + b.gyro) - s.bg) * dt);
    const Vec3 acc = 0.5 * (R0 * Vec3(a.accel - s.ba) + R1 * Vec3(b.accel - s.ba)) - g_;
    s.pose.p += s.v * dt + 0.5 * acc * dt * dt;
    s.v += acc * dt;
    s.pose.R = R1;
    s.t = b.t;
    return s;
  }

  /// IMU samples covering [t0, t1]; interior boundary values are linearly
  /// interpolated when no sample falls exactly on them.
  std::vector<ImuSample> imu_interval(double t0, double t1) const {
    constexpr double eps = 1e-9;
    if (imu_.empty() || imu_.front().t > t0 + eps || imu_.back().t < t1 - eps) {
      throw InsufficientDataError("process_frame: IMU data does not cover the frame interval");
    }
    auto lerp = [](const ImuSample& a, const ImuSample& b, double t) {
      const double u = (t - a.t) / (b.t - a.t);
      ImuSample s;
      s.t = t;
      s.gyro = (1.0 - u) * a.gyro + u * b.gyro;
      s.accel = (1.0 - u) * a.accel + u * b.accel;
      return s;
    };
    std::vector<ImuSample> out;
    for (std::size_t i = 0; i < imu_.size(); ++i) {
      const ImuSample& s = imu_[i];
      if (s.t < t0 - eps) {
        if (i + 1 < imu_.size() && imu_[i + 1].t > t0 + eps) out.push_back(lerp(s, imu_[i + 1], t0));
        continue;
      }
      if (s.t > t1 + eps) {
        if (i > 0 && imu_[i - 1].t < t1 - eps) out.push_back(lerp(imu_[i - 1], s, t1));
        break;
      }
      out.push_back(s);
    }
    if (out.size() < 2) throw InsufficientDataError("process_frame: fewer than two IMU samples between frames");
    return out;
  }

  void trim_imu(double t) {
    constexpr double eps = 1e-9;
    std::size_t k = 0;
    while (k + 1 < imu_.size() && imu_[k + 1].t <= t + eps) ++k;
    imu_.erase(imu_.begin(), imu_.begin() + static_cast<std::ptrdiff_t>(k));
  }

  /// Gravity-aligned start at rest: roll/pitch from the mean specific force,
  /// gyro bias from the mean angular rate, yaw and position zero.
  bool static_initialize(double t) {
    if (imu_.empty() || imu_.back().t < t - 1e-9) return false;
    Vec3 f = Vec3::Zero(), w = Vec3::Zero();
    int n = 0;
    for (const auto& s : imu_) {
      if (s.t > t + 1e-9) break;
      f += s.accel;
      w += s.gyro;
      ++n;
    }
    if (n < 2 || t - imu_.front().t < cfg_.init_duration - 1e-9) return false;
    f /= n;
    w /= n;
    Mat3 R = Eigen::Quaterniond::FromTwoVectors(f, Vec3::UnitZ()).toRotationMatrix();
    const double yaw = std::atan2(R(1, 0), R(0, 0));
    R = Eigen::AngleAxisd(-yaw, Vec3::UnitZ()).toRotationMatrix() * R;
    init_state_ = FrameState{};
    init_state_.pose = Pose(Rotation(R), Vec3::Zero());
    init_state_.bg = w;
    initialized_ = true;
    trim_imu(t);
    return true;
  }

  Pose constant_velocity_prediction(double t) const {
    if (history_.empty()) return Pose();
    if (history_.size() < 2) return history_.back().pose;
    const StampedPose& a = history_[history_.size() - 2];
    const StampedPose& b = history_.back();
    const double r = (t - b.t) / (b.t - a.t);
    const Pose rel = a.pose.inverse() * b.pose;
    const Pose step(so3_exp(r * so3_log(rel.R)), r * rel.p);
    return b.pose * step;
  }

  void remember(double t, const Pose& p) {
    history_.push_back({t, p});
    if (history_.size() > 2) history_.erase(history_.begin());
  }

  void record_output(std::int64_t frame_id, double t, const Pose& pose) { outputs_[frame_id] = {t, pose}; }

  void add_observations(std::int64_t frame_id, const std::map<std::int64_t, std::map<int, Vec2>>& tracks) {
    for (const auto& [id, cams] : tracks) {
      auto it = landmarks_.find(id);
      if (it == landmarks_.end()) {
        Landmark lm;
        lm.id = id;
        lm.anchor_frame = frame_id;
        lm.anchor_cam = cams.begin()->first;
        it = landmarks_.emplace(id, std::move(lm)).first;
      }
      it->second.obs[frame_id] = cams;
    }
  }

  const FrameState* frame(std::int64_t id) const {
    for (const auto& f : frames_) {
      if (f.frame_id == id) return &f;
    }
    return nullptr;
  }

  TriangulationResult triangulate_landmark(const Landmark& lm) const {
    std::vector<TriangulationView> views;
    auto view = [&](std::int64_t f, int c, const Vec2& uv) {
      const Camera& cam = cfg_.rig[c];
      return TriangulationView{frame(f)->pose * cam.T_bc, cam.intrinsics, uv};
    };
    views.push_back(view(lm.anchor_frame, lm.anchor_cam, lm.anchor_uv()));
    for (const auto& [f, cams] : lm.obs) {
      for (const auto& [c, uv] : cams) {
        if (f == lm.anchor_frame && c == lm.anchor_cam) continue;
        views.push_back(view(f, c, uv));
      }
    }
    return triangulate(views, cfg_.min_baseline);
  }

  void triangulate_pending() {
    std::vector<std::int64_t> rejected;
    for (auto& [id, lm] : landmarks_) {
      if (lm.triangulated || lm.observation_count() < 2) continue;
      const auto res = triangulate_landmark(lm);
      if (res.ok()) {
        lm.inv_depth = res.inv_depth;
        lm.triangulated = true;
      } else if (res.status == TriangulationStatus::NegativeDepth) {
        rejected.push_back(id);
      }
    }
    for (auto id : rejected) remove_landmark(id, true);
    stats_.outliers_removed += static_cast<int>(rejected.size());
    stats_.triangulation_rejected += static_cast<int>(rejected.size());
  }

  void remove_landmark(std::int64_t id, bool blacklist) {
    landmarks_.erase(id);
    if (blacklist) blacklist_.insert(id);
  }

  void drop_invalid_landmarks() {
    std::vector<std::int64_t> drop;
    for (const auto& [id, lm] : landmarks_) {
      if (lm.triangulated && !(lm.inv_depth > 0.0 && std::isfinite(lm.inv_depth))) drop.push_back(id);
    }
    for (auto id : drop) remove_landmark(id, false);
  }

  OptimizerReport optimize_window() {
    if (uses_imu(cfg_.mode)) {
      for (std::size_t k = 0; k < preints_.size(); ++k) {
        const FrameState& fi = frames_[k];
        if (needs_repropagation(*preints_[k], fi.ba, fi.bg)) {
          preints_[k] = std::make_shared<Preintegration>(repropagate(*preints_[k], fi.ba, fi.bg));
        }
      }
    }
    const FactorGraph graph = build_graph();
    auto res = optimize(graph, window_values(), cfg_.solver);
    for (auto& f : frames_) {
      f.pose = res.values.pose(f.frame_id);
      if (uses_imu(cfg_.mode)) f.set_speed_bias(res.values.speed_bias(f.frame_id));
    }
    for (auto& [id, lm] : landmarks_) {
      auto it = res.values.inv_depths.find(id);
      if (it != res.values.inv_depths.end()) lm.inv_depth = it->second;
    }
    ++stats_.optimizations;
    stats_.iterations += res.report.iterations;
    return res.report;
  }

  /// Marginalizes the oldest frame together with the inverse depths anchored
  /// in it, then re-anchors those landmarks to their next observing frame.
  void marginalize_oldest() {
    const FrameState oldest = frames_.front();
    const std::int64_t f0 = oldest.frame_id;

    FactorGraph graph;
    std::vector<BlockId> marg = {BlockId::pose(f0)};
    if (uses_imu(cfg_.mode)) {
      marg.push_back(BlockId::speed_bias(f0));
      graph.emplace<ImuFactor>(f0, frames_[1].frame_id, preints_.front(), g_);
    }
    for (const auto& [id, lm] : landmarks_) {
      if (lm.anchor_frame == f0 && active(lm)) {
        add_landmark_factors(graph, lm);
        marg.push_back(BlockId::inv_depth(id));
      }
    }
    if (prior_) graph.add(prior_);

    const Values values = window_values();
    // drop marg ids whose block no factor touches (e.g. a landmark whose factors all vanished)
    const Layout layout = graph.layout(values);
    std::vector<BlockId> marg_present;
    for (const auto& id : marg) {
      if (layout.contains(id)) marg_present.push_back(id);
    }
    const Linearization lin = linearize_graph(graph, values, layout);
    auto prior = marginalize(lin.H, lin.b, marg_present, layout, values);
    prior_ = prior->blocks().empty() ? nullptr : prior;
    ++stats_.marginalizations;

    record_output(f0, oldest.t, oldest.pose);
    frames_.erase(frames_.begin());
    if (!preints_.empty()) preints_.erase(preints_.begin());
    reanchor(oldest);
  }

  void reanchor(const FrameState& old) {
    std::vector<std::int64_t> drop;
    for (auto& [id, lm] : landmarks_) {
      auto it = lm.obs.find(old.frame_id);
      if (it == lm.obs.end()) continue;
      const bool was_anchor = lm.anchor_frame == old.frame_id;
      Vec3 p_w = Vec3::Zero();
      if (was_anchor && lm.triangulated) {
        const Camera& ca = cfg_.rig[lm.anchor_cam];
        p_w = old.pose * (ca.T_bc * Vec3(pixel_ray(ca.intrinsics, lm.anchor_uv()) / lm.inv_depth));
      }
      lm.obs.erase(it);
      if (!was_anchor) continue;
      if (lm.obs.empty()) {
        drop.push_back(id);
        continue;
      }
      const auto& [nf, cams] = *lm.obs.begin();
      lm.anchor_frame = nf;
      lm.anchor_cam = cams.count(0) ? 0 : cams.begin()->first;
      if (lm.triangulated) {
        const Camera& cn = cfg_.rig[lm.anchor_cam];
        const Pose T_cw = (frame(nf)->pose * cn.T_bc).inverse();
        const double z = (T_cw * p_w).z();
        if (z > 1e-3 && lm.observation_count() >= 2) {
          lm.inv_depth = 1.0 / z;
        } else if (lm.observation_count() >= 2) {
          lm.triangulated = false;
        } else {
          drop.push_back(id);
        }
      }
    }
    for (auto id : drop) remove_landmark(id, false);
  }

  /// Drops the newest (non-key) frame. Its IMU samples stay buffered and are
  /// integrated into the interval ending at the next frame.
  void discard_newest() {
    const FrameState cur = frames_.back();
    record_output(cur.frame_id, cur.t, cur.pose);
    frames_.pop_back();
    if (uses_imu(cfg_.mode) && !preints_.empty()) preints_.pop_back();
    std::vector<std::int64_t> drop;
    for (auto& [id, lm] : landmarks_) {
      lm.obs.erase(cur.frame_id);
      if (lm.anchor_frame == cur.frame_id || lm.obs.empty()) {
        drop.push_back(id);
      } else if (lm.triangulated && lm.observation_count() < 2) {
        lm.triangulated = false;
      }
    }
    for (auto id : drop) remove_landmark(id, false);
    if (uses_imu(cfg_.mode)) {
      // keep predicting from the discarded frame's refined state
      FrameState p = cur;
      for (std::size_t i = 0; i + 1 < imu_.size(); ++i) {
        if (imu_[i + 1].t > cur.t + 1e-9 && imu_[i].t >= cur.t - 1e-9) p = integrate_step(p, imu_[i], imu_[i + 1]);
      }
      prediction_ = p;
    }
  }

  EstimatorConfig cfg_;
  Vec3 g_;
  std::vector<FrameState> frames_;
  std::vector<std::shared_ptr<const Preintegration>> preints_;
  std::map<std::int64_t, Landmark> landmarks_;
  std::shared_ptr<PriorFactor> prior_;
  std::set<std::int64_t> blacklist_;
  std::map<std::int64_t, Vec2> keyframe_tracks_;
  std::vector<ImuSample> imu_;
  std::optional<FrameState> prediction_;
  std::vector<StampedPose> history_;
  std::map<std::int64_t, StampedPose> outputs_;
  std::optional<double> last_t_;
  bool initialized_ = false;
  FrameState init_state_;
  EstimatorStats stats_;
};

}  // namespace msfo
