#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numeric>
#include <random>

#include "msfo/estimator.hpp"
#include "msfo/sim.hpp"

using namespace msfo;

namespace {

using FrameHook = std::function<void(const Estimator&, const sim::SimFrame&, const PoseEstimate&)>;

struct RunResult {
  Trajectory traj;
  Trajectory gt;
  EstimatorStats stats;
};

EstimatorConfig config_for(const sim::Scenario& sc, Mode mode) {
  EstimatorConfig cfg;
  cfg.mode = mode;
  cfg.rig = sc.world.rig;
  if (sc.world.sigma_px > 0.0) cfg.sigma_px = sc.world.sigma_px;
  return cfg;
}

RunResult run(const sim::Scenario& sc, const EstimatorConfig& cfg, const FrameHook& hook = {},
              const std::function<void(Estimator&)>& before = {}) {
  const sim::SimImu imu = sim::synthesize_imu(sc.trajectory, sc.world);
  const sim::SimTracks tracks = sim::synthesize_features(sc.trajectory, sc.world);
  Estimator est(cfg);
  std::size_t k = 0;
  RunResult out;
  for (const auto& f : tracks.frames) {
    if (uses_imu(cfg.mode)) {
      while (k < imu.samples.size() && imu.samples[k].t <= f.t + 1e-9) est.process_imu(imu.samples[k++]);
    }
    if (before) before(est);
    const PoseEstimate e = est.process_frame(f.frame_id, f.t, f.observations);
    if (hook) hook(est, f, e);
    out.gt.push_back({f.t, sim::sample_trajectory(sc.trajectory, f.t).pose});
  }
  out.traj = est.finish();
  out.stats = est.stats();
  return out;
}

double yaw_of(const Rotation& R) {
  const Mat3 m = R.matrix();
  return std::atan2(m(1, 0), m(0, 0));
}

/// 25 landmarks on a grid 5 m in front of the identity body pose, seen by
/// both cameras of the default rig from `T_wb`.
std::vector<FeatureObservation> grid_observations(const CameraRig& rig, std::int64_t frame, const Pose& T_wb,
                                                  int count = 25) {
  std::vector<FeatureObservation> obs;
  for (int c = 0; c < 2; ++c) {
    for (int i = 0; i < count; ++i) {
      const Vec3 p_c0(-1.0 + 0.5 * (i % 5), -1.0 + 0.5 * (i / 5), 5.0);
      const Vec3 pw = rig[0].T_bc * p_c0;
      const Vec3 pc = (T_wb * rig[c].T_bc).inverse() * pw;
      obs.push_back({frame, c, i, project(rig[c].intrinsics, pc)});
    }
  }
  return obs;
}

std::map<std::int64_t, std::map<int, Vec2>> as_tracks(const std::vector<FeatureObservation>& obs) {
  std::map<std::int64_t, std::map<int, Vec2>> t;
  for (const auto& o : obs) t[o.feature_id][o.camera_id] = o.uv;
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(Triangulate, ForwardConstructedStereoPair) {
  const PinholeIntrinsics k{460, 460, 376, 240, 752, 480};
  const Pose left, right(Rotation(), Vec3(0.1, 0, 0));
  const Vec3 p(0.3, -0.2, 2.0);
  const auto r = triangulate({{left, k, project(k, p)}, {right, k, project(k, right.inverse() * p)}});
  ASSERT_TRUE(r.ok());
  EXPECT_NEAR(r.inv_depth, 0.5, 1e-9);
}

TEST(Triangulate, DegenerateInputs) {
  const PinholeIntrinsics k{460, 460, 376, 240, 752, 480};
  const Vec2 uv(400, 200);
  EXPECT_EQ(triangulate({{Pose(), k, uv}}).status, TriangulationStatus::InsufficientViews);
  EXPECT_EQ(triangulate({{Pose(), k, uv}, {Pose(), k, uv + Vec2(3, 0)}}).status,
            TriangulationStatus::InsufficientBaseline);
  // rays that meet behind the cameras
  const Pose right(Rotation(), Vec3(0.1, 0, 0));
  EXPECT_EQ(triangulate({{Pose(), k, Vec2(376, 240)}, {right, k, Vec2(390, 240)}}).status,
            TriangulationStatus::NegativeDepth);
}

TEST(Triangulate, MonteCarloDepthError) {
  // five views 0.2 m apart, 0.5 px noise, landmark 5 m away
  const PinholeIntrinsics k{460, 460, 376, 240, 752, 480};
  std::mt19937_64 rng(31);
  std::normal_distribution<double> n(0.0, 0.5);
  const Vec3 pw(0.3, -0.2, 5.0);
  double abs_err = 0.0, bias = 0.0;
  const int trials = 2000;
  for (int t = 0; t < trials; ++t) {
    std::vector<TriangulationView> views;
    for (int v = 0; v < 5; ++v) {
      const Pose T(Rotation(), Vec3(0.2 * v, 0, 0));
      views.push_back({T, k, project(k, T.inverse() * pw) + Vec2(n(rng), n(rng))});
    }
    const auto r = triangulate(views);
    ASSERT_TRUE(r.ok());
    const double e = (1.0 / r.inv_depth - 5.0) / 5.0;
    abs_err += std::abs(e);
    bias += e;
  }
  EXPECT_LT(abs_err / trials, 0.01);
  EXPECT_LT(std::abs(bias / trials), 0.002);
}

// ---------------------------------------------------------------------------

class KeyframeRule : public ::testing::Test {
 protected:
  void SetUp() override {
    cfg.rig = sim::default_rig();
    est = std::make_unique<Estimator>(cfg);
    first = grid_observations(cfg.rig, 0, Pose());
    est->process_frame(0, 0.0, first);
  }
  EstimatorConfig cfg;
  std::unique_ptr<Estimator> est;
  std::vector<FeatureObservation> first;
};

TEST_F(KeyframeRule, ZeroParallaxIsNotAKeyframe) { EXPECT_FALSE(est->select_keyframe(as_tracks(first))); }

TEST_F(KeyframeRule, TranslationAtTwiceThreshold) {
  // every landmark sits at depth 5, so a sideways shift of s moves pixels by f s / 5
  const double shift = 2.0 * cfg.keyframe_parallax_px * 5.0 / 460.0;
  const auto moved = grid_observations(cfg.rig, 1, Pose(Rotation(), Vec3(0, -shift, 0)));
  double parallax = 0.0;
  for (int i = 0; i < 25; ++i) parallax += (moved[i].uv - first[i].uv).norm();
  EXPECT_NEAR(parallax / 25.0, 2.0 * cfg.keyframe_parallax_px, 1e-9);
  EXPECT_TRUE(est->select_keyframe(as_tracks(moved)));
  const auto small = grid_observations(cfg.rig, 1, Pose(Rotation(), Vec3(0, -0.25 * shift, 0)));
  EXPECT_FALSE(est->select_keyframe(as_tracks(small)));
}

TEST_F(KeyframeRule, LosingHalfTheTracks) {
  auto tracks = as_tracks(first);
  for (std::int64_t id = 0; id < 13; ++id) tracks.erase(id);
  EXPECT_TRUE(est->select_keyframe(tracks));
}

// ---------------------------------------------------------------------------

TEST(Estimator, WindowInvariantsHoldAfterEveryFrame) {
  const auto sc = sim::make_scenario("circle", 1, 80);
  for (Mode mode : {Mode::Stereo, Mode::MonoImu, Mode::StereoImu}) {
    SCOPED_TRACE(to_string(mode));
    const EstimatorConfig cfg = config_for(sc, mode);
    std::optional<FrameState> front_before;
    std::size_t size_before = 0;
    int keyframes = 0;
    const RunResult r = run(
        sc, cfg,
        [&](const Estimator& est, const sim::SimFrame&, const PoseEstimate& e) {
          const auto& frames = est.frames();
          if (e.status == EstimateStatus::Initializing) return;
          keyframes += e.keyframe;
          ASSERT_LE(frames.size(), static_cast<std::size_t>(cfg.window_size));
          if (e.keyframe && size_before == static_cast<std::size_t>(cfg.window_size)) {
            EXPECT_EQ(frames.size(), size_before);
          }
          std::set<std::int64_t> ids;
          for (const auto& f : frames) ids.insert(f.frame_id);
          if (uses_imu(mode)) {
            ASSERT_EQ(est.preintegrations().size(), frames.size() - 1);
            for (std::size_t k = 0; k + 1 < frames.size(); ++k) {
              EXPECT_NEAR(est.preintegrations()[k]->dt_total, frames[k + 1].t - frames[k].t, 1e-9);
            }
          }
          for (const auto& [id, lm] : est.landmarks()) {
            EXPECT_TRUE(ids.count(lm.anchor_frame));
            for (const auto& [f, cams] : lm.obs) EXPECT_TRUE(ids.count(f));
            EXPECT_TRUE(lm.obs.begin()->first == lm.anchor_frame);
            if (lm.triangulated) {
              EXPECT_GT(lm.inv_depth, 0.0);
            }
            if (mode == Mode::MonoImu) {
              for (const auto& [f, cams] : lm.obs) EXPECT_EQ(cams.count(1), 0u);
            }
          }
          const Values v = est.window_values();
          if (uses_imu(mode)) {
            EXPECT_EQ(v.speed_biases.size(), frames.size());
          } else {
            EXPECT_TRUE(v.speed_biases.empty());
          }
          if (est.prior()) {
            for (const auto& b : est.prior()->blocks()) {
              EXPECT_NE(b.kind, BlockKind::InverseDepth);
              EXPECT_TRUE(ids.count(b.key));
            }
          }
          // gauge: the first window pose stays put while it remains first
          if (front_before && front_before->frame_id == frames.front().frame_id) {
            const Pose& now = frames.front().pose;
            EXPECT_LT((now.p - front_before->pose.p).norm(), 1e-6);
            if (uses_imu(mode)) {
              EXPECT_LT(std::abs(yaw_of(now.R) - yaw_of(front_before->pose.R)), 1e-6);
            } else {
              EXPECT_LT(boxminus_rotation(now.R, front_before->pose.R).norm(), 1e-6);
            }
          }
          const double cost = evaluate_cost(est.build_graph(), v).cost;
          // IMU modes carry the 200 Hz discretization residual of the
          // continuous-time simulator
          EXPECT_LT(cost, uses_imu(mode) ? 1e-5 : 1e-10);
        },
        [&](Estimator& est) {
          front_before = est.frames().empty() ? std::nullopt : std::optional<FrameState>(est.frames().front());
          size_before = est.frames().size();
        });
    EXPECT_GT(r.stats.marginalizations, 5);
    EXPECT_GT(keyframes, 20);
    EXPECT_EQ(r.stats.outliers_removed, 0);
  }
}

TEST(Estimator, NoiseFreeWindowCostVanishesWithFineImu) {
  // at 4 kHz the simulator's continuous-time IMU and the discrete
  // preintegration agree to O(dt^2), so the window fits exactly
  auto sc = sim::make_scenario("circle", 1, 60);
  sc.world.imu_rate = 4000.0;
  for (Mode mode : {Mode::MonoImu, Mode::StereoImu}) {
    EstimatorConfig cfg = config_for(sc, mode);
    cfg.solver.delta_tol = 1e-12;
    double worst = 0.0;
    run(sc, cfg, [&](const Estimator& est, const sim::SimFrame&, const PoseEstimate& e) {
      if (e.status == EstimateStatus::Initializing || est.frames().size() < 2) return;
      worst = std::max(worst, evaluate_cost(est.build_graph(), est.window_values()).cost);
    });
    EXPECT_LT(worst, 1e-10) << to_string(mode);
  }
}

TEST(Estimator, NoiseFreeStereoImuSequence) {
  const auto sc = sim::make_scenario("circle", 1, 200);
  const RunResult r = run(sc, config_for(sc, Mode::StereoImu));
  EXPECT_EQ(r.traj.size(), 190u);  // frames during the 0.5 s static initialization have no estimate
  EXPECT_LT(ate_rmse(r.traj, r.gt), 1e-3);
}

TEST(Estimator, StaticFramePairIsIdentity) {
  const auto sc = sim::make_scenario("static", 1, 2);
  const RunResult r = run(sc, config_for(sc, Mode::Stereo));
  ASSERT_EQ(r.traj.size(), 2u);
  const Pose rel = r.traj[0].pose.inverse() * r.traj[1].pose;
  EXPECT_LT(rel.p.norm(), 1e-9);
  EXPECT_LT(so3_log(rel.R).norm(), 1e-9);
}

TEST(Estimator, StationaryImuPrediction) {
  auto sc = sim::make_scenario("static", 1);
  sc.trajectory.duration = 3.0;
  const sim::SimImu imu = sim::synthesize_imu(sc.trajectory, sc.world);
  const sim::SimTracks tracks = sim::synthesize_features(sc.trajectory, sc.world);
  Estimator est(config_for(sc, Mode::MonoImu));
  std::size_t k = 0;
  for (const auto& f : tracks.frames) {
    if (f.t > 1.0 + 1e-9) break;
    while (imu.samples[k].t <= f.t + 1e-9) est.process_imu(imu.samples[k++]);
    est.process_frame(f.frame_id, f.t, f.observations);
  }
  ASSERT_TRUE(est.initialized());
  const FrameState last = est.frames().back();
  // one more second of IMU without frames
  while (k < imu.samples.size() && imu.samples[k].t <= 2.0 + 1e-9) est.process_imu(imu.samples[k++]);
  const auto pred = est.predicted_state();
  ASSERT_TRUE(pred.has_value());
  EXPECT_NEAR(pred->t, 2.0, 1e-9);
  EXPECT_LT((pred->pose.p - last.pose.p).norm(), 1e-6);
  EXPECT_LT(pred->v.norm(), 1e-6);
}

TEST(Estimator, ImuInputChecks) {
  EstimatorConfig cfg;
  cfg.rig = sim::default_rig();
  Estimator stereo(cfg);
  EXPECT_THROW(stereo.process_imu({0.0, Vec3::Zero(), Vec3(0, 0, 9.81)}), ContractError);
  cfg.mode = Mode::StereoImu;
  Estimator vio(cfg);
  EXPECT_TRUE(vio.process_imu({0.0, Vec3::Zero(), Vec3(0, 0, 9.81)}));
  EXPECT_TRUE(vio.process_imu({0.005, Vec3::Zero(), Vec3(0, 0, 9.81)}));
  EXPECT_FALSE(vio.process_imu({0.005, Vec3::Zero(), Vec3(0, 0, 9.81)}));
  EXPECT_FALSE(vio.process_imu({0.001, Vec3::Zero(), Vec3(0, 0, 9.81)}));
  EXPECT_EQ(vio.stats().imu_rejected, 2);
  // not enough IMU yet for the static initialization
  EXPECT_EQ(vio.process_frame(0, 0.005, {}).status, EstimateStatus::Initializing);
}

TEST(Estimator, FrameInputChecks) {
  EstimatorConfig cfg;
  cfg.rig = sim::default_rig();
  Estimator est(cfg);
  const auto obs = grid_observations(cfg.rig, 0, Pose());
  est.process_frame(0, 1.0, obs);
  EXPECT_THROW(est.process_frame(1, 1.0, grid_observations(cfg.rig, 1, Pose())), OrderingError);
  EXPECT_THROW(est.process_frame(1, 2.0, obs), ContractError);  // frame id mismatch
  EXPECT_THROW(est.process_frame(1, 2.0, {{1, 5, 0, Vec2(10, 10)}}), ContractError);
  // too few features: degraded, constant-velocity output
  const auto few = grid_observations(cfg.rig, 1, Pose(), 3);
  const PoseEstimate e = est.process_frame(1, 2.0, few);
  EXPECT_EQ(e.status, EstimateStatus::Degraded);
  EXPECT_EQ(est.stats().degraded_frames, 1);
}

TEST(Estimator, Deterministic) {
  const auto sc = sim::make_scenario("circle-noisy", 7, 60);
  for (Mode mode : {Mode::Stereo, Mode::StereoImu}) {
    const RunResult a = run(sc, config_for(sc, mode)), b = run(sc, config_for(sc, mode));
    ASSERT_EQ(a.traj.size(), b.traj.size());
    for (std::size_t i = 0; i < a.traj.size(); ++i) {
      EXPECT_EQ(a.traj[i].t, b.traj[i].t);
      EXPECT_EQ(a.traj[i].pose.p, b.traj[i].pose.p);
      EXPECT_EQ(a.traj[i].pose.R.quaternion().coeffs(), b.traj[i].pose.R.quaternion().coeffs());
    }
  }
}

TEST(Estimator, DiscardedFramesMergeIntoDirectPreintegration) {
  const auto sc = sim::make_scenario("circle-noisy", 2, 60);
  const sim::SimImu imu = sim::synthesize_imu(sc.trajectory, sc.world);
  const EstimatorConfig cfg = config_for(sc, Mode::StereoImu);
  int merged = 0;
  run(sc, cfg, [&](const Estimator& est, const sim::SimFrame&, const PoseEstimate&) {
    const auto& fr = est.frames();
    for (std::size_t k = 0; k + 1 < fr.size(); ++k) {
      const Preintegration& p = *est.preintegrations()[k];
      const auto samples = sim::imu_between(imu.samples, fr[k].t, fr[k + 1].t);
      const Preintegration direct = preintegrate(samples, p.ba_lin, p.bg_lin, cfg.imu_noise);
      EXPECT_LT((p.alpha - direct.alpha).norm(), 1e-9);
      EXPECT_LT((p.beta - direct.beta).norm(), 1e-9);
      EXPECT_LT(boxminus_rotation(p.gamma, direct.gamma).norm(), 1e-9);
      EXPECT_LT((p.cov - direct.cov).norm(), 1e-9 * direct.cov.norm());
      merged += p.dt_total > 0.075;
    }
  });
  EXPECT_GT(merged, 0);
}

TEST(Estimator, RejectsCorruptedLandmarks) {
  // the default 3 px threshold is meant for sub-pixel tracks; see the ledger
  for (double sigma : {0.0, 0.5}) {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      const auto sc = sim::make_scenario("circle", seed, 80, sigma, 0.05);
      const sim::SimTracks tracks = sim::synthesize_features(sc.trajectory, sc.world);
      std::map<std::int64_t, int> seen;
      for (const auto& f : tracks.frames)
        for (const auto& o : f.observations)
          if (o.camera_id == 0) ++seen[o.feature_id];
      EstimatorConfig cfg = config_for(sc, Mode::Stereo);
      cfg.sigma_px = std::max(sigma, 0.5);
      Estimator est(cfg);
      for (const auto& f : tracks.frames) {
        est.process_frame(f.frame_id, f.t, f.observations);
        est.reject_outliers();
        EXPECT_EQ(est.reject_outliers(), 0);
      }
      int corrupted = 0, caught = 0, clean = 0, false_hits = 0;
      for (const auto& [id, n] : seen) {
        if (n < 2) continue;
        const bool bad = tracks.corrupted.count(id) > 0;
        const bool removed = est.blacklist().count(id) > 0;
        (bad ? corrupted : clean) += 1;
        (bad ? caught : false_hits) += removed;
      }
      ASSERT_GT(corrupted, 0);
      EXPECT_GE(caught, 0.9 * corrupted) << "sigma " << sigma << " seed " << seed;
      EXPECT_LT(false_hits, 0.01 * clean) << "sigma " << sigma << " seed " << seed;
    }
  }
}

TEST(EstimatorConfig, Validation) {
  auto key_of = [](const EstimatorConfig& c) {
    try {
      c.validate();
    } catch (const ConfigError& e) {
      return e.key();
    }
    return std::string();
  };
  EstimatorConfig c;
  c.rig = sim::default_rig();
  EXPECT_EQ(key_of(c), "");
  c.window_size = 3;
  EXPECT_EQ(key_of(c), "window_size");
  c = EstimatorConfig{};
  c.rig = sim::default_rig(1);
  EXPECT_EQ(key_of(c), "cameras");
  c.mode = Mode::MonoImu;
  EXPECT_EQ(key_of(c), "");
  c.imu_noise.sigma_a = 0.0;
  EXPECT_EQ(key_of(c), "imu");
  c = EstimatorConfig{};
  c.rig = sim::default_rig();
  c.sigma_px = 0.0;
  EXPECT_EQ(key_of(c), "tracker.sigma_px");
  c.sigma_px = 1.0;
  c.solver.max_iters = 0;
  EXPECT_EQ(key_of(c), "solver.max_iters");
  EXPECT_THROW(Estimator{EstimatorConfig{}}, ConfigError);
  EXPECT_EQ(parse_mode("mono-imu"), Mode::MonoImu);
  EXPECT_FALSE(parse_mode("lidar").has_value());
}
