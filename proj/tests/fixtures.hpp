#pragma once

// Random problem generators shared by the unit suites and the acceptance run.

#include <random>

#include "msfo/factors.hpp"
#include "msfo/imu.hpp"
#include "msfo/sim.hpp"
#include "msfo/solver.hpp"
#include "oracles.hpp"

namespace msfo::fixture {

inline double fd_error(const Eigen::MatrixXd& analytic, const Eigen::MatrixXd& numeric) {
  return (analytic - numeric).norm() / std::max(1.0, numeric.norm());
}

inline Eigen::MatrixXd random_spd(std::mt19937_64& rng, int n, double ridge = 0.1) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Eigen::MatrixXd A(n + 3, n);
  for (int i = 0; i < A.size(); ++i) A.data()[i] = n01(rng);
  return A.transpose() * A + ridge * Eigen::MatrixXd::Identity(n, n);
}

inline Eigen::VectorXd random_vector(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = n01(rng);
  return v;
}

// ---- camera ----

struct CameraConfig {
  Pose pose_i, pose_t;
  Camera cam_a, cam_o;
  double inv_depth = 0.5;
  Vec2 anchor_uv, obs_uv;
};

/// Random anchor pose, landmark in front of the anchor camera, and an
/// observing pose close enough that the landmark stays in view.
inline CameraConfig random_camera_config(std::mt19937_64& rng, double noise_px = 2.0) {
  const CameraRig rig = sim::default_rig();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> cam(0, 1);
  std::normal_distribution<double> n(0.0, noise_px);
  for (;;) {
    CameraConfig c;
    c.pose_i = Pose(Rotation(oracle::random_rotation(rng)), oracle::random_vec(rng, 5.0));
    c.pose_t = Pose(c.pose_i.R * so3_exp(oracle::random_vec(rng, 0.2)), c.pose_i.p + oracle::random_vec(rng, 0.4));
    c.cam_a = rig[cam(rng)];
    c.cam_o = rig[cam(rng)];
    const auto& K = c.cam_a.intrinsics;
    c.anchor_uv = Vec2(50 + u(rng) * (K.width - 100), 50 + u(rng) * (K.height - 100));
    c.inv_depth = 0.15 + 0.6 * u(rng);
    const Vec3 pw = c.pose_i * (c.cam_a.T_bc * backproject(K, c.anchor_uv, 1.0 / c.inv_depth));
    const Vec3 pc = (c.pose_t * c.cam_o.T_bc).inverse() * pw;
    if (pc.z() < 0.5) continue;
    c.obs_uv = project(c.cam_o.intrinsics, pc) + Vec2(n(rng), n(rng));
    return c;
  }
}

/// Poses 0 (anchor) and 1 (observer), inverse depth under key 7.
inline Values camera_values(const CameraConfig& c) {
  Values v;
  v.poses[0] = c.pose_i;
  v.poses[1] = c.pose_t;
  v.inv_depths[7] = c.inv_depth;
  return v;
}

// ---- imu ----

inline std::vector<ImuSample> constant_samples(const Vec3& gyro, const Vec3& accel, double T, int steps) {
  std::vector<ImuSample> out;
  for (int i = 0; i <= steps; ++i) out.push_back({T * i / steps, gyro, accel});
  return out;
}

/// Clean samples over [t0, t1] of the default circle, which turns, bobs and
/// accelerates through this span.
inline std::vector<ImuSample> curved_samples(double t0, double t1) {
  sim::TrajectorySpec spec;
  spec.duration = 10.0;
  sim::WorldSpec world;
  const auto imu = sim::synthesize_imu(spec, world);
  return sim::imu_between(imu.samples, t0, t1);
}

inline FrameState random_state(std::mt19937_64& rng) {
  FrameState s;
  s.pose = Pose(Rotation(oracle::random_rotation(rng)), oracle::random_vec(rng, 5.0));
  s.v = oracle::random_vec(rng, 2.0);
  s.ba = oracle::random_vec(rng, 0.05);
  s.bg = oracle::random_vec(rng, 0.005);
  return s;
}

struct ImuConfig {
  std::shared_ptr<Preintegration> preint;
  Values values;  // pose/speed_bias under keys 0 and 1
};

/// Preintegration linearized at one bias, evaluated at states near but not on
/// the forward-integrated solution and at a slightly different bias.
inline ImuConfig random_imu_config(std::mt19937_64& rng, const std::vector<ImuSample>& s) {
  const Vec3 g = gravity_vector();
  const Vec3 ba_lin = oracle::random_vec(rng, 0.05), bg_lin = oracle::random_vec(rng, 0.005);
  ImuConfig c;
  c.preint = std::make_shared<Preintegration>(preintegrate(s, ba_lin, bg_lin, ImuNoise{}));
  FrameState si = random_state(rng);
  si.ba = ba_lin + oracle::random_vec(rng, 0.005);
  si.bg = bg_lin + oracle::random_vec(rng, 5e-4);
  FrameState sj = sim::forward_integrate(si, s, g);
  sj.pose = boxplus(sj.pose, Vec6(random_vector(rng, 6) * 0.03));
  sj.v += oracle::random_vec(rng, 0.05);
  sj.ba = si.ba + oracle::random_vec(rng, 0.01);
  sj.bg = si.bg + oracle::random_vec(rng, 0.001);
  c.values.poses[0] = si.pose;
  c.values.speed_biases[0] = si.speed_bias();
  c.values.poses[1] = sj.pose;
  c.values.speed_biases[1] = sj.speed_bias();
  return c;
}

// ---- solver ----

/// Three stereo poses along the default circle observing ten landmarks, all
/// anchored in the first frame.
struct BaProblem {
  FactorGraph graph;
  Values truth;
  Values initial;
};

inline BaProblem make_ba(std::uint64_t seed, double sigma_px, double huber_px, bool perturb) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  const CameraRig rig = sim::default_rig();
  sim::TrajectorySpec spec;
  const auto landmarks = sim::make_landmarks(400, 8.0, -2.5, 2.5, 7);
  BaProblem pb;
  const double times[3] = {3.0, 3.4, 3.8};
  for (int k = 0; k < 3; ++k) pb.truth.poses[k] = sim::sample_trajectory(spec, times[k]).pose;

  int used = 0;
  for (std::size_t i = 0; i < landmarks.size() && used < 10; ++i) {
    std::vector<std::pair<int, Vec2>> obs[3];
    bool ok = true;
    for (int k = 0; k < 3 && ok; ++k) {
      for (int c = 0; c < 2; ++c) {
        const Vec3 pc = (pb.truth.pose(k) * rig[c].T_bc).inverse() * landmarks[i];
        const auto uv = try_project(rig[c].intrinsics, pc);
        if (pc.z() < 1.0 || !uv || !rig[c].intrinsics.in_bounds(*uv)) {
          ok = false;
          break;
        }
        obs[k].emplace_back(c, *uv);
      }
    }
    if (!ok) continue;
    const std::int64_t id = used++;
    const Vec3 pc0 = (pb.truth.pose(0) * rig[0].T_bc).inverse() * landmarks[i];
    pb.truth.inv_depths[id] = 1.0 / pc0.z();
    const Vec2 anchor = obs[0][0].second;  // anchor pixel kept exact
    for (int k = 0; k < 3; ++k) {
      for (const auto& [c, uv] : obs[k]) {
        if (k == 0 && c == 0) continue;
        const Vec2 z = uv + sigma_px * Vec2(n01(rng), n01(rng));
        if (k == 0) {
          pb.graph.emplace<StereoFactor>(id, rig[0], rig[c], anchor, z, std::max(sigma_px, 0.5), huber_px);
        } else {
          pb.graph.emplace<ReprojectionFactor>(0, k, id, rig[0], rig[c], anchor, z, std::max(sigma_px, 0.5),
                                               huber_px);
        }
      }
    }
  }
  pb.graph.emplace<GaugeFactor>(0, pb.truth.pose(0), false);
  pb.initial = pb.truth;
  if (perturb) {
    for (auto& [k, p] : pb.initial.poses) {
      Vec6 d;
      d << 0.1 / std::sqrt(3.0) * Vec3(n01(rng), n01(rng), n01(rng)),
          0.05 / std::sqrt(3.0) * Vec3(n01(rng), n01(rng), n01(rng));
      p = boxplus(p, d);
    }
    for (auto& [k, rho] : pb.initial.inv_depths) rho *= 1.0 + 0.1 * n01(rng);
  }
  return pb;
}

/// Linear-Gaussian chain x0 - x1 - ... with a unary factor on every state.
inline FactorGraph linear_chain(std::mt19937_64& rng, int n, int dim) {
  FactorGraph g;
  for (int k = 0; k < n; ++k) {
    g.emplace<LinearFactor>(std::vector<BlockId>{BlockId::vector(k)},
                            std::vector<Eigen::MatrixXd>{random_spd(rng, dim, 0.5).llt().matrixU()},
                            random_vector(rng, dim));
    if (k + 1 < n) {
      Eigen::MatrixXd A(dim, dim), B(dim, dim);
      for (int i = 0; i < A.size(); ++i) {
        A.data()[i] = std::normal_distribution<double>(0, 1)(rng);
        B.data()[i] = std::normal_distribution<double>(0, 1)(rng);
      }
      g.emplace<LinearFactor>(std::vector<BlockId>{BlockId::vector(k), BlockId::vector(k + 1)},
                              std::vector<Eigen::MatrixXd>{A, B}, random_vector(rng, dim));
    }
  }
  return g;
}

/// Prior over a pose, a speed/bias block and an inverse depth with random
/// positive definite information.
inline std::shared_ptr<PriorFactor> random_prior(std::mt19937_64& rng, Values& lin, bool zero_b = false) {
  lin = Values{};
  lin.poses[0] = Pose(Rotation(oracle::random_rotation(rng)), oracle::random_vec(rng, 3));
  lin.speed_biases[0] = random_vector(rng, 9);
  lin.inv_depths[4] = 0.5;
  const std::vector<BlockId> ids = {BlockId::pose(0), BlockId::speed_bias(0), BlockId::inv_depth(4)};
  const Eigen::MatrixXd H = random_spd(rng, 16, 0.5);
  const Eigen::VectorXd b = zero_b ? Eigen::VectorXd::Zero(16) : random_vector(rng, 16);
  return std::make_shared<PriorFactor>(ids, H, b, lin);
}

inline Values perturbed(const Values& lin, std::mt19937_64& rng, double scale) {
  Values v = lin;
  v.boxplus_block(BlockId::pose(0), scale * random_vector(rng, 6));
  v.boxplus_block(BlockId::speed_bias(0), scale * random_vector(rng, 9));
  v.boxplus_block(BlockId::inv_depth(4), 0.1 * scale * random_vector(rng, 1));
  return v;
}

}  // namespace msfo::fixture
