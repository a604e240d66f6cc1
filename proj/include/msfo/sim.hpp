#pragma once

// Synthetic world: analytic trajectories, IMU and feature-track synthesis, and
// the numerical oracles used by the tests (finite differences, Monte Carlo,
// forward integration).
//
// Random draws come from one std::mt19937_64 per call, seeded from
// WorldSpec::seed. Draw order:
//   synthesize_imu:      per sample: gyro noise (x,y,z), accel noise (x,y,z),
//                        then gyro-bias walk (x,y,z), accel-bias walk (x,y,z)
//   synthesize_features: per frame, per camera, per landmark in id order:
//                        pixel noise (u,v) for every visible landmark, then
//                        the outlier shift angle for corrupted landmarks
//   make_landmarks:      per landmark: angle, height, radius jitter

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "msfo/camera.hpp"
#include "msfo/errors.hpp"
#include "msfo/factors.hpp"
#include "msfo/imu.hpp"
#include "msfo/manifold.hpp"
#include "msfo/state.hpp"
#include "msfo/values.hpp"

namespace msfo::sim {

enum class TrajectoryKind { Circle, Sinusoid3d, Static };

struct TrajectorySpec {
  TrajectoryKind kind = TrajectoryKind::Circle;
  double radius = 3.0;        // m
  double angular_rate = 0.5;  // rad/s of the circle phase
  double amplitude = 0.3;     // m, vertical bob (circle) or excursion (sinusoid)
  double frequency = 0.2;     // Hz, sinusoid base frequency
  double bob_cycles = 2.0;    // vertical oscillations per circle revolution
  double height = 0.0;        // m
  double pitch = 0.0;         // rad, constant nose-up tilt
  double duration = 10.0;     // s
  /// The body rests for `lead_in` seconds, then speeds up along a quintic
  /// smoothstep over `ramp` seconds. Keeps position twice differentiable and
  /// gives IMU initialization a stationary start.
  double lead_in = 1.0;
  double ramp = 2.0;
};

struct Kinematics {
  Pose pose;
  Vec3 velocity = Vec3::Zero();      // world
  Vec3 acceleration = Vec3::Zero();  // world
  Vec3 angular_rate = Vec3::Zero();  // body
};

namespace detail {

// Time warp tau(t) with derivatives: 0 during the lead-in, smoothstep speed-up,
// then unit rate.
struct Warp {
  double tau, dtau, ddtau;
};

inline Warp time_warp(const TrajectorySpec& s, double t) {
  const double L = s.lead_in, T = s.ramp;
  if (t < L || (t == L && T > 0.0)) return {0.0, 0.0, 0.0};
  if (T > 0.0 && t < L + T) {
    const double u = (t - L) / T;
    const double u2 = u * u, u3 = u2 * u, u4 = u3 * u;
    const double S = 2.5 * u4 - 3.0 * u4 * u + u4 * u2;  // integral of the smoothstep
    const double sdot = 10.0 * u3 - 15.0 * u4 + 6.0 * u4 * u;
    const double sddot = 30.0 * u2 - 60.0 * u3 + 30.0 * u4;
    return {T * S, sdot, sddot / T};
  }
  return {0.5 * T + (t - L - T), 1.0, 0.0};
}

inline Mat3 rot_x(double a) { return Eigen::AngleAxisd(a, Vec3::UnitX()).toRotationMatrix(); }
inline Mat3 rot_y(double a) { return Eigen::AngleAxisd(a, Vec3::UnitY()).toRotationMatrix(); }
inline Mat3 rot_z(double a) { return Eigen::AngleAxisd(a, Vec3::UnitZ()).toRotationMatrix(); }

// Kinematics in the warped time tau: position and first two tau-derivatives,
// attitude and body rate per unit tau.
struct Native {
  Vec3 p, dp, ddp;
  Mat3 R;
  Vec3 w;
};

inline Native circle(const TrajectorySpec& s, double tau) {
  const double r = s.radius, om = s.angular_rate;
  const double th = om * tau;
  const double k = s.bob_cycles, A = s.amplitude;
  Native n;
  n.p = Vec3(r * std::cos(th), r * std::sin(th), s.height + A * std::sin(k * th));
  n.dp = Vec3(-r * om * std::sin(th), r * om * std::cos(th), A * k * om * std::cos(k * th));
  n.ddp = Vec3(-r * om * om * std::cos(th), -r * om * om * std::sin(th), -A * k * k * om * om * std::sin(k * th));
  // body x along the horizontal tangent, constant pitch
  n.R = rot_z(th + 0.5 * std::numbers::pi) * rot_y(-s.pitch);
  n.w = n.R.transpose() * Vec3(0.0, 0.0, om);
  return n;
}

// Position and ZYX Euler angles all sinusoidal; body rate from the Euler rates.
inline Native sinusoid(const TrajectorySpec& s, double tau) {
  const double w0 = 2.0 * std::numbers::pi * s.frequency;
  const double A = s.amplitude;
  const double f[3] = {1.0, 1.5, 2.0};
  Native n;
  for (int i = 0; i < 3; ++i) {
    const double a = (i == 2 ? 0.5 : 1.0) * A;
    n.p[i] = a * std::sin(f[i] * w0 * tau);
    n.dp[i] = a * f[i] * w0 * std::cos(f[i] * w0 * tau);
    n.ddp[i] = -a * f[i] * f[i] * w0 * w0 * std::sin(f[i] * w0 * tau);
  }
  n.p.z() += s.height;
  const double ay = 0.3, ap = 0.1, ar = 0.1;
  const double yaw = ay * std::sin(w0 * tau), dyaw = ay * w0 * std::cos(w0 * tau);
  const double pitch = ap * std::sin(1.3 * w0 * tau), dpitch = ap * 1.3 * w0 * std::cos(1.3 * w0 * tau);
  const double roll = ar * std::sin(1.7 * w0 * tau), droll = ar * 1.7 * w0 * std::cos(1.7 * w0 * tau);
  n.R = rot_z(yaw) * rot_y(pitch) * rot_x(roll);
  n.w = Vec3(droll - dyaw * std::sin(pitch), dpitch * std::cos(roll) + dyaw * std::cos(pitch) * std::sin(roll),
             -dpitch * std::sin(roll) + dyaw * std::cos(pitch) * std::cos(roll));
  return n;
}

}  // namespace detail

inline Kinematics sample_trajectory(const TrajectorySpec& spec, double t) {
  // nanosecond stamps converted to seconds may overshoot by an ulp
  if (!(t >= 0.0 && t <= spec.duration + 1e-9)) throw ContractError("sample_trajectory: t outside [0, duration]");
  t = std::min(t, spec.duration);
  Kinematics k;
  if (spec.kind == TrajectoryKind::Static) return k;
  const detail::Warp w = detail::time_warp(spec, t);
  const detail::Native n =
      spec.kind == TrajectoryKind::Circle ? detail::circle(spec, w.tau) : detail::sinusoid(spec, w.tau);
  k.pose = Pose(Rotation(n.R), n.p);
  k.velocity = n.dp * w.dtau;
  k.acceleration = n.ddp * w.dtau * w.dtau + n.dp * w.ddtau;
  k.angular_rate = n.w * w.dtau;
  return k;
}

/// Forward-looking stereo rig: cameras look along body x, image x to the right
/// (body -y), image y down (body -z).
inline CameraRig default_rig(int cameras = 2, double baseline = 0.11) {
  Mat3 R_bc;
  R_bc << 0, 0, 1, -1, 0, 0, 0, -1, 0;
  PinholeIntrinsics k{460.0, 460.0, 376.0, 240.0, 752.0, 480.0};
  CameraRig rig;
  for (int i = 0; i < cameras; ++i) {
    rig.cameras.push_back(Camera{Pose(Rotation(R_bc), Vec3(0.0, -baseline * i, 0.0)), k});
  }
  return rig;
}

struct WorldSpec {
  std::vector<Vec3> landmarks;
  CameraRig rig = default_rig();
  ImuNoise imu_noise = ImuNoise::zero();
  Vec3 ba0 = Vec3::Zero();
  Vec3 bg0 = Vec3::Zero();
  double sigma_px = 0.0;
  double imu_rate = 200.0;
  double camera_rate = 20.0;
  double gravity = kDefaultGravity;
  /// Share of landmarks whose camera-0 observations get a 20 px shift in a
  /// random direction, drawn per observation.
  double outlier_fraction = 0.0;
  double outlier_px = 20.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(imu_rate > 0.0) || !(camera_rate > 0.0)) throw ContractError("world: rates must be positive");
    if (imu_rate < camera_rate) throw ContractError("world: IMU rate must not be below the camera rate");
    if (sigma_px < 0.0) throw ContractError("world: negative pixel noise");
    imu_noise.validate(/*allow_zero=*/true);
    rig.validate();
  }
};

/// Landmarks on a vertical cylinder wall around the origin.
inline std::vector<Vec3> make_landmarks(int count, double radius, double z_min, double z_max, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> height(z_min, z_max);
  std::uniform_real_distribution<double> jitter(-0.5, 0.5);
  std::vector<Vec3> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    const double a = angle(rng);
    const double z = height(rng);
    const double r = radius + jitter(rng);
    out.emplace_back(r * std::cos(a), r * std::sin(a), z);
  }
  return out;
}

inline std::int64_t seconds_to_ns(double t) { return std::llround(t * 1e9); }
inline double ns_to_seconds(std::int64_t ns) { return static_cast<double>(ns) * 1e-9; }

inline std::int64_t period_ns(double rate) { return std::llround(1e9 / rate); }

struct SimImu {
  std::vector<ImuSample> samples;
  std::vector<std::int64_t> stamps_ns;
  std::vector<Vec3> ba;  // true bias at each sample
  std::vector<Vec3> bg;
};

inline SimImu synthesize_imu(const TrajectorySpec& spec, const WorldSpec& world) {
  world.validate();
  std::mt19937_64 rng(world.seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  const std::int64_t step = period_ns(world.imu_rate);
  const double dt = ns_to_seconds(step);
  const Vec3 g = gravity_vector(world.gravity);
  const ImuNoise& nz = world.imu_noise;
  const double sg = nz.sigma_g / std::sqrt(dt), sa = nz.sigma_a / std::sqrt(dt);
  const double sbg = nz.sigma_bg * std::sqrt(dt), sba = nz.sigma_ba * std::sqrt(dt);

  SimImu out;
  Vec3 ba = world.ba0, bg = world.bg0;
  for (std::int64_t ns = 0; ns_to_seconds(ns) <= spec.duration + 1e-9; ns += step) {
    const double t = ns_to_seconds(ns);
    const Kinematics k = sample_trajectory(spec, t);
    Vec3 wn, an, wb, ab;
    for (int i = 0; i < 3; ++i) wn[i] = sg * n01(rng);
    for (int i = 0; i < 3; ++i) an[i] = sa * n01(rng);
    ImuSample s;
    s.t = t;
    s.gyro = k.angular_rate + bg + wn;
    s.accel = k.pose.R.inverse() * (k.acceleration + g) + ba + an;
    out.samples.push_back(s);
    out.stamps_ns.push_back(ns);
    out.ba.push_back(ba);
    out.bg.push_back(bg);
    for (int i = 0; i < 3; ++i) wb[i] = sbg * n01(rng);
    for (int i = 0; i < 3; ++i) ab[i] = sba * n01(rng);
    bg += wb;
    ba += ab;
  }
  return out;
}

struct SimFrame {
  std::int64_t frame_id = 0;
  std::int64_t stamp_ns = 0;
  double t = 0.0;
  std::vector<FeatureObservation> observations;  // camera-major, feature id order
};

struct SimTracks {
  std::vector<SimFrame> frames;
  std::set<std::int64_t> corrupted;  // feature ids carrying outlier shifts
};

inline std::vector<std::int64_t> frame_stamps_ns(const TrajectorySpec& spec, const WorldSpec& world) {
  const std::int64_t step = period_ns(world.camera_rate);
  std::vector<std::int64_t> out;
  for (std::int64_t ns = 0; ns_to_seconds(ns) <= spec.duration + 1e-9; ns += step) out.push_back(ns);
  return out;
}

inline SimTracks synthesize_features(const TrajectorySpec& spec, const WorldSpec& world) {
  world.validate();
  // Separate stream from the IMU so both can be regenerated independently.
  std::mt19937_64 rng(world.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  SimTracks out;
  for (std::size_t i = 0; i < world.landmarks.size(); ++i) {
    if (u01(rng) < world.outlier_fraction) out.corrupted.insert(static_cast<std::int64_t>(i));
  }

  std::int64_t frame_id = 0;
  for (std::int64_t ns : frame_stamps_ns(spec, world)) {
    SimFrame f;
    f.frame_id = frame_id++;
    f.stamp_ns = ns;
    f.t = ns_to_seconds(ns);
    const Pose T_wb = sample_trajectory(spec, f.t).pose;
    for (std::size_t c = 0; c < world.rig.size(); ++c) {
      const Camera& cam = world.rig[c];
      const Pose T_cw = (T_wb * cam.T_bc).inverse();
      for (std::size_t i = 0; i < world.landmarks.size(); ++i) {
        const Vec3 pc = T_cw * world.landmarks[i];
        if (pc.z() < 0.1) continue;
        auto uv = try_project(cam.intrinsics, pc);
        if (!uv || !cam.intrinsics.in_bounds(*uv)) continue;
        Vec2 z = *uv;
        if (world.sigma_px > 0.0) {
          const double nu = n01(rng), nv = n01(rng);
          z += world.sigma_px * Vec2(nu, nv);
        }
        const auto id = static_cast<std::int64_t>(i);
        if (c == 0 && out.corrupted.count(id)) {
          const double a = 2.0 * std::numbers::pi * u01(rng);
          z += world.outlier_px * Vec2(std::cos(a), std::sin(a));
        }
        if (!cam.intrinsics.in_bounds(z)) continue;
        f.observations.push_back(FeatureObservation{f.frame_id, static_cast<int>(c), id, z});
      }
    }
    out.frames.push_back(std::move(f));
  }
  return out;
}

/// Ground-truth navigation state at time t, biases interpolated from the IMU
/// stream when one is supplied.
inline FrameState true_state(const TrajectorySpec& spec, double t, const SimImu* imu = nullptr) {
  const Kinematics k = sample_trajectory(spec, t);
  FrameState s;
  s.t = t;
  s.pose = k.pose;
  s.v = k.velocity;
  if (imu && !imu->samples.empty()) {
    std::size_t i = 0;
    while (i + 1 < imu->samples.size() && imu->samples[i + 1].t <= t) ++i;
    s.ba = imu->ba[i];
    s.bg = imu->bg[i];
  }
  return s;
}

/// Samples with t in [t0, t1] (inclusive), for exactly aligned streams.
inline std::vector<ImuSample> imu_between(std::span<const ImuSample> samples, double t0, double t1) {
  std::vector<ImuSample> out;
  for (const auto& s : samples) {
    if (s.t >= t0 - 1e-12 && s.t <= t1 + 1e-12) out.push_back(s);
  }
  return out;
}

/// World-frame midpoint integration of IMU samples from `s0`. Uses the same
/// discretization as preintegrate(), so the IMU residual between the two
/// states vanishes up to rounding.
inline FrameState forward_integrate(const FrameState& s0, std::span<const ImuSample> samples, const Vec3& g) {
  FrameState s = s0;
  for (std::size_t i = 1; i < samples.size(); ++i) {
    const ImuSample& a = samples[i - 1];
    const ImuSample& b = samples[i];
    const double dt = b.t - a.t;
    const Rotation R0 = s.pose.R;
    const Rotation R1 = R0 * so3_exp((0.5 * (a.gyro + b.gyro) - s.bg) * dt);
    const Vec3 acc = 0.5 * (R0 * Vec3(a.accel - s.ba) + R1 * Vec3(b.accel - s.ba)) - g;
    s.pose.p += s.v * dt + 0.5 * acc * dt * dt;
    s.v += acc * dt;
    s.pose.R = R1;
    s.t = b.t;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Numerical oracles

inline int tangent_dim(double) { return 1; }
inline int tangent_dim(const Eigen::VectorXd& x) { return static_cast<int>(x.size()); }
inline int tangent_dim(const Rotation&) { return 3; }
inline int tangent_dim(const Pose&) { return 6; }

inline double retract(double x, const Eigen::VectorXd& d) { return x + d[0]; }
inline Eigen::VectorXd retract(const Eigen::VectorXd& x, const Eigen::VectorXd& d) { return x + d; }
inline Rotation retract(const Rotation& x, const Eigen::VectorXd& d) { return boxplus(x, Vec3(d)); }
inline Pose retract(const Pose& x, const Eigen::VectorXd& d) { return boxplus(x, d); }

/// Central differences of f(x [+] d) at d = 0, one tangent column at a time.
template <class X, class F>
Eigen::MatrixXd numerical_jacobian(F&& f, const X& x, double h = 1e-6) {
  const int n = tangent_dim(x);
  Eigen::MatrixXd J;
  for (int k = 0; k < n; ++k) {
    Eigen::VectorXd d = Eigen::VectorXd::Zero(n);
    d[k] = h;
    const Eigen::VectorXd fp = f(retract(x, d));
    d[k] = -h;
    const Eigen::VectorXd fm = f(retract(x, d));
    if (!fp.allFinite() || !fm.allFinite()) throw EvaluationError("numerical_jacobian: non-finite evaluation");
    if (k == 0) J.resize(fp.size(), n);
    J.col(k) = (fp - fm) / (2.0 * h);
  }
  return J;
}

/// Finite-difference Jacobians of a factor's whitened residual, one per block.
inline std::vector<Eigen::MatrixXd> numerical_factor_jacobians(const Factor& f, const Values& values, double h = 1e-6) {
  std::vector<Eigen::MatrixXd> out;
  Eigen::VectorXd rp, rm;
  for (const auto& id : f.blocks()) {
    const int n = values.dim(id);
    Eigen::MatrixXd J(f.dim(), n);
    for (int k = 0; k < n; ++k) {
      Values vp = values, vm = values;
      Eigen::VectorXd d = Eigen::VectorXd::Zero(n);
      d[k] = h;
      vp.boxplus_block(id, d);
      d[k] = -h;
      vm.boxplus_block(id, d);
      if (!f.evaluate(vp, rp, nullptr) || !f.evaluate(vm, rm, nullptr) || !rp.allFinite() || !rm.allFinite()) {
        throw EvaluationError("numerical_factor_jacobians: factor not evaluable near the point");
      }
      J.col(k) = (rp - rm) / (2.0 * h);
    }
    out.push_back(std::move(J));
  }
  return out;
}

/// Sample covariance of `trial` outputs (deviations from the noise-free value).
/// Each trial gets its own generator seeded from `seed` and the trial index.
template <int N>
Eigen::Matrix<double, N, N> monte_carlo_covariance(
    const std::function<Eigen::Matrix<double, N, 1>(std::mt19937_64&)>& trial, int count, std::uint64_t seed) {
  if (count < 2) throw ContractError("monte_carlo_covariance: need at least two trials");
  Eigen::Matrix<double, N, 1> mean = Eigen::Matrix<double, N, 1>::Zero();
  Eigen::Matrix<double, N, N> second = Eigen::Matrix<double, N, N>::Zero();
  std::vector<Eigen::Matrix<double, N, 1>> xs;
  xs.reserve(count);
  for (int i = 0; i < count; ++i) {
    std::seed_seq sq{seed, static_cast<std::uint64_t>(i)};
    std::mt19937_64 rng(sq);
    xs.push_back(trial(rng));
    mean += xs.back();
  }
  mean /= count;
  for (const auto& x : xs) second += (x - mean) * (x - mean).transpose();
  return second / (count - 1);
}

/// One noisy preintegration trial over clean samples: white noise on every
/// sample and a bias random walk, both at the densities in `noise`. Returns
/// (da, db, dtheta, dba, dbg) relative to `reference`, which must be the
/// noise-free preintegration of `clean` at the same linearization biases.
inline Vec15 preintegration_trial(std::span<const ImuSample> clean, const Preintegration& reference,
                                  const ImuNoise& noise, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<ImuSample> noisy(clean.begin(), clean.end());
  Vec3 ba = Vec3::Zero(), bg = Vec3::Zero();
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    const double dt = i + 1 < noisy.size() ? noisy[i + 1].t - noisy[i].t : noisy[i].t - noisy[i - 1].t;
    for (int k = 0; k < 3; ++k) noisy[i].gyro[k] += bg[k] + noise.sigma_g / std::sqrt(dt) * n01(rng);
    for (int k = 0; k < 3; ++k) noisy[i].accel[k] += ba[k] + noise.sigma_a / std::sqrt(dt) * n01(rng);
    if (i + 1 < noisy.size()) {
      for (int k = 0; k < 3; ++k) bg[k] += noise.sigma_bg * std::sqrt(dt) * n01(rng);
      for (int k = 0; k < 3; ++k) ba[k] += noise.sigma_ba * std::sqrt(dt) * n01(rng);
    }
  }
  const Preintegration p = preintegrate(noisy, reference.ba_lin, reference.bg_lin, noise, false);
  Vec15 d;
  d.segment<3>(imu_index::kAlpha) = p.alpha - reference.alpha;
  d.segment<3>(imu_index::kBeta) = p.beta - reference.beta;
  d.segment<3>(imu_index::kTheta) = boxminus_rotation(p.gamma, reference.gamma);
  d.segment<3>(imu_index::kBa) = ba;
  d.segment<3>(imu_index::kBg) = bg;
  return d;
}

// ---------------------------------------------------------------------------
// Named scenarios

struct Scenario {
  TrajectorySpec trajectory;
  WorldSpec world;
};

/// `circle`: 200 frames at 20 Hz, noise free. `circle-noisy`: same geometry
/// with 1 px tracks and realistic IMU noise. `sinusoid`, `static`: other
/// trajectory shapes, noise free.
inline Scenario make_scenario(const std::string& name, std::uint64_t seed, int frames = 200, double sigma_px = -1.0,
                              double outlier_fraction = 0.0) {
  Scenario sc;
  sc.world.seed = seed;
  sc.trajectory.duration = (frames - 1) / sc.world.camera_rate;
  if (name == "circle" || name == "circle-noisy") {
    sc.trajectory.kind = TrajectoryKind::Circle;
    if (name == "circle-noisy") {
      sc.world.imu_noise = ImuNoise{};
      sc.world.sigma_px = 1.0;
    }
  } else if (name == "sinusoid") {
    sc.trajectory.kind = TrajectoryKind::Sinusoid3d;
    sc.trajectory.amplitude = 1.0;
  } else if (name == "static") {
    sc.trajectory.kind = TrajectoryKind::Static;
  } else {
    throw ContractError("unknown scenario '" + name + "'");
  }
  if (sigma_px >= 0.0) sc.world.sigma_px = sigma_px;
  sc.world.outlier_fraction = outlier_fraction;
  // The landmark layout is part of the scene, not of the noise draw.
  sc.world.landmarks = make_landmarks(400, 8.0, -2.5, 2.5, 7);
  return sc;
}

}  // namespace msfo::sim
