#pragma once

// IMU preintegration between two frames.
//
// Sign convention: the accelerometer reports specific force
//   f = R^-1 (a_world + g_world),  g_world = (0, 0, |g|),
// so the preintegrated deltas relate consecutive states by
//   alpha = R_i^-1 (p_j - p_i + 1/2 g dt^2 - v_i dt)
//   beta  = R_i^-1 (v_j - v_i + g dt)
//   gamma = R_i^-1 R_j.
//
// Error-state order everywhere is (alpha, beta, theta, ba, bg). The covariance
// treats the bias error as the drift of the true bias away from the
// linearization bias, which is the quantity the bias-walk residual measures.

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>
#include <span>
#include <vector>

#include "msfo/errors.hpp"
#include "msfo/manifold.hpp"
#include "msfo/state.hpp"

namespace msfo {

using Mat15 = Eigen::Matrix<double, 15, 15>;
using Vec15 = Eigen::Matrix<double, 15, 1>;

namespace imu_index {
inline constexpr int kAlpha = 0;
inline constexpr int kBeta = 3;
inline constexpr int kTheta = 6;
inline constexpr int kBa = 9;
inline constexpr int kBg = 12;
}  // namespace imu_index

inline constexpr double kDefaultGravity = 9.81;
inline constexpr double kCovarianceSeed = 1e-12;

inline Vec3 gravity_vector(double norm = kDefaultGravity) { return Vec3(0.0, 0.0, norm); }

struct ImuSample {
  double t = 0.0;
  Vec3 gyro = Vec3::Zero();   // rad/s
  Vec3 accel = Vec3::Zero();  // m/s^2, specific force in the body frame
};

/// Continuous-time noise densities.
struct ImuNoise {
  double sigma_g = 1.7e-4;   // rad/s/sqrt(Hz)
  double sigma_a = 2.0e-3;   // m/s^2/sqrt(Hz)
  double sigma_bg = 1.9e-5;  // rad/s^2/sqrt(Hz)
  double sigma_ba = 3.0e-3;  // m/s^3/sqrt(Hz)

  static ImuNoise zero() { return ImuNoise{0.0, 0.0, 0.0, 0.0}; }

  void validate(bool allow_zero = false) const {
    for (double s : {sigma_g, sigma_a, sigma_bg, sigma_ba}) {
      if (!std::isfinite(s) || s < 0.0 || (!allow_zero && s == 0.0)) {
        throw ContractError("imu noise: densities must be strictly positive");
      }
    }
  }
};

/// Relative motion deltas, bias-corrected or raw.
struct ImuDeltas {
  Vec3 alpha = Vec3::Zero();
  Vec3 beta = Vec3::Zero();
  Rotation gamma;
};

struct Preintegration {
  Vec3 alpha = Vec3::Zero();
  Vec3 beta = Vec3::Zero();
  Rotation gamma;
  Mat15 cov = kCovarianceSeed * Mat15::Identity();
  /// d(error state)/d(initial error state), bias columns taken w.r.t. the
  /// linearization biases.
  Mat15 jacobian = Mat15::Identity();
  Vec3 ba_lin = Vec3::Zero();
  Vec3 bg_lin = Vec3::Zero();
  double dt_total = 0.0;
  ImuNoise noise = ImuNoise::zero();
  std::vector<ImuSample> samples;

  Mat3 d_alpha_d_ba() const { return jacobian.block<3, 3>(imu_index::kAlpha, imu_index::kBa); }
  Mat3 d_alpha_d_bg() const { return jacobian.block<3, 3>(imu_index::kAlpha, imu_index::kBg); }
  Mat3 d_beta_d_ba() const { return jacobian.block<3, 3>(imu_index::kBeta, imu_index::kBa); }
  Mat3 d_beta_d_bg() const { return jacobian.block<3, 3>(imu_index::kBeta, imu_index::kBg); }
  Mat3 d_theta_d_bg() const { return jacobian.block<3, 3>(imu_index::kTheta, imu_index::kBg); }

  double t_begin() const { return samples.empty() ? 0.0 : samples.front().t; }
  double t_end() const { return samples.empty() ? dt_total : samples.back().t; }
};

namespace detail {

inline void check_samples(std::span<const ImuSample> samples) {
  if (samples.size() < 2) throw InsufficientDataError("preintegrate: at least two IMU samples are required");
  for (std::size_t i = 1; i < samples.size(); ++i) {
    if (!(samples[i].t > samples[i - 1].t)) {
      throw OrderingError("preintegrate: IMU timestamps must be strictly increasing");
    }
  }
}

/// One midpoint step from s0 to s1. Updates the deltas in `p` and, when asked,
/// the bias Jacobian and covariance.
inline void midpoint_step(Preintegration& p, const ImuSample& s0, const ImuSample& s1, bool with_covariance) {
  using namespace imu_index;
  const double dt = s1.t - s0.t;
  const Vec3 w = 0.5 * (s0.gyro + s1.gyro) - p.bg_lin;
  const Vec3 wdt = w * dt;
  const Rotation step = so3_exp(wdt);
  const Rotation gamma1 = p.gamma * step;

  const Mat3 R0 = p.gamma.matrix();
  const Mat3 R1 = gamma1.matrix();
  const Vec3 f0 = s0.accel - p.ba_lin;
  const Vec3 f1 = s1.accel - p.ba_lin;
  const Vec3 acc = 0.5 * (R0 * f0 + R1 * f1);

  if (with_covariance) {
    const Mat3 I = Mat3::Identity();
    const Mat3 Jr = so3_right_jacobian(wdt);
    const Mat3 F_tt = step.matrix().transpose();
    const Mat3 F_tbg = -Jr * dt;
    const Mat3 dacc_dt = -0.5 * (R0 * skew(f0) + R1 * skew(f1) * F_tt);
    const Mat3 dacc_dba = -0.5 * (R0 + R1);
    const Mat3 dacc_dbg = -0.5 * R1 * skew(f1) * F_tbg;

    Mat15 F = Mat15::Identity();
    F.block<3, 3>(kAlpha, kBeta) = I * dt;
    F.block<3, 3>(kAlpha, kTheta) = 0.5 * dt * dt * dacc_dt;
    F.block<3, 3>(kAlpha, kBa) = 0.5 * dt * dt * dacc_dba;
    F.block<3, 3>(kAlpha, kBg) = 0.5 * dt * dt * dacc_dbg;
    F.block<3, 3>(kBeta, kTheta) = dt * dacc_dt;
    F.block<3, 3>(kBeta, kBa) = dt * dacc_dba;
    F.block<3, 3>(kBeta, kBg) = dt * dacc_dbg;
    F.block<3, 3>(kTheta, kTheta) = F_tt;
    F.block<3, 3>(kTheta, kBg) = F_tbg;

    // Noise inputs: accel white noise, gyro white noise, accel walk, gyro walk.
    Eigen::Matrix<double, 15, 12> G = Eigen::Matrix<double, 15, 12>::Zero();
    G.block<3, 3>(kAlpha, 0) = -0.5 * dt * dt * dacc_dba;
    G.block<3, 3>(kAlpha, 3) = -0.5 * dt * dt * dacc_dbg;
    G.block<3, 3>(kBeta, 0) = -dt * dacc_dba;
    G.block<3, 3>(kBeta, 3) = -dt * dacc_dbg;
    G.block<3, 3>(kTheta, 3) = -F_tbg;
    G.block<3, 3>(kBa, 6) = I * dt;
    G.block<3, 3>(kBg, 9) = I * dt;

    Eigen::Matrix<double, 12, 1> q;
    const ImuNoise& n = p.noise;
    q << Vec3::Constant(n.sigma_a * n.sigma_a), Vec3::Constant(n.sigma_g * n.sigma_g),
        Vec3::Constant(n.sigma_ba * n.sigma_ba), Vec3::Constant(n.sigma_bg * n.sigma_bg);
    q /= dt;

    // The covariance tracks the true-bias drift, whose effect on the deltas has
    // the opposite sign of an error in the bias estimate.
    Mat15 Fd = F;
    Fd.block<9, 6>(0, kBa) = -F.block<9, 6>(0, kBa);

    p.jacobian = F * p.jacobian;
    p.cov = Fd * p.cov * Fd.transpose() + G * q.asDiagonal() * G.transpose();
    p.cov = 0.5 * (p.cov + p.cov.transpose()).eval();
  }

  p.alpha += p.beta * dt + 0.5 * acc * dt * dt;
  p.beta += acc * dt;
  p.gamma = gamma1;
  p.dt_total += dt;
}

}  // namespace detail

/// Midpoint preintegration of `samples` at fixed linearization biases.
/// Gravity is not removed here; it enters only through the residual.
inline Preintegration preintegrate(std::span<const ImuSample> samples, const Vec3& ba_lin, const Vec3& bg_lin,
                                   const ImuNoise& noise, bool with_covariance = true) {
  detail::check_samples(samples);
  noise.validate(/*allow_zero=*/true);
  Preintegration p;
  p.ba_lin = ba_lin;
  p.bg_lin = bg_lin;
  p.noise = noise;
  p.samples.assign(samples.begin(), samples.end());
  for (std::size_t i = 1; i < samples.size(); ++i) {
    detail::midpoint_step(p, samples[i - 1], samples[i], with_covariance);
  }
  return p;
}

inline ImuDeltas bias_corrected_delta(const Preintegration& p, const Vec3& ba, const Vec3& bg) {
  const Vec3 dba = ba - p.ba_lin;
  const Vec3 dbg = bg - p.bg_lin;
  ImuDeltas d;
  d.alpha = p.alpha + p.d_alpha_d_ba() * dba + p.d_alpha_d_bg() * dbg;
  d.beta = p.beta + p.d_beta_d_ba() * dba + p.d_beta_d_bg() * dbg;
  d.gamma = p.gamma * so3_exp(p.d_theta_d_bg() * dbg);
  return d;
}

inline Preintegration repropagate(const Preintegration& p, const Vec3& ba, const Vec3& bg) {
  if (p.samples.empty()) throw ContractError("repropagate: preintegration holds no samples");
  return preintegrate(p.samples, ba, bg, p.noise);
}

/// Biases far enough from the linearization point that first-order correction
/// is no longer trusted.
inline bool needs_repropagation(const Preintegration& p, const Vec3& ba, const Vec3& bg) {
  return (ba - p.ba_lin).cwiseAbs().maxCoeff() > 1e-2 || (bg - p.bg_lin).cwiseAbs().maxCoeff() > 1e-3;
}

/// Deltas of [t0, t2] from those of [t0, t1] and [t1, t2].
inline ImuDeltas compose_deltas(const ImuDeltas& first, const ImuDeltas& second, double dt_second) {
  ImuDeltas d;
  d.alpha = first.alpha + first.beta * dt_second + first.gamma * second.alpha;
  d.beta = first.beta + first.gamma * second.beta;
  d.gamma = first.gamma * second.gamma;
  return d;
}

/// Merge two adjacent intervals into one by re-integrating the union of their
/// samples at the first interval's linearization biases.
inline Preintegration concatenate(const Preintegration& first, const Preintegration& second) {
  std::vector<ImuSample> merged = first.samples;
  auto it = second.samples.begin();
  if (!merged.empty() && it != second.samples.end() && it->t == merged.back().t) ++it;
  merged.insert(merged.end(), it, second.samples.end());
  return preintegrate(merged, first.ba_lin, first.bg_lin, first.noise);
}

/// Predicted pose and velocity at the end of the interval.
inline std::pair<Pose, Vec3> predict_state(const FrameState& s, const ImuDeltas& d, double dt, const Vec3& g) {
  const Vec3 p = s.pose.p + s.v * dt - 0.5 * g * dt * dt + s.pose.R * d.alpha;
  const Vec3 v = s.v - g * dt + s.pose.R * d.beta;
  return {Pose(s.pose.R * d.gamma, p), v};
}

struct ImuJacobians {
  Eigen::Matrix<double, 15, 6> d_pose_i = Eigen::Matrix<double, 15, 6>::Zero();
  Eigen::Matrix<double, 15, 9> d_speed_bias_i = Eigen::Matrix<double, 15, 9>::Zero();
  Eigen::Matrix<double, 15, 6> d_pose_j = Eigen::Matrix<double, 15, 6>::Zero();
  Eigen::Matrix<double, 15, 9> d_speed_bias_j = Eigen::Matrix<double, 15, 9>::Zero();
};

struct ImuResidualEval {
  Vec15 residual = Vec15::Zero();
  ImuJacobians jacobians;
};

/// Unweighted residual: deltas minus the state-predicted deltas for the first
/// nine rows, bias change for the last six.
inline ImuResidualEval evaluate_imu(const Preintegration& p, const FrameState& si, const FrameState& sj,
                                    const Vec3& g, bool with_jacobians = true) {
  using namespace imu_index;
  const double dt = p.dt_total;
  const ImuDeltas d = bias_corrected_delta(p, si.ba, si.bg);
  const Mat3 RiT = si.pose.R.matrix().transpose();
  const Vec3 dp = RiT * (sj.pose.p - si.pose.p + 0.5 * g * dt * dt - si.v * dt);
  const Vec3 dv = RiT * (sj.v - si.v + g * dt);
  const Rotation dR = si.pose.R.inverse() * sj.pose.R;

  ImuResidualEval out;
  Vec15& r = out.residual;
  r.segment<3>(kAlpha) = d.alpha - dp;
  r.segment<3>(kBeta) = d.beta - dv;
  r.segment<3>(kTheta) = boxminus_rotation(d.gamma, dR);
  r.segment<3>(kBa) = sj.ba - si.ba;
  r.segment<3>(kBg) = sj.bg - si.bg;
  if (!with_jacobians) return out;

  const Mat3 I = Mat3::Identity();
  const Vec3 r_theta = r.segment<3>(kTheta);
  const Mat3 Jr_inv = so3_right_jacobian_inv(r_theta);
  const Mat3 gamma_m = d.gamma.matrix();
  const Mat3 E = (sj.pose.R.inverse() * si.pose.R * d.gamma).matrix();
  const Vec3 dbg = si.bg - p.bg_lin;
  const Mat3 Jt_bg = p.d_theta_d_bg();

  ImuJacobians& J = out.jacobians;
  // pose i: [dp, dtheta]
  J.d_pose_i.block<3, 3>(kAlpha, 0) = RiT;
  J.d_pose_i.block<3, 3>(kAlpha, 3) = -skew(dp);
  J.d_pose_i.block<3, 3>(kBeta, 3) = -skew(dv);
  J.d_pose_i.block<3, 3>(kTheta, 3) = Jr_inv * gamma_m.transpose();
  // speed/bias i: [v, ba, bg]
  J.d_speed_bias_i.block<3, 3>(kAlpha, 0) = RiT * dt;
  J.d_speed_bias_i.block<3, 3>(kAlpha, 3) = p.d_alpha_d_ba();
  J.d_speed_bias_i.block<3, 3>(kAlpha, 6) = p.d_alpha_d_bg();
  J.d_speed_bias_i.block<3, 3>(kBeta, 0) = RiT;
  J.d_speed_bias_i.block<3, 3>(kBeta, 3) = p.d_beta_d_ba();
  J.d_speed_bias_i.block<3, 3>(kBeta, 6) = p.d_beta_d_bg();
  J.d_speed_bias_i.block<3, 3>(kTheta, 6) = Jr_inv * so3_right_jacobian(Jt_bg * dbg) * Jt_bg;
  J.d_speed_bias_i.block<3, 3>(kBa, 3) = -I;
  J.d_speed_bias_i.block<3, 3>(kBg, 6) = -I;
  // pose j
  J.d_pose_j.block<3, 3>(kAlpha, 0) = -RiT;
  J.d_pose_j.block<3, 3>(kTheta, 3) = -Jr_inv * E.transpose();
  // speed/bias j
  J.d_speed_bias_j.block<3, 3>(kBeta, 0) = -RiT;
  J.d_speed_bias_j.block<3, 3>(kBa, 3) = I;
  J.d_speed_bias_j.block<3, 3>(kBg, 6) = I;
  return out;
}

inline Vec15 imu_residual(const Preintegration& p, const FrameState& si, const FrameState& sj, const Vec3& g) {
  return evaluate_imu(p, si, sj, g, false).residual;
}

inline ImuJacobians imu_jacobian(const Preintegration& p, const FrameState& si, const FrameState& sj,
                                 const Vec3& g) {
  return evaluate_imu(p, si, sj, g, true).jacobians;
}

/// Upper-triangular S with S^T S = cov^-1, so that |S r|^2 = r^T cov^-1 r.
inline Mat15 imu_sqrt_information(const Preintegration& p) {
  const Mat15 info = p.cov.inverse();
  const Mat15 sym = 0.5 * (info + info.transpose());
  Eigen::LLT<Mat15> llt(sym);
  if (llt.info() != Eigen::Success) throw EvaluationError("imu: covariance is not positive definite");
  return llt.matrixU();
}

}  // namespace msfo
