#pragma once

// Trajectory metrics: timestamp association, Horn alignment, ATE and RPE.

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <utility>
#include <vector>

#include "msfo/errors.hpp"
#include "msfo/manifold.hpp"

namespace msfo {

struct StampedPose {
  double t = 0.0;
  Pose pose;
};

using Trajectory = std::vector<StampedPose>;

inline void check_trajectory(const Trajectory& traj, const char* what) {
  for (std::size_t i = 1; i < traj.size(); ++i) {
    if (!(traj[i].t > traj[i - 1].t)) {
      throw OrderingError(std::string(what) + ": timestamps must be strictly increasing");
    }
  }
}

inline constexpr double kDefaultMaxDt = 0.01;

/// Pairs (est index, gt index) with |dt| <= max_dt, each pose used at most
/// once. Both streams are scanned in time order and every estimate takes the
/// earliest still-unused ground-truth pose inside its window, which yields the
/// largest possible number of pairs; on regular streams this is also the
/// nearest pose.
inline std::vector<std::pair<std::size_t, std::size_t>> associate(const Trajectory& est, const Trajectory& gt,
                                                                  double max_dt = kDefaultMaxDt) {
  if (est.empty() || gt.empty()) throw EvaluationError("associate: empty trajectory");
  check_trajectory(est, "associate(est)");
  check_trajectory(gt, "associate(gt)");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t j = 0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    while (j < gt.size() && gt[j].t < est[i].t - max_dt) ++j;
    if (j < gt.size() && gt[j].t <= est[i].t + max_dt) {
      out.emplace_back(i, j);
      ++j;
    }
  }
  if (out.empty()) throw EvaluationError("associate: no timestamp pairs within max_dt");
  return out;
}

/// gt ~ s R est + t
struct Alignment {
  Rotation R;
  Vec3 t = Vec3::Zero();
  double s = 1.0;

  Vec3 apply(const Vec3& x) const { return s * (R * x) + t; }
  Pose apply(const Pose& x) const { return Pose(R * x.R, apply(x.p)); }
};

/// Closed-form absolute orientation by the unit-quaternion method. With
/// `with_scale` the least-squares scale is estimated as well.
inline Alignment horn_align(const std::vector<Vec3>& est, const std::vector<Vec3>& gt, bool with_scale = false) {
  if (est.size() != gt.size()) throw ContractError("horn_align: point lists differ in length");
  const std::size_t n = est.size();
  if (n < 3) throw EvaluationError("horn_align: at least three point pairs are required");

  Vec3 me = Vec3::Zero(), mg = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    me += est[i];
    mg += gt[i];
  }
  me /= static_cast<double>(n);
  mg /= static_cast<double>(n);

  Mat3 M = Mat3::Zero();
  Eigen::MatrixXd E(3, n);
  double var_e = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 a = est[i] - me, b = gt[i] - mg;
    M += a * b.transpose();
    E.col(static_cast<Eigen::Index>(i)) = a;
    var_e += a.squaredNorm();
  }

  // Collinear or coincident estimates leave the rotation about their line free.
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(E);
  const Vec3 sv = svd.singularValues();
  if (!(sv[0] > 1e-12) || sv[1] <= 1e-9 * sv[0]) {
    throw EvaluationError("horn_align: degenerate (collinear or coincident) geometry");
  }

  const double Sxx = M(0, 0), Sxy = M(0, 1), Sxz = M(0, 2);
  const double Syx = M(1, 0), Syy = M(1, 1), Syz = M(1, 2);
  const double Szx = M(2, 0), Szy = M(2, 1), Szz = M(2, 2);
  Eigen::Matrix4d N;
  N << Sxx + Syy + Szz, Syz - Szy, Szx - Sxz, Sxy - Syx,  //
      Syz - Szy, Sxx - Syy - Szz, Sxy + Syx, Szx + Sxz,   //
      Szx - Sxz, Sxy + Syx, -Sxx + Syy - Szz, Syz + Szy,  //
      Sxy - Syx, Szx + Sxz, Syz + Szy, -Sxx - Syy + Szz;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> es(N);
  const Eigen::Vector4d q = es.eigenvectors().col(3);

  Alignment a;
  a.R = Rotation(q[0], q[1], q[2], q[3]);
  if (with_scale) {
    double num = 0.0;
    for (std::size_t i = 0; i < n; ++i) num += (gt[i] - mg).dot(a.R * Vec3(est[i] - me));
    a.s = num / var_e;
    if (!(a.s > 0.0)) throw EvaluationError("horn_align: non-positive scale");
  }
  a.t = mg - a.s * (a.R * me);
  return a;
}

struct AteResult {
  double rmse = 0.0;
  std::size_t pairs = 0;
  Alignment alignment;
};

inline AteResult ate(const Trajectory& est, const Trajectory& gt, bool align = true, bool with_scale = false,
                     double max_dt = kDefaultMaxDt) {
  const auto pairs = associate(est, gt, max_dt);
  std::vector<Vec3> pe, pg;
  for (const auto& [i, j] : pairs) {
    pe.push_back(est[i].pose.p);
    pg.push_back(gt[j].pose.p);
  }
  AteResult r;
  r.pairs = pairs.size();
  if (align) r.alignment = horn_align(pe, pg, with_scale);
  double sum = 0.0;
  for (std::size_t k = 0; k < pe.size(); ++k) sum += (pg[k] - r.alignment.apply(pe[k])).squaredNorm();
  r.rmse = std::sqrt(sum / static_cast<double>(pe.size()));
  return r;
}

inline double ate_rmse(const Trajectory& est, const Trajectory& gt, bool align = true,
                       double max_dt = kDefaultMaxDt) {
  return ate(est, gt, align, false, max_dt).rmse;
}

inline double path_length(const Trajectory& traj) {
  double d = 0.0;
  for (std::size_t i = 1; i < traj.size(); ++i) d += (traj[i].pose.p - traj[i - 1].pose.p).norm();
  return d;
}

/// {5, 10, 20, 40} m shrunk so that the longest segment spans half the path.
inline std::vector<double> default_rpe_lengths(const Trajectory& gt) {
  const double f = std::min(1.0, 0.5 * path_length(gt) / 40.0);
  return {5.0 * f, 10.0 * f, 20.0 * f, 40.0 * f};
}

struct RpeBin {
  double length = 0.0;
  std::size_t segments = 0;  // 0 flags an empty bin (path too short)
  double translation_pct = std::numeric_limits<double>::quiet_NaN();
  double rotation_deg_per_m = std::numeric_limits<double>::quiet_NaN();
};

/// KITTI-style relative error: for every associated start pose and every
/// length L, the first end pose at least L further along the gt path.
inline std::vector<RpeBin> rpe(const Trajectory& est, const Trajectory& gt, const std::vector<double>& lengths,
                               double max_dt = kDefaultMaxDt) {
  const auto pairs = associate(est, gt, max_dt);
  const std::size_t n = pairs.size();
  std::vector<double> dist(n, 0.0);
  for (std::size_t k = 1; k < n; ++k) {
    dist[k] = dist[k - 1] + (gt[pairs[k].second].pose.p - gt[pairs[k - 1].second].pose.p).norm();
  }

  std::vector<RpeBin> bins;
  for (double L : lengths) {
    if (!(L > 0.0)) throw ContractError("rpe: segment lengths must be positive");
    RpeBin bin;
    bin.length = L;
    double et = 0.0, er = 0.0;
    std::size_t j = 0;
    for (std::size_t i = 0; i < n; ++i) {
      j = std::max(j, i);
      while (j < n && dist[j] - dist[i] < L) ++j;
      if (j >= n) break;
      const Pose& e0 = est[pairs[i].first].pose;
      const Pose& e1 = est[pairs[j].first].pose;
      const Pose& g0 = gt[pairs[i].second].pose;
      const Pose& g1 = gt[pairs[j].second].pose;
      const Pose err = (g0.inverse() * g1).inverse() * (e0.inverse() * e1);
      et += err.p.norm() / L;
      er += so3_log(err.R).norm() / L;
      ++bin.segments;
    }
    if (bin.segments > 0) {
      bin.translation_pct = 100.0 * et / static_cast<double>(bin.segments);
      bin.rotation_deg_per_m = er / static_cast<double>(bin.segments) * 180.0 / std::numbers::pi;
    }
    bins.push_back(bin);
  }
  return bins;
}

}  // namespace msfo
