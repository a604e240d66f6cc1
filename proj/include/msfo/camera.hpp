#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <vector>

#include "msfo/errors.hpp"
#include "msfo/manifold.hpp"

namespace msfo {

/// Points closer than this to the image plane are treated as behind the camera.
inline constexpr double kMinDepth = 1e-6;

struct PinholeIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  double width = 1.0;
  double height = 1.0;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw ContractError("intrinsics: focal lengths must be positive");
    if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height)) {
      throw ContractError("intrinsics: principal point must lie inside the image");
    }
  }

  bool in_bounds(const Vec2& uv) const {
    return uv.x() >= 0.0 && uv.x() < width && uv.y() >= 0.0 && uv.y() < height;
  }
};

/// One camera of the rig. T_bc is the pose of the camera expressed in the body
/// frame, so a camera point x_c maps to the body as T_bc * x_c.
struct Camera {
  Pose T_bc;
  PinholeIntrinsics intrinsics;
};

struct CameraRig {
  std::vector<Camera> cameras;  // id 0 is the left/reference camera

  std::size_t size() const { return cameras.size(); }
  const Camera& operator[](std::size_t i) const { return cameras.at(i); }

  void validate() const {
    if (cameras.empty()) throw ContractError("camera rig: at least one camera is required");
    for (const auto& c : cameras) c.intrinsics.validate();
  }
};

struct FeatureObservation {
  std::int64_t frame_id = 0;
  int camera_id = 0;
  std::int64_t feature_id = 0;
  Vec2 uv = Vec2::Zero();
};

inline std::optional<Vec2> try_project(const PinholeIntrinsics& k, const Vec3& p) {
  if (!(p.z() > kMinDepth)) return std::nullopt;
  return Vec2(k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy);
}

inline Vec2 project(const PinholeIntrinsics& k, const Vec3& p) {
  auto uv = try_project(k, p);
  if (!uv) throw GeometryError("project: point is behind the camera");
  return *uv;
}

/// Unit-depth ray through a pixel.
inline Vec3 pixel_ray(const PinholeIntrinsics& k, const Vec2& uv) {
  return Vec3((uv.x() - k.cx) / k.fx, (uv.y() - k.cy) / k.fy, 1.0);
}

inline Vec3 backproject(const PinholeIntrinsics& k, const Vec2& uv, double depth) {
  if (!(depth > 0.0)) throw GeometryError("backproject: depth must be positive");
  return depth * pixel_ray(k, uv);
}

/// Residual and Jacobians of one reprojection observation. Pose Jacobians use
/// the [dp; dtheta] tangent of manifold.hpp.
struct ReprojectionEval {
  Vec2 residual = Vec2::Zero();
  Eigen::Matrix<double, 2, 6> d_pose_anchor = Eigen::Matrix<double, 2, 6>::Zero();
  Eigen::Matrix<double, 2, 6> d_pose_obs = Eigen::Matrix<double, 2, 6>::Zero();
  Vec2 d_inv_depth = Vec2::Zero();
};

/// obs_uv - pi(T_bc_obs^-1 T_t^-1 T_i T_bc_anchor pi^-1(1/inv_depth, anchor_uv)).
/// Returns nullopt when the point lands behind the observing camera or the
/// inverse depth is not positive.
inline std::optional<ReprojectionEval> evaluate_reprojection(const Pose& pose_anchor, const Pose& pose_obs,
                                                             const Camera& cam_anchor, const Camera& cam_obs,
                                                             double inv_depth, const Vec2& anchor_uv,
                                                             const Vec2& obs_uv, bool with_jacobians = true) {
  if (!(inv_depth > 0.0) || !std::isfinite(inv_depth)) return std::nullopt;
  const Vec3 ray = pixel_ray(cam_anchor.intrinsics, anchor_uv);
  const Vec3 p_ca = ray / inv_depth;
  const Vec3 p_bi = cam_anchor.T_bc * p_ca;
  const Vec3 p_w = pose_anchor * p_bi;
  const Mat3 Rt_T = pose_obs.R.matrix().transpose();
  const Vec3 p_bt = Rt_T * (p_w - pose_obs.p);
  const Mat3 Ro_T = cam_obs.T_bc.R.matrix().transpose();
  const Vec3 p_co = Ro_T * (p_bt - cam_obs.T_bc.p);

  const auto uv = try_project(cam_obs.intrinsics, p_co);
  if (!uv) return std::nullopt;

  ReprojectionEval out;
  out.residual = obs_uv - *uv;
  if (!with_jacobians) return out;

  const PinholeIntrinsics& k = cam_obs.intrinsics;
  const double iz = 1.0 / p_co.z();
  Eigen::Matrix<double, 2, 3> dr_dpc;
  dr_dpc << -k.fx * iz, 0.0, k.fx * p_co.x() * iz * iz,  //
      0.0, -k.fy * iz, k.fy * p_co.y() * iz * iz;

  const Mat3 Ri = pose_anchor.R.matrix();
  const Eigen::Matrix<double, 2, 3> dr_dpw = dr_dpc * Ro_T * Rt_T;
  out.d_pose_anchor.leftCols<3>() = dr_dpw;
  out.d_pose_anchor.rightCols<3>() = -dr_dpw * Ri * skew(p_bi);

  const Eigen::Matrix<double, 2, 3> dr_dpbt = dr_dpc * Ro_T;
  out.d_pose_obs.leftCols<3>() = -dr_dpbt * Rt_T;
  out.d_pose_obs.rightCols<3>() = dr_dpbt * skew(p_bt);

  const Vec3 dpca_drho = -ray / (inv_depth * inv_depth);
  out.d_inv_depth = dr_dpw * Ri * (cam_anchor.T_bc.R * dpca_drho);
  return out;
}

inline std::optional<Vec2> reprojection_residual(const Pose& pose_i, const Pose& pose_t, const Camera& cam_anchor,
                                                 const Camera& cam_obs, double inv_depth, const Vec2& anchor_uv,
                                                 const Vec2& obs_uv) {
  auto e = evaluate_reprojection(pose_i, pose_t, cam_anchor, cam_obs, inv_depth, anchor_uv, obs_uv, false);
  if (!e) return std::nullopt;
  return e->residual;
}

inline std::optional<ReprojectionEval> reprojection_jacobian(const Pose& pose_i, const Pose& pose_t,
                                                             const Camera& cam_anchor, const Camera& cam_obs,
                                                             double inv_depth, const Vec2& anchor_uv,
                                                             const Vec2& obs_uv) {
  return evaluate_reprojection(pose_i, pose_t, cam_anchor, cam_obs, inv_depth, anchor_uv, obs_uv, true);
}

/// Same-frame observation in a second camera: the body pose cancels, so only
/// the inverse depth is constrained.
inline std::optional<std::pair<Vec2, Vec2>> stereo_residual(const Camera& cam_anchor, const Camera& cam_obs,
                                                            double inv_depth, const Vec2& anchor_uv,
                                                            const Vec2& obs_uv) {
  const Pose identity;
  auto e = evaluate_reprojection(identity, identity, cam_anchor, cam_obs, inv_depth, anchor_uv, obs_uv, true);
  if (!e) return std::nullopt;
  return std::make_pair(e->residual, e->d_inv_depth);
}

}  // namespace msfo
