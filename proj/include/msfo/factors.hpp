#pragma once

// Residual factors. Every factor reports a whitened residual (already
// multiplied by the square root of its information matrix) and one Jacobian
// per state block, so the solver only ever sees ||r||^2.

#include <Eigen/Core>

#include <memory>
#include <string_view>
#include <utility>
#include <vector>

#include "msfo/camera.hpp"
#include "msfo/imu.hpp"
#include "msfo/values.hpp"

namespace msfo {

class Factor {
 public:
  explicit Factor(std::vector<BlockId> blocks) : blocks_(std::move(blocks)) {}
  virtual ~Factor() = default;

  const std::vector<BlockId>& blocks() const { return blocks_; }
  virtual int dim() const = 0;
  virtual std::string_view kind() const = 0;

  /// Fills the whitened residual and, when `jacobians` is non-null, one
  /// (dim x tangent) matrix per block. Returns false when the factor cannot be
  /// evaluated at `values` (e.g. a point behind the camera).
  virtual bool evaluate(const Values& values, Eigen::VectorXd& residual,
                        std::vector<Eigen::MatrixXd>* jacobians) const = 0;

  /// Huber threshold on the whitened residual norm; 0 disables the robust loss.
  virtual double huber_delta() const { return 0.0; }

 private:
  std::vector<BlockId> blocks_;
};

using FactorPtr = std::shared_ptr<const Factor>;

/// e = S (sum_k A_k x_k - z) over vector blocks.
class LinearFactor final : public Factor {
 public:
  LinearFactor(std::vector<BlockId> blocks, std::vector<Eigen::MatrixXd> A, Eigen::VectorXd z,
               Eigen::MatrixXd sqrt_info = {})
      : Factor(std::move(blocks)), A_(std::move(A)), z_(std::move(z)), S_(std::move(sqrt_info)) {
    if (A_.size() != this->blocks().size()) throw ContractError("linear factor: one matrix per block");
    if (S_.size() == 0) S_ = Eigen::MatrixXd::Identity(z_.size(), z_.size());
  }

  int dim() const override { return static_cast<int>(z_.size()); }
  std::string_view kind() const override { return "linear"; }

  bool evaluate(const Values& values, Eigen::VectorXd& r, std::vector<Eigen::MatrixXd>* J) const override {
    Eigen::VectorXd e = -z_;
    for (std::size_t k = 0; k < A_.size(); ++k) e += A_[k] * values.vector(blocks()[k].key);
    r = S_ * e;
    if (J) {
      J->resize(A_.size());
      for (std::size_t k = 0; k < A_.size(); ++k) (*J)[k] = S_ * A_[k];
    }
    return true;
  }

 private:
  std::vector<Eigen::MatrixXd> A_;
  Eigen::VectorXd z_;
  Eigen::MatrixXd S_;
};

/// Observation of a landmark in a later frame (any camera). Blocks:
/// anchor pose, observing pose, inverse depth.
class ReprojectionFactor final : public Factor {
 public:
  ReprojectionFactor(std::int64_t anchor_frame, std::int64_t obs_frame, std::int64_t feature_id, Camera cam_anchor,
                     Camera cam_obs, Vec2 anchor_uv, Vec2 obs_uv, double sigma_px, double huber_px)
      : Factor({BlockId::pose(anchor_frame), BlockId::pose(obs_frame), BlockId::inv_depth(feature_id)}),
        cam_anchor_(std::move(cam_anchor)),
        cam_obs_(std::move(cam_obs)),
        anchor_uv_(anchor_uv),
        obs_uv_(obs_uv),
        inv_sigma_(1.0 / sigma_px),
        huber_(huber_px / sigma_px) {}

  int dim() const override { return 2; }
  std::string_view kind() const override { return "camera"; }
  double huber_delta() const override { return huber_; }

  bool evaluate(const Values& values, Eigen::VectorXd& r, std::vector<Eigen::MatrixXd>* J) const override {
    const auto e = evaluate_reprojection(values.pose(blocks()[0].key), values.pose(blocks()[1].key), cam_anchor_,
                                         cam_obs_, values.inv_depth(blocks()[2].key), anchor_uv_, obs_uv_,
                                         J != nullptr);
    if (!e) return false;
    r = inv_sigma_ * e->residual;
    if (J) {
      J->resize(3);
      (*J)[0] = inv_sigma_ * e->d_pose_anchor;
      (*J)[1] = inv_sigma_ * e->d_pose_obs;
      (*J)[2] = inv_sigma_ * e->d_inv_depth;
    }
    return true;
  }

 private:
  Camera cam_anchor_;
  Camera cam_obs_;
  Vec2 anchor_uv_;
  Vec2 obs_uv_;
  double inv_sigma_;
  double huber_;
};

/// Same-frame observation in another camera of the rig. Only the inverse depth
/// is constrained because both images share one body pose.
class StereoFactor final : public Factor {
 public:
  StereoFactor(std::int64_t feature_id, Camera cam_anchor, Camera cam_obs, Vec2 anchor_uv, Vec2 obs_uv,
               double sigma_px, double huber_px)
      : Factor({BlockId::inv_depth(feature_id)}),
        cam_anchor_(std::move(cam_anchor)),
        cam_obs_(std::move(cam_obs)),
        anchor_uv_(anchor_uv),
        obs_uv_(obs_uv),
        inv_sigma_(1.0 / sigma_px),
        huber_(huber_px / sigma_px) {}

  int dim() const override { return 2; }
  std::string_view kind() const override { return "stereo"; }
  double huber_delta() const override { return huber_; }

  bool evaluate(const Values& values, Eigen::VectorXd& r, std::vector<Eigen::MatrixXd>* J) const override {
    const auto e = stereo_residual(cam_anchor_, cam_obs_, values.inv_depth(blocks()[0].key), anchor_uv_, obs_uv_);
    if (!e) return false;
    r = inv_sigma_ * e->first;
    if (J) {
      J->resize(1);
      (*J)[0] = inv_sigma_ * e->second;
    }
    return true;
  }

 private:
  Camera cam_anchor_;
  Camera cam_obs_;
  Vec2 anchor_uv_;
  Vec2 obs_uv_;
  double inv_sigma_;
  double huber_;
};

/// Preintegrated IMU constraint between consecutive frames. Blocks:
/// pose_i, speed_bias_i, pose_j, speed_bias_j.
class ImuFactor final : public Factor {
 public:
  ImuFactor(std::int64_t frame_i, std::int64_t frame_j, std::shared_ptr<const Preintegration> preint, Vec3 gravity)
      : Factor({BlockId::pose(frame_i), BlockId::speed_bias(frame_i), BlockId::pose(frame_j),
                BlockId::speed_bias(frame_j)}),
        preint_(std::move(preint)),
        gravity_(gravity),
        sqrt_info_(imu_sqrt_information(*preint_)) {}

  int dim() const override { return 15; }
  std::string_view kind() const override { return "imu"; }
  const Preintegration& preintegration() const { return *preint_; }

  bool evaluate(const Values& values, Eigen::VectorXd& r, std::vector<Eigen::MatrixXd>* J) const override {
    const FrameState si = state(values, 0);
    const FrameState sj = state(values, 2);
    const auto e = evaluate_imu(*preint_, si, sj, gravity_, J != nullptr);
    r = sqrt_info_ * e.residual;
    if (J) {
      J->resize(4);
      (*J)[0] = sqrt_info_ * e.jacobians.d_pose_i;
      (*J)[1] = sqrt_info_ * e.jacobians.d_speed_bias_i;
      (*J)[2] = sqrt_info_ * e.jacobians.d_pose_j;
      (*J)[3] = sqrt_info_ * e.jacobians.d_speed_bias_j;
    }
    return true;
  }

 private:
  FrameState state(const Values& values, int first_block) const {
    FrameState s;
    s.pose = values.pose(blocks()[first_block].key);
    s.set_speed_bias(values.speed_bias(blocks()[first_block + 1].key));
    return s;
  }

  std::shared_ptr<const Preintegration> preint_;
  Vec3 gravity_;
  Mat15 sqrt_info_;
};

/// Pins a pose to a reference value. With `yaw_only` the rotation part only
/// fixes the heading about the world z axis (the unobservable directions of
/// visual-inertial estimation); otherwise all six degrees of freedom.
class GaugeFactor final : public Factor {
 public:
  GaugeFactor(std::int64_t frame, Pose reference, bool yaw_only, double weight = 1e8)
      : Factor({BlockId::pose(frame)}), ref_(std::move(reference)), yaw_only_(yaw_only), s_(std::sqrt(weight)) {}

  int dim() const override { return yaw_only_ ? 4 : 6; }
  std::string_view kind() const override { return "gauge"; }

  bool evaluate(const Values& values, Eigen::VectorXd& r, std::vector<Eigen::MatrixXd>* J) const override {
    const Pose& x = values.pose(blocks()[0].key);
    const Vec3 dtheta = boxminus_rotation(x.R, ref_.R);
    r.resize(dim());
    r.head<3>() = s_ * (x.p - ref_.p);
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(dim(), 6);
    jac.topLeftCorner<3, 3>() = s_ * Mat3::Identity();
    const Mat3 Jr_inv = so3_right_jacobian_inv(dtheta);
    if (yaw_only_) {
      const Eigen::RowVector3d ez_world = ref_.R.matrix().row(2);
      r[3] = s_ * ez_world.dot(dtheta);
      jac.block<1, 3>(3, 3) = s_ * ez_world * Jr_inv;
    } else {
      r.tail<3>() = s_ * dtheta;
      jac.block<3, 3>(3, 3) = s_ * Jr_inv;
    }
    if (J) {
      J->assign(1, jac);
    }
    return true;
  }

 private:
  Pose ref_;
  bool yaw_only_;
  double s_;
};

}  // namespace msfo
