#include <gtest/gtest.h>

#include <random>

#include "msfo/camera.hpp"
#include "msfo/factors.hpp"
#include "msfo/sim.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace msfo;
using namespace msfo::fixture;

TEST(Projection, Examples) {
  const PinholeIntrinsics unit{1, 1, 0, 0, 10, 10};
  EXPECT_EQ(project(unit, Vec3(0, 0, 1)), Vec2(0, 0));
  const PinholeIntrinsics k{100, 100, 50, 50, 200, 200};
  EXPECT_EQ(project(k, Vec3(1, 2, 2)), Vec2(100, 150));
  EXPECT_EQ(backproject(unit, Vec2(0, 0), 2.0), Vec3(0, 0, 2));
  EXPECT_EQ(backproject(k, Vec2(100, 150), 2.0), Vec3(1, 2, 2));
}

TEST(Projection, Errors) {
  const PinholeIntrinsics k{100, 100, 50, 50, 200, 200};
  EXPECT_THROW(project(k, Vec3(0, 0, 0)), GeometryError);
  EXPECT_THROW(project(k, Vec3(0, 0, -1)), GeometryError);
  EXPECT_THROW(project(k, Vec3(0, 0, kMinDepth)), GeometryError);
  EXPECT_THROW(backproject(k, Vec2(1, 1), 0.0), GeometryError);
  EXPECT_THROW(backproject(k, Vec2(1, 1), -2.0), GeometryError);
}

TEST(Projection, RoundTrip) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const PinholeIntrinsics k{460, 455, 376, 240, 752, 480};
  for (int i = 0; i < 1000; ++i) {
    const Vec2 uv(u(rng) * k.width, u(rng) * k.height);
    const double depth = 0.01 + 50 * u(rng);
    const Vec3 p = backproject(k, uv, depth);
    EXPECT_EQ(p.z(), depth);
    EXPECT_LT((project(k, p) - uv).norm(), 1e-10);
  }
}

TEST(Intrinsics, Validation) {
  EXPECT_NO_THROW((PinholeIntrinsics{1, 1, 0, 0, 10, 10}.validate()));
  EXPECT_THROW((PinholeIntrinsics{0, 1, 0, 0, 10, 10}.validate()), ContractError);
  EXPECT_THROW((PinholeIntrinsics{1, -1, 0, 0, 10, 10}.validate()), ContractError);
  EXPECT_THROW((PinholeIntrinsics{1, 1, 10, 0, 10, 10}.validate()), ContractError);
  EXPECT_THROW((PinholeIntrinsics{1, 1, 0, -1, 10, 10}.validate()), ContractError);
  EXPECT_THROW(CameraRig{}.validate(), ContractError);
}

TEST(Reprojection, ConsistentConstructionIsZeroAndShiftIsAdditive) {
  std::mt19937_64 rng(22);
  for (int i = 0; i < 50; ++i) {
    CameraConfig c = random_camera_config(rng, 0.0);
    const auto r = reprojection_residual(c.pose_i, c.pose_t, c.cam_a, c.cam_o, c.inv_depth, c.anchor_uv, c.obs_uv);
    ASSERT_TRUE(r);
    EXPECT_LT(r->norm(), 1e-9);
    const auto s = reprojection_residual(c.pose_i, c.pose_t, c.cam_a, c.cam_o, c.inv_depth, c.anchor_uv,
                                         c.obs_uv + Vec2(1, 0));
    EXPECT_LT((*s - Vec2(1, 0)).norm(), 1e-9);
  }
}

TEST(Reprojection, MatchesHomogeneousMatrixChain) {
  std::mt19937_64 rng(23);
  for (int i = 0; i < 100; ++i) {
    const CameraConfig c = random_camera_config(rng);
    const auto r = reprojection_residual(c.pose_i, c.pose_t, c.cam_a, c.cam_o, c.inv_depth, c.anchor_uv, c.obs_uv);
    ASSERT_TRUE(r);
    // independent chain: T_bc_obs^-1 T_t^-1 T_i T_bc_anchor applied to the back-projected point
    const auto& Ka = c.cam_a.intrinsics;
    const Eigen::Vector4d pa((c.anchor_uv.x() - Ka.cx) / Ka.fx / c.inv_depth,
                             (c.anchor_uv.y() - Ka.cy) / Ka.fy / c.inv_depth, 1.0 / c.inv_depth, 1.0);
    const Mat4 Ti = oracle::homogeneous(c.pose_i.R.matrix(), c.pose_i.p);
    const Mat4 Tt = oracle::homogeneous(c.pose_t.R.matrix(), c.pose_t.p);
    const Mat4 Ta = oracle::homogeneous(c.cam_a.T_bc.R.matrix(), c.cam_a.T_bc.p);
    const Mat4 To = oracle::homogeneous(c.cam_o.T_bc.R.matrix(), c.cam_o.T_bc.p);
    const Vec3 pw = (Ti * Ta * pa).head<3>();
    const Vec2 h = oracle::project_chain(Tt, To, c.cam_o.intrinsics, pw);
    EXPECT_LT((*r - (c.obs_uv - h)).norm(), 1e-9);
  }
}

TEST(Reprojection, JacobiansMatchFiniteDifferences) {
  std::mt19937_64 rng(24);
  for (int i = 0; i < 200; ++i) {
    const CameraConfig c = random_camera_config(rng);
    const ReprojectionFactor f(0, 1, 7, c.cam_a, c.cam_o, c.anchor_uv, c.obs_uv, 1.5, 1e9);
    const Values v = camera_values(c);
    Eigen::VectorXd r;
    std::vector<Eigen::MatrixXd> J;
    ASSERT_TRUE(f.evaluate(v, r, &J));
    const auto N = sim::numerical_factor_jacobians(f, v, 1e-6);
    for (int k = 0; k < 3; ++k) EXPECT_LT(fd_error(J[k], N[k]), 1e-5) << "block " << k;
  }
}

TEST(Reprojection, StereoFactorJacobian) {
  std::mt19937_64 rng(25);
  const CameraRig rig = sim::default_rig();
  for (int i = 0; i < 200; ++i) {
    CameraConfig c = random_camera_config(rng);
    c.cam_a = rig[0];
    c.cam_o = rig[1];
    const Vec3 pb = c.cam_a.T_bc * backproject(c.cam_a.intrinsics, c.anchor_uv, 1.0 / c.inv_depth);
    c.obs_uv = project(c.cam_o.intrinsics, c.cam_o.T_bc.inverse() * pb) + Vec2(0.3, -0.7);
    const StereoFactor f(7, c.cam_a, c.cam_o, c.anchor_uv, c.obs_uv, 1.0, 1e9);
    const Values v = camera_values(c);
    Eigen::VectorXd r;
    std::vector<Eigen::MatrixXd> J;
    ASSERT_TRUE(f.evaluate(v, r, &J));
    EXPECT_EQ(J.size(), 1u);
    EXPECT_LT(fd_error(J[0], sim::numerical_factor_jacobians(f, v)[0]), 1e-5);
    // the body pose cancels: same residual as the temporal form with equal poses
    const auto t = reprojection_residual(c.pose_i, c.pose_i, c.cam_a, c.cam_o, c.inv_depth, c.anchor_uv, c.obs_uv);
    EXPECT_LT((r - *t).norm(), 1e-9);
  }
}

TEST(Reprojection, FarPointDecouplesAnchorTranslation) {
  std::mt19937_64 rng(26);
  const CameraConfig c = random_camera_config(rng);
  double prev = std::numeric_limits<double>::infinity();
  for (double rho : {1.0, 1e-1, 1e-2, 1e-3, 1e-4}) {
    const auto e = reprojection_jacobian(c.pose_i, c.pose_t, c.cam_a, c.cam_o, rho, c.anchor_uv, c.obs_uv);
    ASSERT_TRUE(e);
    const double n = e->d_pose_anchor.leftCols<3>().norm();
    EXPECT_LT(n, prev);
    prev = n;
  }
  EXPECT_LT(prev, 0.1);
}

TEST(Reprojection, ZeroGradientAtMinimum) {
  std::mt19937_64 rng(27);
  const CameraConfig c = random_camera_config(rng, 0.0);
  const ReprojectionFactor f(0, 1, 7, c.cam_a, c.cam_o, c.anchor_uv, c.obs_uv, 1.0, 1.0);
  Eigen::VectorXd r;
  std::vector<Eigen::MatrixXd> J;
  ASSERT_TRUE(f.evaluate(camera_values(c), r, &J));
  for (const auto& j : J) EXPECT_LT((j.transpose() * r).norm(), 1e-6);
}

TEST(Reprojection, SamePoseSameCameraReducesToPixelDifference) {
  std::mt19937_64 rng(28);
  for (int i = 0; i < 50; ++i) {
    CameraConfig c = random_camera_config(rng);
    const auto r = reprojection_residual(c.pose_i, c.pose_i, c.cam_a, c.cam_a, c.inv_depth, c.anchor_uv, c.obs_uv);
    EXPECT_LT((*r - (c.obs_uv - c.anchor_uv)).norm(), 1e-9);
  }
}

TEST(Reprojection, GaugeInvariance) {
  std::mt19937_64 rng(29);
  for (int i = 0; i < 100; ++i) {
    const CameraConfig c = random_camera_config(rng);
    const Pose G(Rotation(oracle::random_rotation(rng)), oracle::random_vec(rng, 20.0));
    const auto a = reprojection_residual(c.pose_i, c.pose_t, c.cam_a, c.cam_o, c.inv_depth, c.anchor_uv, c.obs_uv);
    const auto b =
        reprojection_residual(G * c.pose_i, G * c.pose_t, c.cam_a, c.cam_o, c.inv_depth, c.anchor_uv, c.obs_uv);
    EXPECT_LT((*a - *b).norm(), 1e-9);
  }
}

TEST(Reprojection, BehindCameraIsFlagged) {
  const CameraRig rig = sim::default_rig();
  const Pose pi;
  // observing body turned around: the landmark ends up behind its camera
  const Pose pt(so3_exp(Vec3(0, 0, std::numbers::pi)), Vec3::Zero());
  EXPECT_FALSE(reprojection_residual(pi, pt, rig[0], rig[0], 0.5, Vec2(376, 240), Vec2(376, 240)));
  EXPECT_FALSE(reprojection_residual(pi, pi, rig[0], rig[0], 0.0, Vec2(376, 240), Vec2(376, 240)));
  EXPECT_FALSE(reprojection_residual(pi, pi, rig[0], rig[0], -1.0, Vec2(376, 240), Vec2(376, 240)));

  const ReprojectionFactor f(0, 1, 7, rig[0], rig[0], Vec2(376, 240), Vec2(376, 240), 1.0, 1.0);
  Values v;
  v.poses[0] = pi;
  v.poses[1] = pt;
  v.inv_depths[7] = 0.5;
  Eigen::VectorXd r;
  EXPECT_FALSE(f.evaluate(v, r, nullptr));
}
