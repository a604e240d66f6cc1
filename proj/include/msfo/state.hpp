#pragma once

#include <cstdint>

#include "msfo/manifold.hpp"

namespace msfo {

/// Navigation state of one frame. In stereo-only operation only `pose` is
/// estimated; velocity and biases stay at zero.
struct FrameState {
  std::int64_t frame_id = 0;
  double t = 0.0;
  Pose pose;
  Vec3 v = Vec3::Zero();
  Vec3 ba = Vec3::Zero();
  Vec3 bg = Vec3::Zero();

  /// [v; ba; bg]
  Vec9 speed_bias() const {
    Vec9 sb;
    sb << v, ba, bg;
    return sb;
  }

  void set_speed_bias(const Vec9& sb) {
    v = sb.segment<3>(0);
    ba = sb.segment<3>(3);
    bg = sb.segment<3>(6);
  }
};

}  // namespace msfo
