#pragma once

#include <cmath>
#include <string>

#include "gsedit/core/gaussian.hpp"

namespace gsedit {

/// Pinhole camera. Pixel (u, v) has its center at integer coordinates, so a
/// point on the optical axis lands exactly on (cx, cy).
template <typename Scalar>
struct Camera {
  Scalar fx = 1, fy = 1, cx = 0, cy = 0;
  int width = 1, height = 1;
  Mat3<Scalar> rotation = Mat3<Scalar>::Identity();  // world -> camera
  Vec3<Scalar> translation = Vec3<Scalar>::Zero();
  Scalar near_clip = Scalar(0.01);

  Vec3<Scalar> to_camera(const Vec3<Scalar>& world) const { return rotation * world + translation; }

  Vec3<Scalar> center() const { return -rotation.transpose() * translation; }

  bool operator==(const Camera& o) const {
    return fx == o.fx && fy == o.fy && cx == o.cx && cy == o.cy && width == o.width &&
           height == o.height && rotation == o.rotation && translation == o.translation &&
           near_clip == o.near_clip;
  }
};

/// Throws ValidationError unless intrinsics are positive and the rotation is a
/// proper rotation (orthonormal within `tolerance`, determinant +1).
template <typename Scalar>
void validate_camera(const Camera<Scalar>& cam, Scalar tolerance = Scalar(1e-4)) {
  using std::abs;
  if (!(cam.fx > 0) || !(cam.fy > 0)) throw ValidationError("camera: fx and fy must be positive");
  if (cam.width < 1 || cam.height < 1) throw ValidationError("camera: width and height must be >= 1");
  if (!cam.rotation.allFinite() || !cam.translation.allFinite() || !std::isfinite(cam.cx) ||
      !std::isfinite(cam.cy)) {
    throw ValidationError("camera: non-finite parameter");
  }
  const Scalar err = (cam.rotation * cam.rotation.transpose() - Mat3<Scalar>::Identity())
                         .cwiseAbs()
                         .maxCoeff();
  if (err > tolerance) {
    throw ValidationError("camera: rotation not orthonormal (error " + std::to_string(err) + ")");
  }
  if (cam.rotation.determinant() < 0) {
    throw ValidationError("camera: rotation has determinant -1 (reflection)");
  }
}

/// Camera at `eye` looking at `target`; image y grows downward, camera z forward.
template <typename Scalar>
Camera<Scalar> look_at(const Vec3<Scalar>& eye, const Vec3<Scalar>& target, const Vec3<Scalar>& up,
                       int width, int height, Scalar focal) {
  const Vec3<Scalar> forward = (target - eye).normalized();
  const Vec3<Scalar> right = forward.cross(up).normalized();
  const Vec3<Scalar> down = forward.cross(right);
  Camera<Scalar> cam;
  cam.rotation.row(0) = right.transpose();
  cam.rotation.row(1) = down.transpose();
  cam.rotation.row(2) = forward.transpose();
  cam.translation = -cam.rotation * eye;
  cam.width = width;
  cam.height = height;
  cam.fx = cam.fy = focal;
  cam.cx = Scalar(width) / 2;
  cam.cy = Scalar(height) / 2;
  return cam;
}

}  // namespace gsedit
