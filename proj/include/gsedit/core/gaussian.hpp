#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include <Eigen/Dense>

#include "gsedit/core/errors.hpp"

namespace gsedit {

template <typename Scalar>
using Vec2 = Eigen::Matrix<Scalar, 2, 1>;
template <typename Scalar>
using Vec3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Vec4 = Eigen::Matrix<Scalar, 4, 1>;
template <typename Scalar>
using Mat2 = Eigen::Matrix<Scalar, 2, 2>;
template <typename Scalar>
using Mat3 = Eigen::Matrix<Scalar, 3, 3>;

/// r ~ 1.2e-4: the RoI attribute starts "outside" while staying a finite logit.
inline constexpr double kDefaultRoiLogit = -9.0;

template <typename Scalar>
Scalar logistic(Scalar x) {
  using std::exp;
  return Scalar(1) / (Scalar(1) + exp(-x));
}

template <typename Scalar>
Scalar logit(Scalar p) {
  using std::log;
  return log(p / (Scalar(1) - p));
}

/// Optimizable per-Gaussian attribute groups.
enum class Attribute { kPosition, kLogScale, kRotation, kColor, kOpacity, kRoi };

inline constexpr Attribute kAllAttributes[] = {Attribute::kPosition, Attribute::kLogScale,
                                               Attribute::kRotation, Attribute::kColor,
                                               Attribute::kOpacity,  Attribute::kRoi};

inline const char* attribute_name(Attribute a) {
  switch (a) {
    case Attribute::kPosition: return "position";
    case Attribute::kLogScale: return "log_scale";
    case Attribute::kRotation: return "rotation";
    case Attribute::kColor: return "color";
    case Attribute::kOpacity: return "opacity_logit";
    case Attribute::kRoi: return "roi_logit";
  }
  return "?";
}

inline int attribute_width(Attribute a) {
  switch (a) {
    case Attribute::kPosition:
    case Attribute::kLogScale:
    case Attribute::kColor: return 3;
    case Attribute::kRotation: return 4;
    case Attribute::kOpacity:
    case Attribute::kRoi: return 1;
  }
  return 0;
}

/// A point Gaussian. Opacity and RoI membership are stored as logits so both
/// stay strictly inside (0, 1); rotation is a w-first quaternion.
template <typename Scalar>
struct Gaussian {
  Vec3<Scalar> position = Vec3<Scalar>::Zero();
  Vec3<Scalar> log_scale = Vec3<Scalar>::Zero();
  Vec4<Scalar> rotation = Vec4<Scalar>(1, 0, 0, 0);
  Vec3<Scalar> color = Vec3<Scalar>::Constant(Scalar(0.5));
  Scalar opacity_logit = 0;
  Scalar roi_logit = Scalar(kDefaultRoiLogit);

  Scalar opacity() const { return logistic(opacity_logit); }
  Scalar roi() const { return logistic(roi_logit); }

  bool operator==(const Gaussian& o) const {
    return position == o.position && log_scale == o.log_scale && rotation == o.rotation &&
           color == o.color && opacity_logit == o.opacity_logit && roi_logit == o.roi_logit;
  }
};

template <typename Scalar>
struct GaussianScene {
  std::vector<Gaussian<Scalar>> gaussians;
  Vec3<Scalar> background_color = Vec3<Scalar>::Zero();

  std::size_t size() const { return gaussians.size(); }
  bool empty() const { return gaussians.empty(); }
  bool operator==(const GaussianScene& o) const {
    return background_color == o.background_color && gaussians == o.gaussians;
  }
};

template <typename Scalar>
struct Box3 {
  Vec3<Scalar> min_corner = Vec3<Scalar>::Zero();
  Vec3<Scalar> max_corner = Vec3<Scalar>::Zero();

  bool valid() const { return (min_corner.array() <= max_corner.array()).all(); }

  bool contains_strictly(const Vec3<Scalar>& p) const {
    return (p.array() > min_corner.array()).all() && (p.array() < max_corner.array()).all();
  }
};

/// Rotation matrix of q / |q| for a w-first quaternion. Generic over the scalar
/// so the projection can be differentiated with automatic differentiation.
template <typename T>
Mat3<T> rotation_from_quaternion(const Vec4<T>& q) {
  using std::sqrt;
  const T n = sqrt(q.squaredNorm());
  const T w = q(0) / n, x = q(1) / n, y = q(2) / n, z = q(3) / n;
  Mat3<T> r;
  r << T(1) - T(2) * (y * y + z * z), T(2) * (x * y - w * z), T(2) * (x * z + w * y),
      T(2) * (x * y + w * z), T(1) - T(2) * (x * x + z * z), T(2) * (y * z - w * x),
      T(2) * (x * z - w * y), T(2) * (y * z + w * x), T(1) - T(2) * (x * x + y * y);
  return r;
}

namespace detail {

template <typename T>
Mat3<T> covariance_unchecked(const Vec3<T>& log_scale, const Vec4<T>& rotation) {
  using std::exp;
  const Mat3<T> r = rotation_from_quaternion(rotation);
  Mat3<T> m = r;
  for (int k = 0; k < 3; ++k) m.col(k) *= exp(log_scale(k));
  return m * m.transpose();
}

}  // namespace detail

/// Sigma = R S S^T R^T with S = diag(exp(log_scale)).
template <typename Scalar>
Mat3<Scalar> covariance_from_params(const Vec3<Scalar>& log_scale, const Vec4<Scalar>& rotation) {
  if (!log_scale.allFinite() || !rotation.allFinite()) {
    throw InvalidParameter("covariance_from_params: non-finite input");
  }
  if (rotation.squaredNorm() == Scalar(0)) {
    throw InvalidParameter("covariance_from_params: zero quaternion");
  }
  return detail::covariance_unchecked(log_scale, rotation);
}

template <typename Scalar>
Mat3<Scalar> covariance(const Gaussian<Scalar>& g) {
  return covariance_from_params(g.log_scale, g.rotation);
}

template <typename Scalar>
Vec4<Scalar> quaternion_from_rotation(const Mat3<Scalar>& r) {
  const Eigen::Quaternion<Scalar> q(r);
  return Vec4<Scalar>(q.w(), q.x(), q.y(), q.z());
}

/// Hamilton product a * b for w-first quaternions.
template <typename Scalar>
Vec4<Scalar> quaternion_multiply(const Vec4<Scalar>& a, const Vec4<Scalar>& b) {
  return Vec4<Scalar>(a(0) * b(0) - a(1) * b(1) - a(2) * b(2) - a(3) * b(3),
                      a(0) * b(1) + a(1) * b(0) + a(2) * b(3) - a(3) * b(2),
                      a(0) * b(2) - a(1) * b(3) + a(2) * b(0) + a(3) * b(1),
                      a(0) * b(3) + a(1) * b(2) - a(2) * b(1) + a(3) * b(0));
}

}  // namespace gsedit
