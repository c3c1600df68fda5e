#pragma once

#include <array>
#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "gsedit/core/image.hpp"

namespace gsedit::optim {

template <typename Scalar>
struct LossResult {
  Scalar value = 0;
  ImageBuffer<Scalar> grad;  // d value / d first argument
};

/// Mean absolute difference over all samples; subgradient 0 where a == b.
template <typename Scalar>
LossResult<Scalar> l1_loss(const ImageBuffer<Scalar>& a, const ImageBuffer<Scalar>& b) {
  require_same_shape(a, b, "l1_loss");
  const Scalar n = Scalar(a.data.size());
  LossResult<Scalar> r;
  const auto diff = (a.data - b.data).eval();
  r.value = diff.abs().sum() / n;
  r.grad = ImageBuffer<Scalar>(a.width, a.height, a.channels);
  r.grad.data = diff.sign() / n;
  return r;
}

// SSIM with an 11x11 Gaussian window (sigma 1.5), zero padding at the border,
// C1 = 0.01^2, C2 = 0.03^2, averaged over pixels and channels.
inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

namespace detail {

template <typename Scalar>
using Plane = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
std::array<Scalar, kSsimWindow> ssim_kernel() {
  std::array<Scalar, kSsimWindow> w{};
  Scalar sum = 0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - kSsimWindow / 2;
    w[i] = Scalar(std::exp(-d * d / (2 * kSsimSigma * kSsimSigma)));
    sum += w[i];
  }
  for (auto& v : w) v /= sum;
  return w;
}

/// Separable Gaussian filter, zero outside the image ("same" output size).
template <typename Scalar>
Plane<Scalar> gaussian_filter(const Plane<Scalar>& in) {
  static const auto w = ssim_kernel<Scalar>();
  constexpr int r = kSsimWindow / 2;
  const Eigen::Index h = in.rows(), wd = in.cols();
  Plane<Scalar> tmp = Plane<Scalar>::Zero(h, wd), out = Plane<Scalar>::Zero(h, wd);
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < wd; ++x) {
      Scalar acc = 0;
      for (int k = -r; k <= r; ++k) {
        const Eigen::Index xx = x + k;
        if (xx >= 0 && xx < wd) acc += w[k + r] * in(y, xx);
      }
      tmp(y, x) = acc;
    }
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < wd; ++x) {
      Scalar acc = 0;
      for (int k = -r; k <= r; ++k) {
        const Eigen::Index yy = y + k;
        if (yy >= 0 && yy < h) acc += w[k + r] * tmp(yy, x);
      }
      out(y, x) = acc;
    }
  return out;
}

template <typename Scalar>
Plane<Scalar> channel_plane(const ImageBuffer<Scalar>& img, int c) {
  Plane<Scalar> p(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) p(y, x) = img.at(x, y, c);
  return p;
}

template <typename Scalar>
void check_ssim_inputs(const ImageBuffer<Scalar>& a, const ImageBuffer<Scalar>& b, const char* where) {
  require_same_shape(a, b, where);
  if (a.width < kSsimWindow || a.height < kSsimWindow) {
    throw ContractError(std::string(where) + ": image smaller than the 11x11 SSIM window");
  }
}

}  // namespace detail

/// Mean SSIM and, when `grad` is non-null, its gradient with respect to `a`.
template <typename Scalar>
Scalar ssim(const ImageBuffer<Scalar>& a, const ImageBuffer<Scalar>& b, ImageBuffer<Scalar>* grad = nullptr) {
  using detail::gaussian_filter;
  using Plane = detail::Plane<Scalar>;
  detail::check_ssim_inputs(a, b, "ssim");
  const Scalar c1 = Scalar(kSsimC1), c2 = Scalar(kSsimC2);
  const Scalar n = Scalar(a.data.size());
  if (grad) *grad = ImageBuffer<Scalar>(a.width, a.height, a.channels);

  Scalar total = 0;
  for (int c = 0; c < a.channels; ++c) {
    const Plane pa = detail::channel_plane(a, c), pb = detail::channel_plane(b, c);
    const Plane mu_a = gaussian_filter(pa), mu_b = gaussian_filter(pb);
    const Plane saa = gaussian_filter<Scalar>(pa * pa), sbb = gaussian_filter<Scalar>(pb * pb);
    const Plane sab = gaussian_filter<Scalar>(pa * pb);

    const Plane var_a = saa - mu_a.square(), var_b = sbb - mu_b.square(), cov = sab - mu_a * mu_b;
    const Plane a1 = 2 * mu_a * mu_b + c1, a2 = 2 * cov + c2;
    const Plane b1 = mu_a.square() + mu_b.square() + c1, b2 = var_a + var_b + c2;
    const Plane map = (a1 * a2) / (b1 * b2);
    total += map.sum();

    if (grad) {
      // d map / d{mu_a, E[a^2], E[ab]} at each window center, pulled back
      // through the (symmetric) filter.
      const Plane d_mu = map * ((2 * mu_b / a1 - 2 * mu_a / b1) + (2 * mu_a / b2 - 2 * mu_b / a2)) / n;
      const Plane d_saa = -map / b2 / n;
      const Plane d_sab = 2 * map / a2 / n;
      const Plane g = gaussian_filter(d_mu) + 2 * pa * gaussian_filter(d_saa) + pb * gaussian_filter(d_sab);
      for (int y = 0; y < a.height; ++y)
        for (int x = 0; x < a.width; ++x) grad->at(x, y, c) = g(y, x);
    }
  }
  return total / n;
}

/// (1 - SSIM) / 2.
template <typename Scalar>
LossResult<Scalar> dssim_loss(const ImageBuffer<Scalar>& a, const ImageBuffer<Scalar>& b) {
  LossResult<Scalar> r;
  r.value = (Scalar(1) - ssim(a, b, &r.grad)) / 2;
  r.grad.data *= Scalar(-0.5);
  return r;
}

/// (1 - beta) L1 + beta D-SSIM.
template <typename Scalar>
LossResult<Scalar> edit_loss(const ImageBuffer<Scalar>& rendered, const ImageBuffer<Scalar>& target, Scalar beta) {
  if (!(beta >= 0 && beta <= 1)) throw InvalidParameter("edit_loss: beta must lie in [0, 1]");
  require_same_shape(rendered, target, "edit_loss");
  LossResult<Scalar> l1 = l1_loss(rendered, target);
  if (beta == Scalar(0)) return l1;
  LossResult<Scalar> ds = dssim_loss(rendered, target);
  if (beta == Scalar(1)) return ds;
  l1.value = (1 - beta) * l1.value + beta * ds.value;
  l1.grad.data = (1 - beta) * l1.grad.data + beta * ds.grad.data;
  return l1;
}

struct LiftConfig {
  double lambda1 = 1.0;  // reward for RoI rendered inside the mask
  double lambda2 = 1.0;  // penalty for RoI rendered outside it
  int iterations = 300;
  double lr = 0.1;
  double threshold = 0.5;

  void validate() const {
    if (!(lambda1 >= 0) || !(lambda2 >= 0)) throw InvalidParameter("LiftConfig: lambdas must be >= 0");
    if (!(threshold > 0 && threshold < 1)) throw InvalidParameter("LiftConfig: threshold must lie in (0, 1)");
    if (iterations < 0) throw InvalidParameter("LiftConfig: iterations must be >= 0");
    if (!(lr > 0)) throw InvalidParameter("LiftConfig: lr must be positive");
  }
};

/// Signed projection loss, per pixel:
///   L = (-lambda1 sum(R M) + lambda2 sum(R (1 - M))) / P,  dL/dR = (-lambda1 M + lambda2 (1 - M)) / P.
template <typename Scalar>
LossResult<Scalar> lift_loss(const ImageBuffer<Scalar>& rendered_roi, const ImageBuffer<Scalar>& mask,
                             const LiftConfig& cfg) {
  require_same_shape(rendered_roi, mask, "lift_loss");
  const Scalar p = Scalar(rendered_roi.data.size());
  const Scalar l1 = Scalar(cfg.lambda1), l2 = Scalar(cfg.lambda2);
  LossResult<Scalar> r;
  r.grad = ImageBuffer<Scalar>(mask.width, mask.height, mask.channels);
  r.grad.data = (-l1 * mask.data + l2 * (Scalar(1) - mask.data)) / p;
  r.value = (r.grad.data * rendered_roi.data).sum();
  return r;
}

}  // namespace gsedit::optim
