#include <cmath>
#include <random>

#include "doctest.h"
#include "gsedit/raster/rasterizer.hpp"
#include "test_support.hpp"

using namespace gsedit;
using namespace gsedit::raster;
using gsedit::testing::axis_camera;
using gsedit::testing::Cam;
using gsedit::testing::Scene;

namespace {

Gaussian<double> gaussian_at(Vec3<double> p, double sigma, double alpha, Vec3<double> color) {
  Gaussian<double> g;
  g.position = p;
  g.log_scale.setConstant(std::log(sigma));
  g.opacity_logit = logit(alpha);
  g.color = color;
  return g;
}

}  // namespace

TEST_CASE("project: on-axis gaussian lands on the principal point") {
  const Cam cam = axis_camera(32, 40.0);
  const auto s = project(gaussian_at({0, 0, 3}, 0.1, 0.5, {1, 1, 1}), cam);
  REQUIRE(s);
  CHECK(s->mean2d(0) == doctest::Approx(16.0).epsilon(1e-15));
  CHECK(s->mean2d(1) == doctest::Approx(16.0).epsilon(1e-15));
  CHECK(s->depth == 3.0);
}

TEST_CASE("project: isotropic covariance matches a finite-difference Jacobian of the pinhole map") {
  const Cam cam = axis_camera(64, 50.0);
  const double d = 5.0, sigma = 0.2;
  const Vec3<double> p(0.3, -0.2, d);
  const auto s = project(gaussian_at(p, sigma, 0.5, {1, 1, 1}), cam);
  REQUIRE(s);

  // Oracle: numerically differentiate the projection u(p) = f p_xy / p_z + c.
  auto proj = [&](const Vec3<double>& q) {
    return Vec2<double>(cam.fx * q(0) / q(2) + cam.cx, cam.fy * q(1) / q(2) + cam.cy);
  };
  Eigen::Matrix<double, 2, 3> j;
  const double h = 1e-6;
  for (int k = 0; k < 3; ++k) {
    Vec3<double> e = Vec3<double>::Zero();
    e(k) = h;
    j.col(k) = (proj(p + e) - proj(p - e)) / (2 * h);
  }
  const Mat2<double> expected = sigma * sigma * j * j.transpose() + 0.3 * Mat2<double>::Identity();
  CHECK((s->cov2d - expected).cwiseAbs().maxCoeff() < 1e-6);

  // On the optical axis it reduces to (f/d)^2 sigma^2 I plus the dilation floor.
  const auto on_axis = project(gaussian_at({0, 0, d}, sigma, 0.5, {1, 1, 1}), cam);
  const double iso = std::pow(cam.fx / d, 2) * sigma * sigma;
  CHECK(on_axis->cov2d(0, 0) == doctest::Approx(iso + 0.3).epsilon(1e-12));
  CHECK(on_axis->cov2d(1, 1) == doctest::Approx(iso + 0.3).epsilon(1e-12));
  CHECK(std::abs(on_axis->cov2d(0, 1)) < 1e-12);
}

TEST_CASE("project: culling") {
  const Cam cam = axis_camera(32, 40.0);
  CHECK_FALSE(project(gaussian_at({0, 0, -2}, 0.1, 0.5, {1, 1, 1}), cam));
  CHECK_FALSE(project(gaussian_at({0, 0, 0.005}, 0.1, 0.5, {1, 1, 1}), cam));
  CHECK_FALSE(project(gaussian_at({50, 0, 2}, 0.01, 0.5, {1, 1, 1}), cam));
}

TEST_CASE("render: empty scene gives the background") {
  const Cam cam = axis_camera(16, 20.0);
  Scene s;
  CHECK(render(s, cam, Channel::kColor).data.isZero(0));
  s.background_color = Vec3<double>(0.2, 0.4, 0.6);
  const auto img = render(s, cam, Channel::kColor);
  CHECK(img.at(3, 5, 1) == 0.4);
  CHECK(render(s, cam, Channel::kRoi).data.isZero(0));
}

TEST_CASE("render: compositing of one and two gaussians at the projected center") {
  const Cam cam = axis_camera(32, 40.0);
  Scene one;
  one.gaussians.push_back(gaussian_at({0, 0, 3}, 0.1, 0.8, {1, 0, 0}));
  const auto a = render(one, cam, Channel::kColor);
  CHECK(std::abs(a.at(16, 16, 0) - 0.8) < 1e-6);
  CHECK(a.at(16, 16, 1) == 0.0);
  CHECK(a.at(16, 16, 2) == 0.0);

  // Front red (alpha 0.5) over back blue (alpha 0.5): red 0.5, blue 0.5 * (1 - 0.5).
  Scene two;
  two.gaussians.push_back(gaussian_at({0, 0, 4}, 0.1, 0.5, {0, 0, 1}));
  two.gaussians.push_back(gaussian_at({0, 0, 3}, 0.1, 0.5, {1, 0, 0}));
  const auto b = render(two, cam, Channel::kColor);
  CHECK(std::abs(b.at(16, 16, 0) - 0.5) < 1e-6);
  CHECK(std::abs(b.at(16, 16, 2) - 0.25) < 1e-6);

  // Exactly coincident: equal depth resolves by ascending index.
  Scene tie;
  tie.gaussians.push_back(gaussian_at({0, 0, 3}, 0.1, 0.5, {0, 1, 0}));
  tie.gaussians.push_back(gaussian_at({0, 0, 3}, 0.1, 0.5, {1, 0, 0}));
  const auto c = render(tie, cam, Channel::kColor);
  CHECK(std::abs(c.at(16, 16, 1) - 0.5) < 1e-6);
  CHECK(std::abs(c.at(16, 16, 0) - 0.25) < 1e-6);
}

TEST_CASE("render: saturated roi channel with an opaque splat") {
  const Cam cam = axis_camera(32, 40.0);
  Scene s;
  auto g = gaussian_at({0, 0, 3}, 0.1, 0.5, {1, 1, 1});
  g.opacity_logit = 40.0;
  g.roi_logit = 40.0;
  s.gaussians.push_back(g);
  CHECK(render(s, cam, Channel::kRoi).at(16, 16) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("render: invariants on random scenes") {
  std::mt19937_64 rng(5);
  const Cam cam = axis_camera(32, 30.0);
  for (int trial = 0; trial < 5; ++trial) {
    Scene s = gsedit::testing::random_visible_scene(rng, 12);
    const auto color = render(s, cam, Channel::kColor);
    CHECK(color.data.minCoeff() >= 0.0);
    CHECK(color.data.maxCoeff() <= 1.0);
    CHECK(render(s, cam, Channel::kColor) == color);

    // roi with r = 1 equals the coverage of white Gaussians on black.
    Scene white = s;
    white.background_color.setZero();
    for (auto& g : white.gaussians) {
      g.color.setOnes();
      g.roi_logit = 40.0;
    }
    const auto cover = render(white, cam, Channel::kColor);
    const auto roi = render(white, cam, Channel::kRoi);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) CHECK(std::abs(roi.at(x, y) - cover.at(x, y, 0)) < 1e-6);
  }
}

TEST_CASE("render: rigid co-transformation of scene and camera leaves the image unchanged") {
  std::mt19937_64 rng(9);
  const Cam cam = axis_camera(32, 30.0);
  const Scene s = gsedit::testing::random_visible_scene(rng, 10);
  const Vec4<double> qt = gsedit::testing::random_unit_quaternion(rng);
  const Mat3<double> rt = rotation_from_quaternion(qt);
  const Vec3<double> ut(0.7, -1.3, 2.1);

  Scene moved = s;
  for (auto& g : moved.gaussians) {
    g.position = rt * g.position + ut;
    g.rotation = quaternion_multiply(qt, g.rotation);
  }
  Cam moved_cam = cam;
  moved_cam.rotation = cam.rotation * rt.transpose();
  moved_cam.translation = cam.translation - moved_cam.rotation * ut;

  const auto a = render(s, cam, Channel::kColor);
  const auto b = render(moved, moved_cam, Channel::kColor);
  CHECK((a.data - b.data).abs().maxCoeff() < 1e-5);
}

TEST_CASE("render_backward: zero cotangent, shape contract and single-term derivative") {
  const Cam cam = axis_camera(32, 40.0);
  Scene s;
  s.gaussians.push_back(gaussian_at({0, 0, 3}, 0.1, 0.8, {1, 0, 0}));
  CHECK(render_backward(s, cam, Channel::kColor, ImageBuffer<double>(32, 32, 3)).is_zero());
  CHECK_THROWS_AS(render_backward(s, cam, Channel::kColor, ImageBuffer<double>(32, 32, 1)), ContractError);

  ImageBuffer<double> up(32, 32, 3);
  up.at(16, 16, 0) = 1.0;
  const auto g = render_backward(s, cam, Channel::kColor, up);
  CHECK(g.color(0, 0) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(g.color(0, 1) == 0.0);
  CHECK(g.roi_logit(0) == 0.0);
}

TEST_CASE("render_backward: matches central finite differences on random scenes") {
  std::mt19937_64 rng(21);
  const Cam cam = axis_camera(32, 30.0);
  for (int trial = 0; trial < 3; ++trial) {
    const Scene s = gsedit::testing::random_visible_scene(rng, 10);
    for (Channel ch : {Channel::kColor, Channel::kRoi}) {
      const auto up = gsedit::testing::random_image(rng, 32, 32, channel_count(ch), -1.0, 1.0);
      const auto report = gsedit::testing::gradient_check(s, cam, ch, up);
      INFO(report.first_failure);
      CHECK(report.checked > 100);
      CHECK(report.failed == 0);
    }
  }
}

TEST_CASE("render_backward: deterministic") {
  std::mt19937_64 rng(2);
  const Cam cam = axis_camera(64, 60.0);
  const Scene s = gsedit::testing::random_visible_scene(rng, 40);
  const auto up = gsedit::testing::random_image(rng, 64, 64, 3, -1.0, 1.0);
  const auto a = render_backward(s, cam, Channel::kColor, up);
  const auto b = render_backward(s, cam, Channel::kColor, up);
  CHECK(a.position == b.position);
  CHECK(a.rotation == b.rotation);
  CHECK(a.opacity_logit == b.opacity_logit);
}

TEST_CASE("pick") {
  const Cam cam = axis_camera(32, 40.0);
  Scene empty;
  CHECK_FALSE(pick(empty, cam, 16, 16));
  CHECK_THROWS_AS(pick(empty, cam, 32, 0), ContractError);
  CHECK_THROWS_AS(pick(empty, cam, -1, 3), ContractError);

  Scene one;
  auto g = gaussian_at({0, 0, 3}, 0.1, 0.5, {1, 1, 1});
  g.opacity_logit = 40.0;
  one.gaussians.push_back(g);
  CHECK(pick(one, cam, 16, 16) == std::optional<std::size_t>(0));
  CHECK_FALSE(pick(one, cam, 0, 0));

  // Front Gaussian stored second; depth order decides.
  Scene two;
  two.gaussians.push_back(gaussian_at({0, 0, 5}, 0.1, 0.9, {0, 0, 1}));
  two.gaussians.push_back(gaussian_at({0, 0, 3}, 0.1, 0.9, {1, 0, 0}));
  CHECK(pick(two, cam, 16, 16) == std::optional<std::size_t>(1));
  std::swap(two.gaussians[0], two.gaussians[1]);
  CHECK(pick(two, cam, 16, 16) == std::optional<std::size_t>(0));
}

TEST_CASE("render works for float scenes") {
  GaussianScene<float> s;
  Gaussian<float> g;
  g.position = Vec3<float>(0, 0, 3);
  g.log_scale.setConstant(std::log(0.1f));
  g.opacity_logit = logit(0.8f);
  g.color = Vec3<float>(1, 0, 0);
  s.gaussians.push_back(g);
  Camera<float> cam;
  cam.width = cam.height = 32;
  cam.fx = cam.fy = 40;
  cam.cx = cam.cy = 16;
  CHECK(render(s, cam, Channel::kColor).at(16, 16, 0) == doctest::Approx(0.8f).epsilon(1e-5));
}
