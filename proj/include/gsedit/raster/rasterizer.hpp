#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/AutoDiff>

#include "gsedit/core/camera.hpp"
#include "gsedit/core/gaussian.hpp"
#include "gsedit/core/image.hpp"
#include "gsedit/core/parallel.hpp"

// CPU tile rasterizer for point Gaussians. Each pixel composites depth-sorted
// splats front to back:
//   C = sum_i v_i s_i T_i + bg T_end,  s_i = alpha_i exp(-1/2 d^T Cov'^-1 d),
//   T_i = prod_{j<i} (1 - s_j),
// with v_i the color (color channel) or the RoI attribute r_i (roi channel,
// bg = 0). The backward pass is exact for a fixed depth order.

namespace gsedit::raster {

struct RasterSettings {
  double dilation = 0.3;           // px^2 added to both 2D covariance eigenvalues
  double support_sigmas = 7.0;     // kernel evaluated where Mahalanobis distance <= this
  double min_transmittance = 1e-4; // stop compositing a pixel once T drops below
  int tile_size = 16;
  double pick_threshold = 0.3;
};

enum class Channel { kColor, kRoi };

inline int channel_count(Channel c) { return c == Channel::kColor ? 3 : 1; }

template <typename Scalar>
struct Splat2D {
  Vec2<Scalar> mean2d;
  Mat2<Scalar> cov2d;
  Scalar depth;
  std::size_t source_index;
};

/// Per-Gaussian partial derivatives of a scalar loss, one row per Gaussian.
template <typename Scalar>
struct GradientBuffer {
  using Rows3 = Eigen::Matrix<Scalar, Eigen::Dynamic, 3>;
  using Rows4 = Eigen::Matrix<Scalar, Eigen::Dynamic, 4>;
  using Column = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Rows3 position, log_scale, color;
  Rows4 rotation;
  Column opacity_logit, roi_logit;

  GradientBuffer() = default;
  explicit GradientBuffer(Eigen::Index n)
      : position(Rows3::Zero(n, 3)),
        log_scale(Rows3::Zero(n, 3)),
        color(Rows3::Zero(n, 3)),
        rotation(Rows4::Zero(n, 4)),
        opacity_logit(Column::Zero(n)),
        roi_logit(Column::Zero(n)) {}

  Eigen::Index size() const { return position.rows(); }

  /// View of one attribute's block as an (n x width) matrix.
  Eigen::Ref<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>> block(Attribute a) const {
    switch (a) {
      case Attribute::kPosition: return position;
      case Attribute::kLogScale: return log_scale;
      case Attribute::kRotation: return rotation;
      case Attribute::kColor: return color;
      case Attribute::kOpacity: return opacity_logit;
      case Attribute::kRoi: return roi_logit;
    }
    return position;
  }

  bool all_finite() const {
    return position.allFinite() && log_scale.allFinite() && color.allFinite() && rotation.allFinite() &&
           opacity_logit.allFinite() && roi_logit.allFinite();
  }

  bool is_zero() const {
    return position.isZero(0) && log_scale.isZero(0) && color.isZero(0) && rotation.isZero(0) &&
           opacity_logit.isZero(0) && roi_logit.isZero(0);
  }

  /// Zeroes every row whose `keep` entry is false.
  void mask_rows(const std::vector<bool>& keep) {
    for (Eigen::Index i = 0; i < size(); ++i) {
      if (keep[static_cast<std::size_t>(i)]) continue;
      position.row(i).setZero();
      log_scale.row(i).setZero();
      color.row(i).setZero();
      rotation.row(i).setZero();
      opacity_logit(i) = 0;
      roi_logit(i) = 0;
    }
  }

  GradientBuffer& operator+=(const GradientBuffer& o) {
    position += o.position;
    log_scale += o.log_scale;
    color += o.color;
    rotation += o.rotation;
    opacity_logit += o.opacity_logit;
    roi_logit += o.roi_logit;
    return *this;
  }
};

namespace detail {

template <typename T>
struct Footprint {
  Vec2<T> mean;
  Mat2<T> cov;
  Vec3<T> conic;  // (a, b, c) of the inverse covariance [[a, b], [b, c]]
  T depth;
};

/// Perspective projection of a Gaussian's mean and first-order (EWA) projection
/// of its covariance: Cov' = J W Sigma W^T J^T + dilation I. Generic over T so
/// the backward pass can take its Jacobian with forward-mode autodiff.
template <typename T, typename Scalar>
Footprint<T> project_footprint(const Vec3<T>& position, const Vec3<T>& log_scale, const Vec4<T>& rotation,
                               const Camera<Scalar>& cam, Scalar dilation) {
  const Mat3<T> w = cam.rotation.template cast<T>();
  const Vec3<T> p = w * position + cam.translation.template cast<T>();
  const T inv_z = T(1) / p(2);
  const T fx(cam.fx), fy(cam.fy);

  Footprint<T> f;
  f.depth = p(2);
  f.mean << fx * p(0) * inv_z + T(cam.cx), fy * p(1) * inv_z + T(cam.cy);

  Eigen::Matrix<T, 2, 3> j;
  j << fx * inv_z, T(0), -fx * p(0) * inv_z * inv_z,
       T(0), fy * inv_z, -fy * p(1) * inv_z * inv_z;
  const Eigen::Matrix<T, 2, 3> jw = j * w;
  f.cov = jw * gsedit::detail::covariance_unchecked(log_scale, rotation) * jw.transpose();
  f.cov(0, 0) += T(dilation);
  f.cov(1, 1) += T(dilation);
  f.cov(1, 0) = f.cov(0, 1);

  const T det = f.cov(0, 0) * f.cov(1, 1) - f.cov(0, 1) * f.cov(0, 1);
  f.conic << f.cov(1, 1) / det, -f.cov(0, 1) / det, f.cov(0, 0) / det;
  return f;
}

template <typename Scalar>
struct PreparedSplat {
  Scalar mean_x, mean_y;
  Scalar conic_a, conic_b, conic_c;
  Scalar alpha;
  Scalar depth;
  std::uint32_t source;
  int x0, x1, y0, y1;
};

template <typename Scalar>
struct Frame {
  int width = 0, height = 0, tile_size = 16, tiles_x = 0, tiles_y = 0;
  std::vector<PreparedSplat<Scalar>> splats;      // front to back
  std::vector<std::vector<std::uint32_t>> tiles;  // indices into splats, ascending

  std::size_t tile_count() const { return tiles.size(); }
};

template <typename Scalar>
std::optional<PreparedSplat<Scalar>> prepare_splat(const Gaussian<Scalar>& g, std::size_t index,
                                                   const Camera<Scalar>& cam, const RasterSettings& rs) {
  using std::ceil;
  using std::floor;
  using std::max;
  using std::sqrt;
  const Scalar z = cam.to_camera(g.position)(2);
  if (!(z > cam.near_clip)) return std::nullopt;

  const Footprint<Scalar> f =
      project_footprint<Scalar>(g.position, g.log_scale, g.rotation, cam, Scalar(rs.dilation));
  const Scalar mid = (f.cov(0, 0) + f.cov(1, 1)) / 2;
  const Scalar det = f.cov(0, 0) * f.cov(1, 1) - f.cov(0, 1) * f.cov(0, 1);
  if (!(det > 0)) return std::nullopt;
  const Scalar lambda_max = mid + sqrt(max(Scalar(0), mid * mid - det));
  const Scalar radius = Scalar(rs.support_sigmas) * sqrt(lambda_max);
  if (!std::isfinite(double(radius)) || !f.mean.allFinite()) return std::nullopt;

  PreparedSplat<Scalar> s;
  s.mean_x = f.mean(0);
  s.mean_y = f.mean(1);
  s.conic_a = f.conic(0);
  s.conic_b = f.conic(1);
  s.conic_c = f.conic(2);
  s.alpha = g.opacity();
  s.depth = z;
  s.source = static_cast<std::uint32_t>(index);
  const double lo_x = std::max(0.0, double(ceil(f.mean(0) - radius)));
  const double hi_x = std::min(double(cam.width - 1), double(floor(f.mean(0) + radius)));
  const double lo_y = std::max(0.0, double(ceil(f.mean(1) - radius)));
  const double hi_y = std::min(double(cam.height - 1), double(floor(f.mean(1) + radius)));
  if (lo_x > hi_x || lo_y > hi_y) return std::nullopt;
  s.x0 = int(lo_x);
  s.x1 = int(hi_x);
  s.y0 = int(lo_y);
  s.y1 = int(hi_y);
  return s;
}

template <typename Scalar>
Frame<Scalar> prepare_frame(const GaussianScene<Scalar>& scene, const Camera<Scalar>& cam,
                            const RasterSettings& rs) {
  Frame<Scalar> frame;
  frame.width = cam.width;
  frame.height = cam.height;
  frame.tile_size = rs.tile_size;
  frame.tiles_x = (cam.width + rs.tile_size - 1) / rs.tile_size;
  frame.tiles_y = (cam.height + rs.tile_size - 1) / rs.tile_size;
  frame.tiles.resize(std::size_t(frame.tiles_x) * frame.tiles_y);

  for (std::size_t i = 0; i < scene.size(); ++i) {
    if (auto s = prepare_splat(scene.gaussians[i], i, cam, rs)) frame.splats.push_back(*s);
  }
  std::stable_sort(frame.splats.begin(), frame.splats.end(),
                   [](const auto& a, const auto& b) { return a.depth < b.depth; });

  for (std::uint32_t k = 0; k < frame.splats.size(); ++k) {
    const auto& s = frame.splats[k];
    for (int ty = s.y0 / rs.tile_size; ty <= s.y1 / rs.tile_size; ++ty)
      for (int tx = s.x0 / rs.tile_size; tx <= s.x1 / rs.tile_size; ++tx)
        frame.tiles[std::size_t(ty) * frame.tiles_x + tx].push_back(k);
  }
  return frame;
}

/// Value composited for a splat: color (3 channels) or RoI attribute (1 channel).
template <typename Scalar>
std::array<Scalar, 3> splat_value(const Gaussian<Scalar>& g, Channel ch) {
  if (ch == Channel::kColor) return {g.color(0), g.color(1), g.color(2)};
  return {g.roi(), Scalar(0), Scalar(0)};
}

/// Gaussian falloff exp(-1/2 d^T Q d) at pixel (x, y), or nullopt outside support.
template <typename Scalar>
std::optional<Scalar> falloff(const PreparedSplat<Scalar>& s, Scalar x, Scalar y, Scalar support_sq) {
  if (x < s.x0 || x > s.x1 || y < s.y0 || y > s.y1) return std::nullopt;
  const Scalar dx = x - s.mean_x, dy = y - s.mean_y;
  const Scalar m = s.conic_a * dx * dx + Scalar(2) * s.conic_b * dx * dy + s.conic_c * dy * dy;
  if (m > support_sq) return std::nullopt;
  using std::exp;
  return exp(Scalar(-0.5) * m);
}

template <typename Scalar>
void tile_pixel_range(const Frame<Scalar>& f, std::size_t tile, int& x0, int& x1, int& y0, int& y1) {
  const int tx = int(tile % std::size_t(f.tiles_x)), ty = int(tile / std::size_t(f.tiles_x));
  x0 = tx * f.tile_size;
  y0 = ty * f.tile_size;
  x1 = std::min(f.width, x0 + f.tile_size);
  y1 = std::min(f.height, y0 + f.tile_size);
}

}  // namespace detail

/// Projects one Gaussian; nullopt when it is behind the near plane or its
/// support ellipse misses the image entirely.
template <typename Scalar>
std::optional<Splat2D<Scalar>> project(const Gaussian<Scalar>& g, const Camera<Scalar>& cam,
                                       const RasterSettings& rs = {}) {
  if (!detail::prepare_splat(g, 0, cam, rs)) return std::nullopt;
  const auto f = detail::project_footprint<Scalar>(g.position, g.log_scale, g.rotation, cam, Scalar(rs.dilation));
  return Splat2D<Scalar>{f.mean, f.cov, f.depth, 0};
}

template <typename Scalar>
ImageBuffer<Scalar> render(const GaussianScene<Scalar>& scene, const Camera<Scalar>& cam, Channel channel,
                           const RasterSettings& rs = {}) {
  const int nch = channel_count(channel);
  ImageBuffer<Scalar> out(cam.width, cam.height, nch);
  const auto frame = detail::prepare_frame(scene, cam, rs);

  std::vector<std::array<Scalar, 3>> values(frame.splats.size());
  for (std::size_t k = 0; k < frame.splats.size(); ++k)
    values[k] = detail::splat_value(scene.gaussians[frame.splats[k].source], channel);
  const std::array<Scalar, 3> bg =
      channel == Channel::kColor
          ? std::array<Scalar, 3>{scene.background_color(0), scene.background_color(1), scene.background_color(2)}
          : std::array<Scalar, 3>{0, 0, 0};
  const Scalar support_sq = Scalar(rs.support_sigmas * rs.support_sigmas);
  const Scalar t_min = Scalar(rs.min_transmittance);

  parallel_for(frame.tile_count(), [&](std::size_t tile) {
    int x0, x1, y0, y1;
    detail::tile_pixel_range(frame, tile, x0, x1, y0, y1);
    const auto& list = frame.tiles[tile];
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) {
        Scalar t = 1;
        std::array<Scalar, 3> acc{0, 0, 0};
        for (std::uint32_t k : list) {
          const auto& s = frame.splats[k];
          const auto g = detail::falloff(s, Scalar(x), Scalar(y), support_sq);
          if (!g) continue;
          const Scalar sigma = s.alpha * *g;
          for (int c = 0; c < nch; ++c) acc[c] += values[k][c] * sigma * t;
          t *= Scalar(1) - sigma;
          if (t < t_min) break;
        }
        for (int c = 0; c < nch; ++c) out.at(x, y, c) = acc[c] + bg[c] * t;
      }
    }
  });
  return out;
}

/// Gradient of sum(upstream * render(scene, cam, channel)) with respect to every
/// stored Gaussian parameter. Color-channel renders leave roi_logit at zero and
/// roi-channel renders leave color at zero; geometry and opacity are filled for both.
template <typename Scalar>
GradientBuffer<Scalar> render_backward(const GaussianScene<Scalar>& scene, const Camera<Scalar>& cam,
                                       Channel channel, const ImageBuffer<Scalar>& upstream,
                                       const RasterSettings& rs = {}) {
  const int nch = channel_count(channel);
  if (upstream.width != cam.width || upstream.height != cam.height || upstream.channels != nch) {
    throw ContractError("render_backward: upstream gradient shape does not match the render");
  }
  GradientBuffer<Scalar> grads(Eigen::Index(scene.size()));
  const auto frame = detail::prepare_frame(scene, cam, rs);
  const std::size_t n_splats = frame.splats.size();
  if (n_splats == 0) return grads;

  std::vector<std::array<Scalar, 3>> values(n_splats);
  for (std::size_t k = 0; k < n_splats; ++k)
    values[k] = detail::splat_value(scene.gaussians[frame.splats[k].source], channel);
  const std::array<Scalar, 3> bg =
      channel == Channel::kColor
          ? std::array<Scalar, 3>{scene.background_color(0), scene.background_color(1), scene.background_color(2)}
          : std::array<Scalar, 3>{0, 0, 0};
  const Scalar support_sq = Scalar(rs.support_sigmas * rs.support_sigmas);
  const Scalar t_min = Scalar(rs.min_transmittance);

  // Per-splat accumulators: d/d{mean x, mean y, conic a, b, c, alpha, value 0..2}.
  constexpr int kAcc = 9;
  using Accum = std::vector<std::array<Scalar, kAcc>>;
  // Fixed chunking of tiles makes the floating-point summation order independent
  // of thread scheduling.
  const std::size_t n_chunks = std::min<std::size_t>(frame.tile_count(), 16);
  std::vector<Accum> chunk_acc(n_chunks);

  parallel_for(n_chunks, [&](std::size_t chunk) {
    Accum& acc = chunk_acc[chunk];
    acc.assign(n_splats, std::array<Scalar, kAcc>{});
    struct Hit {
      std::uint32_t k;
      Scalar sigma, falloff, t, dx, dy;
    };
    std::vector<Hit> hits;
    const std::size_t t_begin = chunk * frame.tile_count() / n_chunks;
    const std::size_t t_end = (chunk + 1) * frame.tile_count() / n_chunks;
    for (std::size_t tile = t_begin; tile < t_end; ++tile) {
      int x0, x1, y0, y1;
      detail::tile_pixel_range(frame, tile, x0, x1, y0, y1);
      const auto& list = frame.tiles[tile];
      for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
          std::array<Scalar, 3> up{0, 0, 0};
          bool any = false;
          for (int c = 0; c < nch; ++c) {
            up[c] = upstream.at(x, y, c);
            any = any || up[c] != Scalar(0);
          }
          if (!any) continue;

          hits.clear();
          Scalar t = 1;
          for (std::uint32_t k : list) {
            const auto& s = frame.splats[k];
            const auto g = detail::falloff(s, Scalar(x), Scalar(y), support_sq);
            if (!g) continue;
            const Scalar sigma = s.alpha * *g;
            hits.push_back({k, sigma, *g, t, Scalar(x) - s.mean_x, Scalar(y) - s.mean_y});
            t *= Scalar(1) - sigma;
            if (t < t_min) break;
          }

          // Back to front: after[c] is what the pixel would show behind splat k,
          // normalized by the transmittance in front of k+1.
          std::array<Scalar, 3> after = bg;
          for (auto it = hits.rbegin(); it != hits.rend(); ++it) {
            const auto& h = *it;
            const auto& s = frame.splats[h.k];
            const auto& v = values[h.k];
            Scalar d_sigma = 0;
            auto& a = acc[h.k];
            for (int c = 0; c < nch; ++c) {
              d_sigma += up[c] * h.t * (v[c] - after[c]);
              a[6 + c] += up[c] * h.sigma * h.t;
              after[c] = v[c] * h.sigma + (Scalar(1) - h.sigma) * after[c];
            }
            // sigma = alpha * exp(-1/2 (a dx^2 + 2 b dx dy + c dy^2)), d = pixel - mean
            const Scalar ds = d_sigma * h.sigma;
            a[0] += ds * (s.conic_a * h.dx + s.conic_b * h.dy);
            a[1] += ds * (s.conic_b * h.dx + s.conic_c * h.dy);
            a[2] += ds * Scalar(-0.5) * h.dx * h.dx;
            a[3] += ds * -h.dx * h.dy;
            a[4] += ds * Scalar(-0.5) * h.dy * h.dy;
            a[5] += d_sigma * h.falloff;
          }
        }
      }
    }
  });

  for (std::size_t chunk = 1; chunk < n_chunks; ++chunk)
    for (std::size_t k = 0; k < n_splats; ++k)
      for (int q = 0; q < kAcc; ++q) chunk_acc[0][k][q] += chunk_acc[chunk][k][q];
  const Accum& total = chunk_acc[0];

  using Jet = Eigen::AutoDiffScalar<Eigen::Matrix<Scalar, 10, 1>>;
  for (std::size_t k = 0; k < n_splats; ++k) {
    const auto& a = total[k];
    const Eigen::Index i = frame.splats[k].source;
    const Gaussian<Scalar>& g = scene.gaussians[std::size_t(i)];

    const Scalar alpha = frame.splats[k].alpha;
    grads.opacity_logit(i) = a[5] * alpha * (Scalar(1) - alpha);
    if (channel == Channel::kColor) {
      for (int c = 0; c < 3; ++c) grads.color(i, c) = a[6 + c];
    } else {
      const Scalar r = g.roi();
      grads.roi_logit(i) = a[6] * r * (Scalar(1) - r);
    }

    if (a[0] == 0 && a[1] == 0 && a[2] == 0 && a[3] == 0 && a[4] == 0) continue;
    Vec3<Jet> pos, log_scale;
    Vec4<Jet> rot;
    for (int q = 0; q < 3; ++q) {
      pos(q) = Jet(g.position(q), 10, q);
      log_scale(q) = Jet(g.log_scale(q), 10, 3 + q);
    }
    for (int q = 0; q < 4; ++q) rot(q) = Jet(g.rotation(q), 10, 6 + q);
    const auto f = detail::project_footprint<Jet>(pos, log_scale, rot, cam, Scalar(rs.dilation));
    const Eigen::Matrix<Scalar, 10, 1> d = a[0] * f.mean(0).derivatives() + a[1] * f.mean(1).derivatives() +
                                           a[2] * f.conic(0).derivatives() + a[3] * f.conic(1).derivatives() +
                                           a[4] * f.conic(2).derivatives();
    grads.position.row(i) = d.template segment<3>(0).transpose();
    grads.log_scale.row(i) = d.template segment<3>(3).transpose();
    grads.rotation.row(i) = d.template segment<4>(6).transpose();
  }
  return grads;
}

/// First Gaussian in front-to-back order whose falloff-weighted opacity at
/// `pixel` exceeds the pick threshold.
template <typename Scalar>
std::optional<std::size_t> pick(const GaussianScene<Scalar>& scene, const Camera<Scalar>& cam, int px, int py,
                                const RasterSettings& rs = {}) {
  if (px < 0 || py < 0 || px >= cam.width || py >= cam.height) {
    throw ContractError("pick: pixel (" + std::to_string(px) + ", " + std::to_string(py) + ") out of bounds");
  }
  const auto frame = detail::prepare_frame(scene, cam, rs);
  const std::size_t tile = std::size_t(py / frame.tile_size) * frame.tiles_x + std::size_t(px / frame.tile_size);
  const Scalar support_sq = Scalar(rs.support_sigmas * rs.support_sigmas);
  for (std::uint32_t k : frame.tiles[tile]) {
    const auto& s = frame.splats[k];
    const auto g = detail::falloff(s, Scalar(px), Scalar(py), support_sq);
    if (g && s.alpha * *g > Scalar(rs.pick_threshold)) return s.source;
  }
  return std::nullopt;
}

}  // namespace gsedit::raster
