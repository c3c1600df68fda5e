#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "gsedit/core/camera.hpp"
#include "gsedit/core/gaussian.hpp"
#include "gsedit/core/image_io.hpp"

namespace gsedit::synthetic {

struct TwoClusterOptions {
  int per_cluster = 50;
  int views = 12;
  int image_size = 64;
  double focal = 70.0;
  double camera_radius = 5.0;
  double spread = 0.25;  // std dev of Gaussian centers around each cluster center
  std::uint64_t seed = 7;
};

/// A red cluster around (-1, 0, 0) (indices [0, per_cluster)) and a green
/// cluster around (+1, 0, 0), seen from a ring of cameras at alternating elevation.
struct TwoClusterScene {
  GaussianScene<double> scene;
  std::vector<Camera<double>> cameras;
  std::vector<bool> red;  // ground-truth membership of the red cluster
};

TwoClusterScene make_two_cluster(const TwoClusterOptions& options = {});

/// Binary mask of pixels where the members' composited coverage, with
/// occlusion by the other Gaussians, reaches 0.5.
Image membership_mask(const GaussianScene<double>& scene, const Camera<double>& camera,
                      const std::vector<bool>& members);

/// Writes scene.ply, cameras.json, views/, masks/ and fixtures.json for the
/// mock backends ("red cluster", "green cluster", "Turn the red cluster blue").
void write_fixture_dir(const TwoClusterScene& data, const std::filesystem::path& dir);

}  // namespace gsedit::synthetic
