#include "gsedit/synthetic/two_cluster.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <utility>

#include <nlohmann/json.hpp>

#include "gsedit/core/cameras_json.hpp"
#include "gsedit/core/ply.hpp"
#include "gsedit/raster/rasterizer.hpp"

namespace gsedit::synthetic {

TwoClusterScene make_two_cluster(const TwoClusterOptions& o) {
  if (o.per_cluster < 1 || o.views < 1 || o.image_size < 1) throw InvalidParameter("two-cluster: counts must be >= 1");
  std::mt19937_64 rng(o.seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  TwoClusterScene out;
  out.scene.background_color.setZero();
  const Vec3<double> centers[2] = {{-1.0, 0.0, 0.0}, {1.0, 0.0, 0.0}};
  const Vec3<double> colors[2] = {{0.9, 0.1, 0.1}, {0.1, 0.8, 0.15}};
  for (int cluster = 0; cluster < 2; ++cluster) {
    for (int i = 0; i < o.per_cluster; ++i) {
      Gaussian<double> g;
      g.position = centers[cluster] + o.spread * Vec3<double>(n(rng), n(rng), n(rng));
      for (int k = 0; k < 3; ++k) g.log_scale(k) = std::log(0.07 + 0.05 * u(rng));
      g.rotation = Vec4<double>(n(rng), n(rng), n(rng), n(rng)).normalized();
      for (int k = 0; k < 3; ++k) g.color(k) = std::clamp(colors[cluster](k) + 0.05 * (u(rng) - 0.5), 0.0, 1.0);
      g.opacity_logit = logit(0.6 + 0.2 * u(rng));
      out.scene.gaussians.push_back(g);
      out.red.push_back(cluster == 0);
    }
  }

  for (int v = 0; v < o.views; ++v) {
    const double az = 2 * std::numbers::pi * (v + 0.5) / o.views;
    const double el = (v % 2 == 0 ? 1.0 : -1.0) * 0.35;
    const Vec3<double> eye(o.camera_radius * std::cos(el) * std::sin(az), o.camera_radius * std::sin(el),
                           -o.camera_radius * std::cos(el) * std::cos(az));
    out.cameras.push_back(
        look_at<double>(eye, Vec3<double>::Zero(), Vec3<double>(0, 1, 0), o.image_size, o.image_size, o.focal));
  }
  return out;
}

Image membership_mask(const GaussianScene<double>& scene, const Camera<double>& camera,
                      const std::vector<bool>& members) {
  if (members.size() != scene.size()) throw ContractError("membership_mask: membership length differs from scene");
  GaussianScene<double> probe = scene;
  for (std::size_t i = 0; i < probe.size(); ++i) probe.gaussians[i].roi_logit = members[i] ? 40.0 : -40.0;
  Image cov = raster::render(probe, camera, raster::Channel::kRoi);
  for (Eigen::Index i = 0; i < cov.data.size(); ++i) cov.data[i] = cov.data[i] >= 0.5 ? 1.0 : 0.0;
  return cov;
}

void write_fixture_dir(const TwoClusterScene& data, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "views");
  fs::create_directories(dir / "masks");
  write_file(dir / "scene.ply", export_ply(data.scene));
  write_file(dir / "cameras.json", cameras_to_json(data.cameras).dump(2));

  const std::vector<bool>& red = data.red;
  std::vector<bool> green(red.size());
  for (std::size_t i = 0; i < green.size(); ++i) green[i] = !data.red[i];

  nlohmann::json fx;
  fx["images"] = nlohmann::json::object();
  fx["segments"] = nlohmann::json::array();
  for (std::size_t v = 0; v < data.cameras.size(); ++v) {
    const std::string id = "view_" + std::to_string(v);
    write_png(dir / "views" / (id + ".png"), raster::render(data.scene, data.cameras[v], raster::Channel::kColor));
    fx["images"][id] = "views/" + id + ".png";
    for (const auto& [name, members] : {std::pair{"red", &red}, std::pair{"green", &std::as_const(green)}}) {
      const std::string file = "masks/" + id + "_" + name + ".png";
      write_png(dir / file, membership_mask(data.scene, data.cameras[v], *members));
      fx["segments"].push_back(
          nlohmann::json{{"image", id}, {"phrase", std::string(name) + " cluster"}, {"mask", file}});
    }
  }
  fx["captions"] = {{"*", "a red cluster of blobs to the left of a green cluster of blobs"}};
  fx["chat"] = nlohmann::json::array({
      {{"system_contains", "Merge them"},
       {"reply", "The scene shows a red cluster of round blobs next to a green cluster of round blobs, "
                 "side by side on a dark background."}},
      {{"user_contains", "Edit Instruction: Turn the red cluster blue"}, {"reply", "red cluster"}},
      {{"user_contains", "Edit Instruction: Turn the green cluster red"}, {"reply", "green cluster"}},
  });
  fx["edits"] = nlohmann::json::array({
      {{"instruction", "Turn the red cluster blue"}, {"region", "red cluster"}, {"target", {0.0, 0.0, 1.0}}},
      {{"instruction", "Turn the green cluster red"}, {"region", "green cluster"}, {"target", {1.0, 0.0, 0.0}}},
  });
  write_file(dir / "fixtures.json", fx.dump(2));
}

}  // namespace gsedit::synthetic
