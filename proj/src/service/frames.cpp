#include "gsedit/service/frames.hpp"

#include "gsedit/raster/rasterizer.hpp"

namespace gsedit::service {

FrameMode frame_mode_from_name(const std::string& name) {
  if (name == "color") return FrameMode::kColor;
  if (name == "roi") return FrameMode::kRoi;
  if (name == "overlay") return FrameMode::kOverlay;
  throw InvalidParameter("unknown channel '" + name + "' (expected color, roi or overlay)");
}

Image render_frame(const GaussianScene<double>& scene, const Camera<double>& cam, FrameMode mode,
                   const roi::GaussianRoi* roi) {
  if (mode == FrameMode::kColor) return raster::render(scene, cam, raster::Channel::kColor);

  Image r;
  if (roi) {
    if (roi->size() != scene.size()) throw ContractError("render_frame: RoI size differs from scene size");
    GaussianScene<double> marked = scene;
    for (std::size_t i = 0; i < marked.size(); ++i) marked.gaussians[i].roi_logit = roi->membership[i] ? 40.0 : -40.0;
    r = raster::render(marked, cam, raster::Channel::kRoi);
  } else {
    r = raster::render(scene, cam, raster::Channel::kRoi);
  }
  if (mode == FrameMode::kRoi) return r;

  Image out = raster::render(scene, cam, raster::Channel::kColor);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      const double a = 0.5 * r.at(x, y, 0);
      out.at(x, y, 0) = (1 - a) * out.at(x, y, 0) + a;
      out.at(x, y, 1) *= 1 - a;
      out.at(x, y, 2) *= 1 - a;
    }
  return out;
}

}  // namespace gsedit::service
