#pragma once

#include <string>

#include "gsedit/core/camera.hpp"
#include "gsedit/core/gaussian.hpp"
#include "gsedit/core/image_io.hpp"
#include "gsedit/roi/roi.hpp"

namespace gsedit::service {

enum class FrameMode { kColor, kRoi, kOverlay };

FrameMode frame_mode_from_name(const std::string& name);

/// Color render, RoI render, or the color render with the RoI channel blended
/// in red at alpha 0.5. With `roi` the RoI channel shows its binary membership,
/// otherwise the scene's stored roi_logit.
Image render_frame(const GaussianScene<double>& scene, const Camera<double>& cam, FrameMode mode,
                   const roi::GaussianRoi* roi = nullptr);

}  // namespace gsedit::service
