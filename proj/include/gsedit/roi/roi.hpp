#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "gsedit/clients/backends.hpp"
#include "gsedit/core/camera.hpp"
#include "gsedit/core/gaussian.hpp"
#include "gsedit/optim/losses.hpp"

namespace gsedit::roi {

using Scene = GaussianScene<double>;
using Cam = Camera<double>;

/// The assistant returned nothing usable for the instruction.
class ExtractionFailed : public Error {
 public:
  using Error::Error;
};

struct SceneDescription {
  std::vector<std::pair<std::size_t, std::string>> per_view_captions;
  std::string merged;

  nlohmann::json to_json() const;
};

/// User edits to a lifted RoI. When an index is in both lists, deletion wins.
struct RoiModification {
  std::vector<std::size_t> add, del;
  std::optional<Box3<double>> box;

  bool empty() const { return add.empty() && del.empty() && !box; }
  /// {"add": [...], "del": [...], "box": {"min": [x,y,z], "max": [x,y,z]}}; every key optional.
  static RoiModification from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct GaussianRoi {
  std::vector<bool> membership;
  Eigen::VectorXd soft;  // r = logistic(roi_logit)

  std::size_t size() const { return membership.size(); }
  std::size_t count() const;
  std::vector<std::size_t> indices() const;
  bool operator==(const GaussianRoi& o) const { return membership == o.membership && soft == o.soft; }

  /// Thresholds the scene's stored RoI attribute at tau.
  static GaussianRoi from_scene(const Scene& scene, double tau);
  nlohmann::json to_json() const;
};

struct ViewMask {
  std::size_t view;
  Image mask;
};

/// `count` indices out of [0, n): one uniformly drawn index in each of `count`
/// equal strata, ascending. Deterministic in `seed`.
std::vector<std::size_t> stratified_views(std::size_t n, std::size_t count, std::uint64_t seed);

SceneDescription generate_description(const Scene& scene, const std::vector<Cam>& cameras, std::size_t views,
                                      const clients::ModelBackends& backends, const clients::PromptSet& prompts,
                                      std::uint64_t seed = 0);

/// Trimmed assistant answer for the filled template; throws ExtractionFailed when empty.
std::string extract_instruction_roi(const std::string& description, const std::string& instruction,
                                    const clients::ModelBackends& backends, const clients::PromptSet& prompts);

struct Extraction {
  std::string phrase;
  bool fallback = false;  // phrase is the whole instruction
};

/// extract_instruction_roi, falling back to the full instruction on ExtractionFailed.
Extraction extract_or_fallback(const std::string& description, const std::string& instruction,
                               const clients::ModelBackends& backends, const clients::PromptSet& prompts);

/// Renders up to `views` stratified cameras and segments each concurrently.
std::vector<ViewMask> acquire_masks(const Scene& scene, const std::vector<Cam>& cameras, const std::string& phrase,
                                    const clients::ModelBackends& backends, std::size_t views,
                                    std::uint64_t seed = 0);

struct LiftReport {
  std::vector<double> loss;  // mean lifting loss before each step
};

/// Optimizes only roi_logit of `scene` (in place) against the masks, then
/// thresholds. Every other stored field is left bit-identical.
GaussianRoi lift_roi(Scene& scene, const std::vector<Cam>& cameras, const std::vector<ViewMask>& masks,
                     const optim::LiftConfig& cfg, LiftReport* report = nullptr);

/// ((trained | add) - del) & box, with box membership meaning the center lies
/// strictly inside. Soft values are carried over unchanged.
GaussianRoi combine_roi(const GaussianRoi& trained, const RoiModification& mods, const Scene& scene);

}  // namespace gsedit::roi
