#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gsedit/edit/session.hpp"

namespace gsedit::edit {

struct PipelineConfig {
  std::size_t description_views = 6;
  std::size_t mask_views = 8;
  double tau = 0.5;  // membership threshold, overrides lift.threshold
  optim::LiftConfig lift;
  EditConfig edit;
  clients::PromptSet prompts;
  std::uint64_t seed = 0;
  bool fallback_on_extraction_failure = true;
  bool use_text_roi = true;  // false segments with the whole instruction

  void validate() const;
  /// Keys: description_views, mask_views, tau, lift{...}, edit{...}, prompts{...},
  /// seed, fallback_on_extraction_failure, use_text_roi; all optional.
  static PipelineConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct PipelineResult {
  Scene edited;
  roi::SceneDescription description;
  roi::Extraction extraction;
  std::vector<roi::ViewMask> masks;
  roi::LiftReport lift_report;
  roi::GaussianRoi trained_roi;
  roi::GaussianRoi roi;
  std::vector<StepDiagnostics> history;
  std::vector<std::pair<std::string, double>> stage_seconds;

  /// Everything except images and scenes.
  nlohmann::json report() const;
};

/// description -> instruction RoI -> masks -> lifting -> user modifications
/// -> editing. Failures are rethrown as StageError tagged with the stage name.
PipelineResult run_pipeline(const Scene& scene, const std::vector<Cam>& cameras, const std::string& instruction,
                            const roi::RoiModification& mods, const clients::ModelBackends& backends,
                            const PipelineConfig& cfg);

}  // namespace gsedit::edit
