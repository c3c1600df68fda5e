#include "gsedit/edit/pipeline.hpp"

#include <chrono>

namespace gsedit::edit {

namespace {

template <typename F>
auto run_stage(const char* stage, std::vector<std::pair<std::string, double>>& timings, F&& f) {
  const auto start = std::chrono::steady_clock::now();
  auto record = [&] {
    timings.emplace_back(stage, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  };
  try {
    if constexpr (std::is_void_v<decltype(f())>) {
      f();
      record();
    } else {
      auto r = f();
      record();
      return r;
    }
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

}  // namespace

void PipelineConfig::validate() const {
  if (description_views < 1) throw InvalidParameter("pipeline: description_views must be >= 1");
  if (mask_views < 1) throw InvalidParameter("pipeline: mask_views must be >= 1");
  if (!(tau > 0 && tau < 1)) throw InvalidParameter("pipeline: tau must lie in (0, 1)");
  lift.validate();
  edit.validate();
  prompts.validate();
}

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
  PipelineConfig c;
  try {
    if (j.contains("description_views")) c.description_views = j["description_views"].get<std::size_t>();
    if (j.contains("mask_views")) c.mask_views = j["mask_views"].get<std::size_t>();
    if (j.contains("tau")) c.tau = j["tau"].get<double>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("fallback_on_extraction_failure"))
      c.fallback_on_extraction_failure = j["fallback_on_extraction_failure"].get<bool>();
    if (j.contains("use_text_roi")) c.use_text_roi = j["use_text_roi"].get<bool>();
    if (j.contains("lift")) {
      const auto& l = j["lift"];
      if (l.contains("lambda1")) c.lift.lambda1 = l["lambda1"].get<double>();
      if (l.contains("lambda2")) c.lift.lambda2 = l["lambda2"].get<double>();
      if (l.contains("iterations")) c.lift.iterations = l["iterations"].get<int>();
      if (l.contains("lr")) c.lift.lr = l["lr"].get<double>();
      if (l.contains("threshold")) c.lift.threshold = l["threshold"].get<double>();
    }
    if (j.contains("edit")) c.edit = EditConfig::from_json(j["edit"]);
    if (j.contains("prompts")) c.prompts = clients::PromptSet::from_json(j["prompts"]);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("pipeline config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json PipelineConfig::to_json() const {
  return {{"description_views", description_views},
          {"mask_views", mask_views},
          {"tau", tau},
          {"seed", seed},
          {"fallback_on_extraction_failure", fallback_on_extraction_failure},
          {"use_text_roi", use_text_roi},
          {"lift",
           {{"lambda1", lift.lambda1},
            {"lambda2", lift.lambda2},
            {"iterations", lift.iterations},
            {"lr", lift.lr},
            {"threshold", lift.threshold}}},
          {"edit", edit.to_json()},
          {"prompts", prompts.to_json()}};
}

nlohmann::json PipelineResult::report() const {
  nlohmann::json j;
  j["description"] = description.to_json();
  j["instruction_roi"] = {{"phrase", extraction.phrase}, {"fallback", extraction.fallback}};
  nlohmann::json views = nlohmann::json::array();
  for (const auto& m : masks) views.push_back(m.view);
  j["mask_views"] = views;
  j["lift_loss"] = lift_report.loss;
  j["trained_roi_count"] = trained_roi.count();
  j["roi"] = roi.to_json();
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& d : history) hist.push_back(d.to_json());
  j["rounds"] = hist;
  nlohmann::json timings = nlohmann::json::object();
  for (const auto& [stage, s] : stage_seconds) timings[stage] = s;
  j["stage_seconds"] = timings;
  return j;
}

PipelineResult run_pipeline(const Scene& scene, const std::vector<Cam>& cameras, const std::string& instruction,
                            const roi::RoiModification& mods, const clients::ModelBackends& backends,
                            const PipelineConfig& cfg) {
  cfg.validate();
  PipelineResult r;
  if (scene.empty()) {
    r.edited = scene;
    return r;
  }
  if (cameras.empty()) throw StageError("input", "no cameras");
  auto& t = r.stage_seconds;

  if (cfg.use_text_roi) {
    r.description = run_stage("describe", t, [&] {
      return roi::generate_description(scene, cameras, std::min(cfg.description_views, cameras.size()), backends,
                                       cfg.prompts, cfg.seed);
    });
    r.extraction = run_stage("extract", t, [&] {
      if (cfg.fallback_on_extraction_failure)
        return roi::extract_or_fallback(r.description.merged, instruction, backends, cfg.prompts);
      return roi::Extraction{roi::extract_instruction_roi(r.description.merged, instruction, backends, cfg.prompts),
                             false};
    });
  } else {
    r.extraction = {instruction, true};
  }

  r.masks = run_stage("masks", t, [&] {
    return roi::acquire_masks(scene, cameras, r.extraction.phrase, backends, cfg.mask_views, cfg.seed);
  });

  Scene lifted = scene;
  optim::LiftConfig lift = cfg.lift;
  lift.threshold = cfg.tau;
  r.trained_roi = run_stage("lift", t, [&] { return roi::lift_roi(lifted, cameras, r.masks, lift, &r.lift_report); });
  r.roi = run_stage("roi", t, [&] { return roi::combine_roi(r.trained_roi, mods, lifted); });

  r.edited = run_stage("edit", t, [&] {
    EditConfig ec = cfg.edit;
    EditSession session(std::move(lifted), cameras, r.roi, instruction, ec);
    Scene out = run_session(session, backends);
    r.history = session.history();
    return out;
  });
  return r;
}

}  // namespace gsedit::edit
