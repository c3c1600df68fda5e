#include "gsedit/roi/roi.hpp"

#include <algorithm>
#include <mutex>
#include <random>

#include "gsedit/core/parallel.hpp"
#include "gsedit/optim/adam.hpp"
#include "gsedit/raster/rasterizer.hpp"

namespace gsedit::roi {

namespace {

std::string trimmed(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

Vec3<double> vec3_from_json(const nlohmann::json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw ValidationError(std::string("roi modification: ") + what + " needs 3 numbers");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

}  // namespace

nlohmann::json SceneDescription::to_json() const {
  nlohmann::json views = nlohmann::json::array();
  for (const auto& [v, text] : per_view_captions) views.push_back({{"view", v}, {"caption", text}});
  return {{"captions", views}, {"merged", merged}};
}

RoiModification RoiModification::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("roi modification: expected a JSON object");
  RoiModification m;
  try {
    for (auto [key, list] : {std::pair{"add", &m.add}, std::pair{"del", &m.del}}) {
      if (!j.contains(key)) continue;
      for (const auto& v : j[key]) {
        if (!v.is_number_integer() || v.get<long long>() < 0) {
          throw ValidationError(std::string("roi modification: '") + key + "' must hold non-negative integers");
        }
        list->push_back(v.get<std::size_t>());
      }
    }
    if (j.contains("box") && !j["box"].is_null()) {
      Box3<double> b;
      b.min_corner = vec3_from_json(j["box"].at("min"), "box.min");
      b.max_corner = vec3_from_json(j["box"].at("max"), "box.max");
      if (!b.valid()) throw ValidationError("roi modification: box min must not exceed max");
      m.box = b;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("roi modification: ") + e.what());
  }
  return m;
}

nlohmann::json RoiModification::to_json() const {
  nlohmann::json j = {{"add", add}, {"del", del}};
  if (box) {
    j["box"] = {{"min", {box->min_corner(0), box->min_corner(1), box->min_corner(2)}},
                {"max", {box->max_corner(0), box->max_corner(1), box->max_corner(2)}}};
  }
  return j;
}

std::size_t GaussianRoi::count() const { return std::size_t(std::count(membership.begin(), membership.end(), true)); }

std::vector<std::size_t> GaussianRoi::indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < membership.size(); ++i)
    if (membership[i]) out.push_back(i);
  return out;
}

GaussianRoi GaussianRoi::from_scene(const Scene& scene, double tau) {
  GaussianRoi r;
  r.membership.resize(scene.size());
  r.soft.resize(Eigen::Index(scene.size()));
  for (std::size_t i = 0; i < scene.size(); ++i) {
    r.soft(Eigen::Index(i)) = scene.gaussians[i].roi();
    r.membership[i] = r.soft(Eigen::Index(i)) >= tau;
  }
  return r;
}

nlohmann::json GaussianRoi::to_json() const {
  return {{"size", size()}, {"count", count()}, {"indices", indices()}};
}

std::vector<std::size_t> stratified_views(std::size_t n, std::size_t count, std::uint64_t seed) {
  if (count > n) throw PreconditionError("requested " + std::to_string(count) + " views from " + std::to_string(n));
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out;
  for (std::size_t s = 0; s < count; ++s) {
    const std::size_t lo = s * n / count, hi = (s + 1) * n / count;
    out.push_back(std::uniform_int_distribution<std::size_t>(lo, hi - 1)(rng));
  }
  return out;
}

SceneDescription generate_description(const Scene& scene, const std::vector<Cam>& cameras, std::size_t views,
                                      const clients::ModelBackends& backends, const clients::PromptSet& prompts,
                                      std::uint64_t seed) {
  if (views < 1) throw PreconditionError("describe: need at least one view");
  if (views > cameras.size()) {
    throw PreconditionError("describe: " + std::to_string(views) + " views requested but only " +
                            std::to_string(cameras.size()) + " cameras");
  }
  prompts.validate();
  SceneDescription d;
  std::string user;
  for (std::size_t v : stratified_views(cameras.size(), views, seed)) {
    std::string text;
    try {
      text = backends.captioner->caption(raster::render(scene, cameras[v], raster::Channel::kColor),
                                         prompts.caption_prompt);
    } catch (const BackendError& e) {
      throw BackendError("describe: view " + std::to_string(v) + ": " + e.what());
    }
    user += "View " + std::to_string(d.per_view_captions.size() + 1) + ": " + text + "\n";
    d.per_view_captions.emplace_back(v, std::move(text));
  }
  d.merged = trimmed(backends.assistant->chat(prompts.merge_prompt, user));
  if (d.merged.empty()) throw BackendError("describe: assistant returned an empty merged description");
  return d;
}

std::string extract_instruction_roi(const std::string& description, const std::string& instruction,
                                    const clients::ModelBackends& backends, const clients::PromptSet& prompts) {
  if (trimmed(instruction).empty()) throw PreconditionError("extract: empty instruction");
  std::string answer = trimmed(backends.assistant->chat(prompts.extract_prompt,
                                                        prompts.fill_template(description, instruction)));
  if (answer.empty()) throw ExtractionFailed("extract: assistant returned an empty answer");
  return answer;
}

Extraction extract_or_fallback(const std::string& description, const std::string& instruction,
                               const clients::ModelBackends& backends, const clients::PromptSet& prompts) {
  try {
    return {extract_instruction_roi(description, instruction, backends, prompts), false};
  } catch (const ExtractionFailed&) {
    return {trimmed(instruction), true};
  }
}

std::vector<ViewMask> acquire_masks(const Scene& scene, const std::vector<Cam>& cameras, const std::string& phrase,
                                    const clients::ModelBackends& backends, std::size_t views, std::uint64_t seed) {
  if (views < 1) throw PreconditionError("masks: need at least one view");
  if (cameras.empty()) throw PreconditionError("masks: no cameras");
  const auto chosen = stratified_views(cameras.size(), std::min(views, cameras.size()), seed);
  std::vector<ViewMask> out(chosen.size());
  std::vector<std::string> failures(chosen.size());
  parallel_for(chosen.size(), [&](std::size_t k) {
    const std::size_t v = chosen[k];
    try {
      out[k] = {v, backends.segmenter->segment(raster::render(scene, cameras[v], raster::Channel::kColor), phrase)};
    } catch (const Error& e) {
      failures[k] = "view " + std::to_string(v) + ": " + e.what();
    }
  });
  std::string message;
  for (const auto& f : failures)
    if (!f.empty()) message += (message.empty() ? "" : "; ") + f;
  if (!message.empty()) throw BackendError("masks: " + message);
  return out;
}

GaussianRoi lift_roi(Scene& scene, const std::vector<Cam>& cameras, const std::vector<ViewMask>& masks,
                     const optim::LiftConfig& cfg, LiftReport* report) {
  cfg.validate();
  if (masks.empty()) throw PreconditionError("lift: need at least one mask");
  for (const auto& m : masks) {
    if (m.view >= cameras.size()) throw ContractError("lift: mask refers to a missing camera");
    const auto& c = cameras[m.view];
    if (m.mask.width != c.width || m.mask.height != c.height || m.mask.channels != 1) {
      throw ContractError("lift: mask for view " + std::to_string(m.view) + " does not match its camera");
    }
  }
  optim::LearningRates lrs;
  lrs.roi_logit = cfg.lr;
  optim::SceneOptimizer<double> opt(optim::all_rows(scene.size()), {Attribute::kRoi}, lrs);
  const double inv_views = 1.0 / double(masks.size());

  for (int it = 0; it < cfg.iterations; ++it) {
    raster::GradientBuffer<double> total(Eigen::Index(scene.size()));
    double loss = 0;
    for (const auto& m : masks) {
      const auto& cam = cameras[m.view];
      const auto rendered = raster::render(scene, cam, raster::Channel::kRoi);
      const auto l = optim::lift_loss(rendered, m.mask, cfg);
      loss += l.value * inv_views;
      total.roi_logit += raster::render_backward(scene, cam, raster::Channel::kRoi, l.grad).roi_logit * inv_views;
    }
    if (!std::isfinite(loss)) {
      throw NumericalError("lift: non-finite loss at iteration " + std::to_string(it));
    }
    if (report) report->loss.push_back(loss);
    opt.step(scene, total);
  }
  return GaussianRoi::from_scene(scene, cfg.threshold);
}

GaussianRoi combine_roi(const GaussianRoi& trained, const RoiModification& mods, const Scene& scene) {
  const std::size_t n = scene.size();
  if (trained.size() != n) throw ContractError("combine: RoI size differs from scene size");
  for (const auto* list : {&mods.add, &mods.del}) {
    for (std::size_t i : *list) {
      if (i >= n) throw ContractError("combine: index " + std::to_string(i) + " out of range for " + std::to_string(n));
    }
  }
  if (mods.box && !mods.box->valid()) throw ContractError("combine: box min exceeds max");
  GaussianRoi out = trained;
  for (std::size_t i : mods.add) out.membership[i] = true;
  for (std::size_t i : mods.del) out.membership[i] = false;
  if (mods.box) {
    for (std::size_t i = 0; i < n; ++i) {
      if (out.membership[i] && !mods.box->contains_strictly(scene.gaussians[i].position)) out.membership[i] = false;
    }
  }
  return out;
}

}  // namespace gsedit::roi
