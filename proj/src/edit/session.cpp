#include "gsedit/edit/session.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "gsedit/core/cameras_json.hpp"
#include "gsedit/core/ply.hpp"
#include "gsedit/optim/losses.hpp"
#include "gsedit/raster/rasterizer.hpp"

namespace gsedit::edit {

namespace {

constexpr std::pair<Status, const char*> kStatusNames[] = {
    {Status::kIdle, "idle"},     {Status::kLifting, "lifting"}, {Status::kEditing, "editing"},
    {Status::kPaused, "paused"}, {Status::kDone, "done"},       {Status::kFailed, "failed"}};

Attribute attribute_from_name(const std::string& name) {
  for (Attribute a : kAllAttributes)
    if (name == attribute_name(a)) return a;
  throw ValidationError("unknown attribute '" + name + "'");
}

Scene read_scene(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return import_ply<double>(bytes);
}

}  // namespace

const char* status_name(Status s) {
  for (const auto& [v, name] : kStatusNames)
    if (v == s) return name;
  return "unknown";
}

Status status_from_name(const std::string& name) {
  for (const auto& [v, n] : kStatusNames)
    if (name == n) return v;
  throw ValidationError("unknown session status '" + name + "'");
}

void EditConfig::validate() const {
  if (!(beta >= 0 && beta <= 1)) throw InvalidParameter("edit config: beta must lie in [0, 1]");
  if (max_rounds < 1) throw PreconditionError("edit config: max_rounds must be >= 1");
  if (!(t_min >= 0 && t_min <= t_max && t_max <= 1)) {
    throw InvalidParameter("edit config: noise range must satisfy 0 <= t_min <= t_max <= 1");
  }
  if (attributes.empty()) throw InvalidParameter("edit config: no attributes to optimize");
  for (Attribute a : attributes) {
    if (a == Attribute::kRoi) throw InvalidParameter("edit config: roi_logit is not an editable attribute");
  }
  if (early_stop_window < 1) throw InvalidParameter("edit config: early-stop window must be >= 1");
  learning_rates.validate();
}

EditConfig EditConfig::from_json(const nlohmann::json& j) {
  EditConfig c;
  try {
    if (j.contains("beta")) c.beta = j["beta"].get<double>();
    if (j.contains("max_rounds")) c.max_rounds = j["max_rounds"].get<int>();
    if (j.contains("t_min")) c.t_min = j["t_min"].get<double>();
    if (j.contains("t_max")) c.t_max = j["t_max"].get<double>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("mask_gradients")) c.mask_gradients = j["mask_gradients"].get<bool>();
    if (j.contains("early_stop")) c.early_stop = j["early_stop"].get<bool>();
    if (j.contains("early_stop_window")) c.early_stop_window = j["early_stop_window"].get<int>();
    if (j.contains("early_stop_tolerance")) c.early_stop_tolerance = j["early_stop_tolerance"].get<double>();
    if (j.contains("attributes")) {
      c.attributes.clear();
      for (const auto& name : j["attributes"]) c.attributes.push_back(attribute_from_name(name.get<std::string>()));
    }
    if (j.contains("learning_rates")) {
      const auto& l = j["learning_rates"];
      auto& r = c.learning_rates;
      for (auto [key, slot] : {std::pair{"position", &r.position}, {"log_scale", &r.log_scale},
                               {"rotation", &r.rotation}, {"color", &r.color},
                               {"opacity_logit", &r.opacity_logit}, {"roi_logit", &r.roi_logit}}) {
        if (l.contains(key)) *slot = l[key].get<double>();
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("edit config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json EditConfig::to_json() const {
  nlohmann::json attrs = nlohmann::json::array();
  for (Attribute a : attributes) attrs.push_back(attribute_name(a));
  const auto& r = learning_rates;
  return {{"beta", beta},
          {"max_rounds", max_rounds},
          {"t_min", t_min},
          {"t_max", t_max},
          {"seed", seed},
          {"attributes", attrs},
          {"mask_gradients", mask_gradients},
          {"early_stop", early_stop},
          {"early_stop_window", early_stop_window},
          {"early_stop_tolerance", early_stop_tolerance},
          {"learning_rates",
           {{"position", r.position},
            {"log_scale", r.log_scale},
            {"rotation", r.rotation},
            {"color", r.color},
            {"opacity_logit", r.opacity_logit},
            {"roi_logit", r.roi_logit}}}};
}

nlohmann::json StepDiagnostics::to_json() const {
  nlohmann::json norms;
  for (const auto& [a, v] : grad_norms) norms[attribute_name(a)] = v;
  return {{"round", round}, {"view", view}, {"noise_level", noise_level}, {"loss", loss}, {"grad_norms", norms}};
}

EditSession::EditSession(Scene original, std::vector<Cam> cameras, roi::GaussianRoi roi, std::string instruction,
                         EditConfig config)
    : original_(std::make_shared<const Scene>(std::move(original))),
      cameras_(std::move(cameras)),
      roi_(std::move(roi)),
      instruction_(std::move(instruction)),
      config_(std::move(config)),
      working_(original_),
      rng_(config_.seed) {
  config_.validate();
  if (roi_.size() != original_->size()) throw ContractError("session: RoI size differs from scene size");
  if (cameras_.empty() && !original_->empty()) throw PreconditionError("session: no training cameras");
  for (const auto& c : cameras_) validate_camera(c);
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < original_->size(); ++i)
    if (!config_.mask_gradients || roi_.membership[i]) rows.push_back(Eigen::Index(i));
  optimizer_ = optim::SceneOptimizer<double>(std::move(rows), config_.attributes, config_.learning_rates);
  original_renders_.resize(cameras_.size());
}

std::shared_ptr<const Scene> EditSession::snapshot() const {
  std::lock_guard lock(mutex_);
  return working_;
}

int EditSession::round() const {
  std::lock_guard lock(mutex_);
  return round_;
}

Status EditSession::status() const {
  std::lock_guard lock(mutex_);
  return status_;
}

std::vector<StepDiagnostics> EditSession::history() const {
  std::lock_guard lock(mutex_);
  return history_;
}

std::optional<std::string> EditSession::last_error() const {
  std::lock_guard lock(mutex_);
  return last_error_;
}

void EditSession::set_status(Status s) {
  std::lock_guard lock(mutex_);
  status_ = s;
}

void EditSession::set_max_rounds(int max_rounds) {
  if (max_rounds < 1) throw PreconditionError("session: max_rounds must be >= 1");
  std::lock_guard lock(mutex_);
  if (max_rounds < round_) throw PreconditionError("session: max_rounds below the completed round count");
  config_.max_rounds = max_rounds;
}

const Image& EditSession::original_render(std::size_t view) {
  auto& slot = original_renders_[view];
  if (!slot) slot = raster::render(*original_, cameras_[view], raster::Channel::kColor);
  return *slot;
}

StepDiagnostics EditSession::step(const clients::ModelBackends& backends) {
  if (cameras_.empty()) throw PreconditionError("session: no cameras to sample");
  std::mt19937_64 trial = rng_;
  const std::size_t view = std::uniform_int_distribution<std::size_t>(0, cameras_.size() - 1)(trial);
  const double t = std::uniform_real_distribution<double>(config_.t_min, config_.t_max)(trial);
  auto diag = run_round(view, t, backends);
  rng_ = trial;
  return diag;
}

StepDiagnostics EditSession::step_view(std::size_t view, const clients::ModelBackends& backends) {
  if (view >= cameras_.size()) throw ContractError("session: view index out of range");
  std::mt19937_64 trial = rng_;
  const double t = std::uniform_real_distribution<double>(config_.t_min, config_.t_max)(trial);
  auto diag = run_round(view, t, backends);
  rng_ = trial;
  return diag;
}

StepDiagnostics EditSession::run_round(std::size_t view, double noise_level, const clients::ModelBackends& backends) {
  if (status() != Status::kEditing) {
    throw PreconditionError(std::string("session: cannot step while ") + status_name(status()));
  }
  if (round() >= config_.max_rounds) throw PreconditionError("session: max_rounds reached");

  const auto working = snapshot();
  const Cam& cam = cameras_[view];
  const Image rendered = raster::render(*working, cam, raster::Channel::kColor);
  const Image& original = original_render(view);
  Image edited;
  try {
    edited = backends.editor->edit_image(rendered, original, instruction_, noise_level);
  } catch (const Error& e) {
    std::lock_guard lock(mutex_);
    last_error_ = e.what();
    throw;
  }

  const auto loss = optim::edit_loss(rendered, edited, config_.beta);
  if (!std::isfinite(loss.value)) {
    std::lock_guard lock(mutex_);
    status_ = Status::kFailed;
    last_error_ = "non-finite edit loss at round " + std::to_string(round_ + 1);
    throw NumericalError(*last_error_);
  }

  auto grads = raster::render_backward(*working, cam, raster::Channel::kColor, loss.grad);
  if (config_.mask_gradients) grads.mask_rows(roi_.membership);

  StepDiagnostics diag;
  diag.view = view;
  diag.noise_level = noise_level;
  diag.loss = loss.value;
  for (Attribute a : config_.attributes) diag.grad_norms[a] = grads.block(a).norm();

  auto next = std::make_shared<Scene>(*working);
  try {
    optimizer_.step(*next, grads);
  } catch (const NumericalError& e) {
    std::lock_guard lock(mutex_);
    status_ = Status::kFailed;
    last_error_ = e.what();
    throw;
  }

  std::lock_guard lock(mutex_);
  working_ = std::move(next);
  diag.round = ++round_;
  history_.push_back(diag);
  last_error_.reset();
  return diag;
}

void EditSession::save_checkpoint(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  std::shared_ptr<const Scene> working;
  {
    std::lock_guard lock(mutex_);
    working = working_;
    j["round"] = round_;
    j["status"] = status_name(status_);
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& d : history_) hist.push_back(d.to_json());
    j["history"] = hist;
    j["config"] = config_.to_json();
  }
  std::ostringstream rng_state;
  rng_state << rng_;
  j["rng"] = rng_state.str();
  j["seed"] = config_.seed;
  j["instruction"] = instruction_;
  j["optimizer"] = optimizer_.to_json();
  j["cameras"] = cameras_to_json(cameras_);
  std::vector<int> members(roi_.membership.begin(), roi_.membership.end());
  j["roi"] = {{"membership", members}, {"soft", std::vector<double>(roi_.soft.data(), roi_.soft.data() + roi_.soft.size())}};

  write_file(dir / "working.ply", export_ply(*working));
  write_file(dir / "original.ply", export_ply(*original_));
  write_file(dir / "session.json", j.dump());
}

std::unique_ptr<EditSession> EditSession::load_checkpoint(const std::filesystem::path& dir) {
  const auto bytes = read_file(dir / "session.json");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("checkpoint: " + std::string(e.what()), e.byte);
  }
  try {
    roi::GaussianRoi roi;
    for (int m : j.at("roi").at("membership").get<std::vector<int>>()) roi.membership.push_back(m != 0);
    const auto soft = j.at("roi").at("soft").get<std::vector<double>>();
    roi.soft = Eigen::Map<const Eigen::VectorXd>(soft.data(), Eigen::Index(soft.size()));

    auto s = std::make_unique<EditSession>(read_scene(dir / "original.ply"), cameras_from_json<double>(j.at("cameras")),
                                           std::move(roi), j.at("instruction").get<std::string>(),
                                           EditConfig::from_json(j.at("config")));
    s->working_ = std::make_shared<const Scene>(read_scene(dir / "working.ply"));
    if (s->working_->size() != s->original_->size()) throw ValidationError("checkpoint: scene sizes differ");
    s->round_ = j.at("round").get<int>();
    s->status_ = status_from_name(j.at("status").get<std::string>());
    std::istringstream rng_state(j.at("rng").get<std::string>());
    rng_state >> s->rng_;
    if (!rng_state) throw ValidationError("checkpoint: unreadable RNG state");
    s->optimizer_ = optim::SceneOptimizer<double>::from_json(j.at("optimizer"));
    for (const auto& h : j.at("history")) {
      StepDiagnostics d;
      d.round = h.at("round").get<int>();
      d.view = h.at("view").get<std::size_t>();
      d.noise_level = h.at("noise_level").get<double>();
      d.loss = h.at("loss").get<double>();
      for (const auto& [name, v] : h.at("grad_norms").items()) d.grad_norms[attribute_from_name(name)] = v.get<double>();
      s->history_.push_back(d);
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: ") + e.what());
  }
}

Scene run_session(EditSession& session, const clients::ModelBackends& backends) {
  if (session.original().empty()) {
    session.set_status(Status::kDone);
    return session.original();
  }
  if (session.status() == Status::kPaused) session.set_status(Status::kEditing);
  if (session.status() != Status::kEditing) {
    throw PreconditionError(std::string("session: cannot run while ") + status_name(session.status()));
  }
  const auto& cfg = session.config();
  const auto window = std::size_t(cfg.early_stop_window);
  while (session.round() < cfg.max_rounds) {
    if (session.consume_pause_request()) {
      session.set_status(Status::kPaused);
      return *session.snapshot();
    }
    session.step(backends);
    if (cfg.early_stop) {
      const auto h = session.history();
      if (h.size() >= 2 * window) {
        auto mean = [&](std::size_t from) {
          double s = 0;
          for (std::size_t k = from; k < from + window; ++k) s += h[k].loss;
          return s / double(window);
        };
        if (mean(h.size() - 2 * window) - mean(h.size() - window) < cfg.early_stop_tolerance) break;
      }
    }
  }
  session.set_status(Status::kDone);
  return *session.snapshot();
}

}  // namespace gsedit::edit
