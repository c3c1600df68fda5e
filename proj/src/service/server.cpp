#include "gsedit/service/server.hpp"

#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <future>
#include <map>
#include <mutex>
#include <thread>

#include "gsedit/core/cameras_json.hpp"
#include "gsedit/core/ply.hpp"
#include "gsedit/raster/rasterizer.hpp"
#include "gsedit/service/frames.hpp"
#include "gsedit/version.hpp"

// After Eigen: <resolv.h> defines a _res macro.
#include <httplib.h>

namespace gsedit::service {

namespace {

using json = nlohmann::json;
using Scene = GaussianScene<double>;
using Cam = Camera<double>;
using Clock = std::chrono::steady_clock;

class NotFound : public Error {
 public:
  using Error::Error;
};

int http_status_for(const std::exception& e) {
  if (dynamic_cast<const NotFound*>(&e)) return 404;
  if (dynamic_cast<const PreconditionError*>(&e)) return 409;
  if (dynamic_cast<const BackendError*>(&e)) return 502;
  if (dynamic_cast<const roi::ExtractionFailed*>(&e)) return 502;
  if (dynamic_cast<const NumericalError*>(&e)) return 500;
  if (dynamic_cast<const ValidationError*>(&e) || dynamic_cast<const ParseError*>(&e) ||
      dynamic_cast<const SchemaError*>(&e) || dynamic_cast<const InvalidParameter*>(&e) ||
      dynamic_cast<const ContractError*>(&e) || dynamic_cast<const json::exception*>(&e)) {
    return 400;
  }
  return 500;
}

/// StageError carrying the HTTP status of the failure it wraps.
class StageFailure : public StageError {
 public:
  StageFailure(std::string stage, const std::exception& cause)
      : StageError(std::move(stage), cause.what()), status_(http_status_for(cause)) {}
  int status() const { return status_; }

 private:
  int status_;
};

/// Runs jobs one at a time, in submission order, on a dedicated thread.
class Worker {
 public:
  Worker() : thread_([this] { loop(); }) {}
  ~Worker() {
    {
      std::lock_guard lock(mutex_);
      stopping_ = true;
    }
    cv_.notify_all();
    thread_.join();
  }

  template <typename F>
  auto submit(F f) -> std::future<decltype(f())> {
    auto task = std::make_shared<std::packaged_task<decltype(f())()>>(std::move(f));
    auto future = task->get_future();
    {
      std::lock_guard lock(mutex_);
      jobs_.emplace_back([task] { (*task)(); });
    }
    cv_.notify_one();
    return future;
  }

  void drain() { submit([] {}).wait(); }

 private:
  void loop() {
    for (;;) {
      std::function<void()> job;
      {
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [&] { return stopping_ || !jobs_.empty(); });
        if (jobs_.empty()) return;
        job = std::move(jobs_.front());
        jobs_.pop_front();
      }
      job();
    }
  }

  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<std::function<void()>> jobs_;
  bool stopping_ = false;
  std::thread thread_;
};

struct SceneEntry {
  std::string id;
  Scene scene;
  std::vector<Cam> cameras;
};

struct SessionEntry {
  std::string id, scene_id, instruction;
  std::shared_ptr<const SceneEntry> scene;
  edit::PipelineConfig cfg;

  mutable std::mutex mutex;  // guards the fields below
  edit::Status status = edit::Status::kIdle;
  std::optional<roi::SceneDescription> description;
  std::optional<roi::Extraction> extraction;
  std::vector<roi::ViewMask> masks;
  std::shared_ptr<const Scene> lifted;
  std::optional<roi::GaussianRoi> trained, roi;
  roi::RoiModification mods;
  std::vector<std::pair<std::string, double>> timings;
  std::optional<std::string> last_error;
  std::shared_ptr<edit::EditSession> edit;

  Worker worker;

  edit::Status current_status() const {
    std::lock_guard lock(mutex);
    return edit ? edit->status() : status;
  }
};

json roi_state(const roi::GaussianRoi& r) {
  std::vector<int> members(r.membership.begin(), r.membership.end());
  return {{"membership", members}, {"soft", std::vector<double>(r.soft.data(), r.soft.data() + r.soft.size())}};
}

roi::GaussianRoi roi_from_state(const json& j) {
  roi::GaussianRoi r;
  for (int m : j.at("membership").get<std::vector<int>>()) r.membership.push_back(m != 0);
  const auto soft = j.at("soft").get<std::vector<double>>();
  r.soft = Eigen::Map<const Eigen::VectorXd>(soft.data(), Eigen::Index(soft.size()));
  if (r.soft.size() != Eigen::Index(r.membership.size())) throw ValidationError("RoI state: length mismatch");
  return r;
}

json body_json(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    auto j = json::parse(req.body);
    if (!j.is_object()) throw ValidationError("request body must be a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("request body: ") + e.what(), e.byte);
  }
}

int id_number(const std::string& id) {
  const auto dash = id.rfind('-');
  if (dash == std::string::npos) return 0;
  try {
    return std::stoi(id.substr(dash + 1));
  } catch (const std::exception&) {
    return 0;
  }
}

}  // namespace

void ServiceConfig::validate() const {
  if (port < 0 || port > 65535) throw InvalidParameter("service: port out of range");
  if (host.empty()) throw InvalidParameter("service: empty host");
  pipeline.validate();
}

struct Service::Impl {
  ServiceConfig config;
  clients::ModelBackends backends;
  httplib::Server server;
  std::thread server_thread;

  std::mutex registry_mutex;
  std::map<std::string, std::shared_ptr<const SceneEntry>> scenes;
  std::map<std::string, std::shared_ptr<SessionEntry>> sessions;
  int next_scene = 1, next_session = 1;

  struct Cached {
    int status;
    std::string body, content_type;
  };
  std::mutex request_mutex;
  std::map<std::string, std::shared_future<Cached>> requests;

  std::mutex stop_mutex;
  std::condition_variable stop_cv;
  bool stopped = false;
  std::atomic<bool> stopping{false};

  Impl(ServiceConfig c, clients::ModelBackends b) : config(std::move(c)), backends(std::move(b)) {
    config.validate();
    routes();
  }

  // ---- registry -------------------------------------------------------

  std::shared_ptr<const SceneEntry> scene(const std::string& id) {
    std::lock_guard lock(registry_mutex);
    auto it = scenes.find(id);
    if (it == scenes.end()) throw NotFound("no scene '" + id + "'");
    return it->second;
  }

  std::shared_ptr<SessionEntry> session(const std::string& id) {
    std::lock_guard lock(registry_mutex);
    auto it = sessions.find(id);
    if (it == sessions.end()) throw NotFound("no session '" + id + "'");
    return it->second;
  }

  std::filesystem::path scene_dir(const std::string& id) const { return config.data_dir / "scenes" / id; }
  std::filesystem::path session_dir(const std::string& id) const { return config.data_dir / "sessions" / id; }

  // ---- responses ------------------------------------------------------

  static void send_json(httplib::Response& res, const json& j, int status = 200) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
  }

  template <typename F>
  static void guarded(httplib::Response& res, F&& f) {
    try {
      f();
    } catch (const StageFailure& e) {
      send_json(res, {{"error", e.what()}, {"stage", e.stage()}}, e.status());
    } catch (const StageError& e) {
      send_json(res, {{"error", e.what()}, {"stage", e.stage()}}, 500);
    } catch (const std::exception& e) {
      send_json(res, {{"error", e.what()}}, http_status_for(e));
    }
  }

  /// Replays the first response for a repeated X-Request-Id.
  httplib::Server::Handler idempotent(httplib::Server::Handler h) {
    return [this, h](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.get_header_value("X-Request-Id");
      if (id.empty()) return h(req, res);
      const std::string key = req.method + " " + req.path + " " + id;
      std::promise<Cached> promise;
      std::shared_future<Cached> existing;
      {
        std::lock_guard lock(request_mutex);
        auto it = requests.find(key);
        if (it != requests.end()) {
          existing = it->second;
        } else {
          requests.emplace(key, promise.get_future().share());
        }
      }
      if (existing.valid()) {
        const Cached c = existing.get();
        res.status = c.status;
        res.set_content(c.body, c.content_type);
        res.set_header("X-Request-Replayed", "true");
        return;
      }
      h(req, res);
      promise.set_value({res.status, res.body, res.get_header_value("Content-Type")});
    };
  }

  // ---- descriptors ----------------------------------------------------

  static json descriptor(const SessionEntry& s) {
    std::lock_guard lock(s.mutex);
    json j;
    j["id"] = s.id;
    j["scene_id"] = s.scene_id;
    j["instruction"] = s.instruction;
    j["status"] = edit::status_name(s.edit ? s.edit->status() : s.status);
    j["round"] = s.edit ? s.edit->round() : 0;
    j["max_rounds"] = s.edit ? s.edit->config().max_rounds : s.cfg.edit.max_rounds;
    j["t_roi"] = s.extraction ? json(s.extraction->phrase) : json(nullptr);
    j["t_roi_fallback"] = s.extraction ? json(s.extraction->fallback) : json(nullptr);
    const auto* r = s.roi ? &*s.roi : s.trained ? &*s.trained : nullptr;
    j["roi_count"] = r ? json(r->count()) : json(nullptr);
    json timings = json::object();
    for (const auto& [stage, sec] : s.timings) timings[stage] = sec;
    j["stage_seconds"] = timings;
    std::optional<std::string> err = s.last_error;
    if (s.edit && s.edit->last_error()) err = s.edit->last_error();
    j["last_error"] = err ? json(*err) : json(nullptr);
    return j;
  }

  // ---- session stages (worker thread) ---------------------------------

  template <typename F>
  static void timed(SessionEntry& s, const char* stage, F&& f) {
    const auto start = Clock::now();
    try {
      f();
    } catch (const std::exception& e) {
      std::lock_guard lock(s.mutex);
      s.last_error = std::string(stage) + ": " + e.what();
      throw StageFailure(stage, e);
    }
    std::lock_guard lock(s.mutex);
    s.timings.emplace_back(stage, std::chrono::duration<double>(Clock::now() - start).count());
    s.last_error.reset();
  }

  static void require_not_editing(const SessionEntry& s) {
    std::lock_guard lock(s.mutex);
    if (s.edit) throw PreconditionError("session " + s.id + " has already started editing");
  }

  static void mark_lifting(SessionEntry& s) {
    std::lock_guard lock(s.mutex);
    s.status = edit::Status::kLifting;
  }

  void describe(SessionEntry& s) {
    require_not_editing(s);
    mark_lifting(s);
    const auto& sc = *s.scene;
    timed(s, "describe", [&] {
      auto d = roi::generate_description(sc.scene, sc.cameras, std::min(s.cfg.description_views, sc.cameras.size()),
                                         backends, s.cfg.prompts, s.cfg.seed);
      std::lock_guard lock(s.mutex);
      s.description = std::move(d);
    });
  }

  void extract(SessionEntry& s, std::optional<std::string> phrase) {
    require_not_editing(s);
    mark_lifting(s);
    if (phrase) {
      if (phrase->empty()) throw InvalidParameter("empty phrase");
      std::lock_guard lock(s.mutex);
      s.extraction = roi::Extraction{*phrase, false};
      return;
    }
    if (!s.cfg.use_text_roi) {
      std::lock_guard lock(s.mutex);
      s.extraction = roi::Extraction{s.instruction, true};
      return;
    }
    if (!s.description) describe(s);
    timed(s, "extract", [&] {
      const std::string merged = s.description->merged;
      roi::Extraction x =
          s.cfg.fallback_on_extraction_failure
              ? roi::extract_or_fallback(merged, s.instruction, backends, s.cfg.prompts)
              : roi::Extraction{roi::extract_instruction_roi(merged, s.instruction, backends, s.cfg.prompts), false};
      std::lock_guard lock(s.mutex);
      s.extraction = std::move(x);
    });
  }

  void masks(SessionEntry& s, std::optional<std::size_t> views) {
    require_not_editing(s);
    if (!s.extraction) extract(s, std::nullopt);
    mark_lifting(s);
    const auto& sc = *s.scene;
    timed(s, "masks", [&] {
      auto m = roi::acquire_masks(sc.scene, sc.cameras, s.extraction->phrase, backends,
                                  views.value_or(s.cfg.mask_views), s.cfg.seed);
      std::lock_guard lock(s.mutex);
      s.masks = std::move(m);
    });
  }

  void lift(SessionEntry& s, std::optional<int> iterations) {
    require_not_editing(s);
    if (s.masks.empty()) masks(s, std::nullopt);
    mark_lifting(s);
    const auto& sc = *s.scene;
    timed(s, "lift", [&] {
      optim::LiftConfig cfg = s.cfg.lift;
      cfg.threshold = s.cfg.tau;
      if (iterations) cfg.iterations = *iterations;
      cfg.validate();
      auto lifted = std::make_shared<Scene>(sc.scene);
      auto trained = roi::lift_roi(*lifted, sc.cameras, s.masks, cfg);
      auto combined = roi::combine_roi(trained, s.mods, *lifted);
      std::lock_guard lock(s.mutex);
      s.lifted = std::move(lifted);
      s.trained = std::move(trained);
      s.roi = std::move(combined);
    });
  }

  void apply_roi(SessionEntry& s, roi::RoiModification mods) {
    require_not_editing(s);
    if (!s.trained) throw PreconditionError("session " + s.id + ": lift the RoI before modifying it");
    timed(s, "roi", [&] {
      auto combined = roi::combine_roi(*s.trained, mods, *s.lifted);
      std::lock_guard lock(s.mutex);
      s.mods = std::move(mods);
      s.roi = std::move(combined);
    });
  }

  void run(const std::shared_ptr<SessionEntry>& s) {
    auto session = s->edit;
    try {
      edit::run_session(*session, backends);
    } catch (const BackendError& e) {
      // The round was not committed; park the session so it can be resumed.
      session->set_status(edit::Status::kPaused);
      std::lock_guard lock(s->mutex);
      s->last_error = std::string("edit: ") + e.what();
    } catch (const std::exception& e) {
      session->set_status(edit::Status::kFailed);
      std::lock_guard lock(s->mutex);
      s->last_error = std::string("edit: ") + e.what();
    }
  }

  void start(const std::shared_ptr<SessionEntry>& s, std::optional<int> max_rounds) {
    std::unique_lock lock(s->mutex);
    if (s->edit) {
      const auto st = s->edit->status();
      if (st != edit::Status::kDone) {
        throw PreconditionError(std::string("session is ") + edit::status_name(st) + "; use pause/resume");
      }
      if (!max_rounds || *max_rounds <= s->edit->round()) {
        throw PreconditionError("session is done; pass max_rounds above the current round to continue");
      }
      s->edit->set_max_rounds(*max_rounds);
    } else {
      if (!s->roi || !s->lifted) throw PreconditionError("session " + s->id + ": lift the RoI before starting");
      edit::EditConfig cfg = s->cfg.edit;
      if (max_rounds) cfg.max_rounds = *max_rounds;
      s->edit = std::make_shared<edit::EditSession>(*s->lifted, s->scene->cameras, *s->roi, s->instruction, cfg);
    }
    s->edit->set_status(edit::Status::kEditing);
    s->last_error.reset();
    lock.unlock();
    s->worker.submit([this, s] { run(s); });
  }

  void pause(SessionEntry& s) {
    std::shared_ptr<edit::EditSession> e;
    {
      std::lock_guard lock(s.mutex);
      e = s.edit;
    }
    if (!e || e->status() != edit::Status::kEditing) throw PreconditionError("session is not editing");
    e->request_pause();
    s.worker.drain();
  }

  void resume(const std::shared_ptr<SessionEntry>& s) {
    {
      std::lock_guard lock(s->mutex);
      if (!s->edit || s->edit->status() != edit::Status::kPaused) throw PreconditionError("session is not paused");
      s->edit->set_status(edit::Status::kEditing);
      s->last_error.reset();
    }
    s->worker.submit([this, s] { run(s); });
  }

  // ---- persistence ----------------------------------------------------

  void save_scene(const SceneEntry& e) {
    const auto dir = scene_dir(e.id);
    std::filesystem::create_directories(dir);
    write_file(dir / "scene.ply", export_ply(e.scene));
    write_file(dir / "cameras.json", cameras_to_json(e.cameras).dump());
  }

  void save_session(const SessionEntry& s) {
    const auto dir = session_dir(s.id);
    std::filesystem::create_directories(dir);
    json j;
    std::shared_ptr<edit::EditSession> e;
    {
      std::lock_guard lock(s.mutex);
      j["id"] = s.id;
      j["scene_id"] = s.scene_id;
      j["instruction"] = s.instruction;
      j["status"] = edit::status_name(s.status);
      j["config"] = s.cfg.to_json();
      if (s.description) j["description"] = s.description->to_json();
      if (s.extraction) j["extraction"] = {{"phrase", s.extraction->phrase}, {"fallback", s.extraction->fallback}};
      if (s.trained) j["trained"] = roi_state(*s.trained);
      if (s.roi) j["roi"] = roi_state(*s.roi);
      j["mods"] = s.mods.to_json();
      json timings = json::array();
      for (const auto& [stage, sec] : s.timings) timings.push_back({stage, sec});
      j["timings"] = timings;
      j["last_error"] = s.last_error ? json(*s.last_error) : json(nullptr);
      if (s.lifted) write_file(dir / "lifted.ply", export_ply(*s.lifted));
      e = s.edit;
    }
    if (e) e->save_checkpoint(dir / "edit");
    write_file(dir / "session.json", j.dump(2));
  }

  std::shared_ptr<SessionEntry> load_session(const std::filesystem::path& dir) {
    const auto bytes = read_file(dir / "session.json");
    const json j = json::parse(bytes.begin(), bytes.end());
    auto s = std::make_shared<SessionEntry>();
    s->id = j.at("id").get<std::string>();
    s->scene_id = j.at("scene_id").get<std::string>();
    s->instruction = j.at("instruction").get<std::string>();
    s->scene = scene(s->scene_id);
    s->cfg = edit::PipelineConfig::from_json(j.at("config"));
    s->status = edit::status_from_name(j.at("status").get<std::string>());
    if (j.contains("description")) {
      roi::SceneDescription d;
      d.merged = j["description"].at("merged").get<std::string>();
      for (const auto& v : j["description"].at("captions"))
        d.per_view_captions.emplace_back(v.at("view").get<std::size_t>(), v.at("caption").get<std::string>());
      s->description = std::move(d);
    }
    if (j.contains("extraction")) {
      s->extraction = roi::Extraction{j["extraction"].at("phrase").get<std::string>(),
                                      j["extraction"].at("fallback").get<bool>()};
    }
    if (j.contains("trained")) s->trained = roi_from_state(j["trained"]);
    if (j.contains("roi")) s->roi = roi_from_state(j["roi"]);
    s->mods = roi::RoiModification::from_json(j.at("mods"));
    for (const auto& t : j.at("timings")) s->timings.emplace_back(t.at(0).get<std::string>(), t.at(1).get<double>());
    if (j.at("last_error").is_string()) s->last_error = j["last_error"].get<std::string>();
    if (std::filesystem::exists(dir / "lifted.ply")) {
      s->lifted = std::make_shared<Scene>(import_ply<double>(read_file(dir / "lifted.ply")));
    }
    if (std::filesystem::exists(dir / "edit" / "session.json")) {
      s->edit = edit::EditSession::load_checkpoint(dir / "edit");
      if (s->edit->status() == edit::Status::kEditing) s->edit->set_status(edit::Status::kPaused);
    }
    return s;
  }

  void restore() {
    namespace fs = std::filesystem;
    if (fs::is_directory(config.data_dir / "scenes")) {
      for (const auto& d : fs::directory_iterator(config.data_dir / "scenes")) {
        auto e = std::make_shared<SceneEntry>();
        e->id = d.path().filename().string();
        e->scene = import_ply<double>(read_file(d.path() / "scene.ply"));
        const auto cams = read_file(d.path() / "cameras.json");
        e->cameras = cameras_from_json<double>(json::parse(cams.begin(), cams.end()));
        next_scene = std::max(next_scene, id_number(e->id) + 1);
        scenes.emplace(e->id, std::move(e));
      }
    }
    if (fs::is_directory(config.data_dir / "sessions")) {
      for (const auto& d : fs::directory_iterator(config.data_dir / "sessions")) {
        auto s = load_session(d.path());
        next_session = std::max(next_session, id_number(s->id) + 1);
        sessions.emplace(s->id, std::move(s));
      }
    }
  }

  void flush() {
    std::vector<std::shared_ptr<SessionEntry>> all;
    {
      std::lock_guard lock(registry_mutex);
      for (const auto& [id, s] : sessions) all.push_back(s);
    }
    for (const auto& s : all) save_session(*s);
  }

  // ---- routes ---------------------------------------------------------

  Scene current_scene(const SessionEntry& s) {
    std::lock_guard lock(s.mutex);
    if (s.edit) return *s.edit->snapshot();
    if (s.lifted) return *s.lifted;
    return s.scene->scene;
  }

  void routes() {
    auto& svr = server;

    svr.Get("/health", [](const httplib::Request&, httplib::Response& res) {
      send_json(res, {{"status", "ok"}, {"version", kVersion}});
    });
    svr.Get("/version", [](const httplib::Request&, httplib::Response& res) {
      send_json(res, {{"version", kVersion}});
    });

    svr.Post("/scenes", idempotent([this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        if (!req.is_multipart_form_data() || !req.has_file("scene") || !req.has_file("cameras")) {
          throw ValidationError("POST /scenes expects multipart fields 'scene' (PLY) and 'cameras' (JSON)");
        }
        const auto& ply = req.get_file_value("scene").content;
        auto e = std::make_shared<SceneEntry>();
        e->scene = import_ply<double>(std::span(reinterpret_cast<const std::uint8_t*>(ply.data()), ply.size()));
        try {
          e->cameras = cameras_from_json<double>(json::parse(req.get_file_value("cameras").content));
        } catch (const json::parse_error& ex) {
          throw ParseError(std::string("cameras: ") + ex.what(), ex.byte);
        }
        {
          std::lock_guard lock(registry_mutex);
          e->id = "scene-" + std::to_string(next_scene++);
        }
        save_scene(*e);
        const json out = {{"scene_id", e->id}, {"gaussians", e->scene.size()}, {"views", e->cameras.size()}};
        {
          std::lock_guard lock(registry_mutex);
          scenes.emplace(e->id, std::move(e));
        }
        send_json(res, out, 201);
      });
    }));

    svr.Get(R"(/scenes/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto e = scene(req.matches[1]);
        send_json(res, {{"scene_id", e->id}, {"gaussians", e->scene.size()}, {"views", e->cameras.size()}});
      });
    });

    svr.Get(R"(/scenes/([^/]+)/render)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto e = scene(req.matches[1]);
        if (!req.has_param("view")) throw ValidationError("render: missing 'view' parameter");
        const int view = std::stoi(req.get_param_value("view"));
        if (view < 0 || std::size_t(view) >= e->cameras.size()) throw ContractError("render: view out of range");
        const FrameMode mode =
            frame_mode_from_name(req.has_param("channel") ? req.get_param_value("channel") : "color");
        Image frame;
        if (req.has_param("session")) {
          const auto s = session(req.get_param_value("session"));
          if (s->scene_id != e->id) throw ContractError("render: session belongs to another scene");
          std::optional<roi::GaussianRoi> r;
          {
            std::lock_guard lock(s->mutex);
            if (s->roi) r = s->roi;
          }
          frame = render_frame(current_scene(*s), e->cameras[std::size_t(view)], mode, r ? &*r : nullptr);
        } else {
          frame = render_frame(e->scene, e->cameras[std::size_t(view)], mode);
        }
        const auto png = encode_png(frame);
        res.set_content(std::string(png.begin(), png.end()), "image/png");
      });
    });

    svr.Post(R"(/scenes/([^/]+)/pick)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto e = scene(req.matches[1]);
        const json b = body_json(req);
        const int view = b.at("view").get<int>(), x = b.at("x").get<int>(), y = b.at("y").get<int>();
        if (view < 0 || std::size_t(view) >= e->cameras.size()) throw ContractError("pick: view out of range");
        const Scene sc = b.contains("session") ? current_scene(*session(b["session"].get<std::string>())) : e->scene;
        const auto hit = raster::pick(sc, e->cameras[std::size_t(view)], x, y);
        send_json(res, {{"gaussian_index", hit ? json(*hit) : json(nullptr)}});
      });
    });

    svr.Post("/sessions", idempotent([this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const json b = body_json(req);
        auto s = std::make_shared<SessionEntry>();
        s->scene_id = b.at("scene_id").get<std::string>();
        s->scene = scene(s->scene_id);
        s->instruction = b.at("instruction").get<std::string>();
        if (s->instruction.empty()) throw ValidationError("empty instruction");
        json cfg = config.pipeline.to_json();
        if (b.contains("config")) cfg.merge_patch(b["config"]);
        s->cfg = edit::PipelineConfig::from_json(cfg);
        {
          std::lock_guard lock(registry_mutex);
          s->id = "session-" + std::to_string(next_session++);
          sessions.emplace(s->id, s);
        }
        send_json(res, descriptor(*s), 201);
      });
    }));

    svr.Get(R"(/sessions/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { send_json(res, descriptor(*session(req.matches[1]))); });
    });

    // Stage endpoints run on the session worker and answer when done.
    auto stage = [this](const char* pattern, std::function<json(const std::shared_ptr<SessionEntry>&, const json&)> f) {
      server.Post(pattern, idempotent([this, f](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
          const auto s = session(req.matches[1]);
          const json b = body_json(req);
          json out = s->worker.submit([&] { return f(s, b); }).get();
          out["session"] = descriptor(*s);
          send_json(res, out);
        });
      }));
    };

    stage(R"(/sessions/([^/]+)/describe)", [this](const auto& s, const json&) {
      describe(*s);
      return json{{"description", s->description->to_json()}};
    });
    stage(R"(/sessions/([^/]+)/extract)", [this](const auto& s, const json& b) {
      extract(*s, b.contains("phrase") ? std::optional(b["phrase"].get<std::string>()) : std::nullopt);
      return json{{"phrase", s->extraction->phrase}, {"fallback", s->extraction->fallback}};
    });
    stage(R"(/sessions/([^/]+)/masks)", [this](const auto& s, const json& b) {
      masks(*s, b.contains("views") ? std::optional(b["views"].get<std::size_t>()) : std::nullopt);
      json views = json::array();
      for (const auto& m : s->masks) views.push_back(m.view);
      return json{{"views", views}};
    });
    stage(R"(/sessions/([^/]+)/lift)", [this](const auto& s, const json& b) {
      lift(*s, b.contains("iterations") ? std::optional(b["iterations"].get<int>()) : std::nullopt);
      return json{{"roi", s->roi->to_json()}};
    });
    stage(R"(/sessions/([^/]+)/roi)", [this](const auto& s, const json& b) {
      apply_roi(*s, roi::RoiModification::from_json(b));
      return json{{"roi", s->roi->to_json()}};
    });

    svr.Post(R"(/sessions/([^/]+)/start)", idempotent([this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto s = session(req.matches[1]);
        const json b = body_json(req);
        start(s, b.contains("max_rounds") ? std::optional(b["max_rounds"].get<int>()) : std::nullopt);
        send_json(res, descriptor(*s));
      });
    }));
    svr.Post(R"(/sessions/([^/]+)/pause)", idempotent([this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto s = session(req.matches[1]);
        pause(*s);
        send_json(res, descriptor(*s));
      });
    }));
    svr.Post(R"(/sessions/([^/]+)/resume)", idempotent([this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto s = session(req.matches[1]);
        resume(s);
        send_json(res, descriptor(*s));
      });
    }));

    svr.Get(R"(/sessions/([^/]+)/events)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto s = session(req.matches[1]);
        std::size_t from = req.has_param("from") ? std::stoul(req.get_param_value("from")) : 0;
        const bool follow = req.has_param("follow") && req.get_param_value("follow") != "0";
        auto line = [](const edit::StepDiagnostics& d) {
          return json{{"round", d.round}, {"loss", d.loss}, {"view", d.view}, {"noise_level", d.noise_level}}.dump() +
                 "\n";
        };
        auto history = [s] {
          std::lock_guard lock(s->mutex);
          return s->edit ? s->edit->history() : std::vector<edit::StepDiagnostics>{};
        };
        if (!follow) {
          std::string out;
          const auto h = history();
          for (std::size_t k = from; k < h.size(); ++k) out += line(h[k]);
          res.set_content(out, "application/x-ndjson");
          return;
        }
        res.set_chunked_content_provider(
            "application/x-ndjson", [this, s, from, line, history](std::size_t, httplib::DataSink& sink) mutable {
              const bool running = s->current_status() == edit::Status::kEditing;
              const auto h = history();
              for (; from < h.size(); ++from) {
                const auto text = line(h[from]);
                if (!sink.write(text.data(), text.size())) return false;
              }
              if (!running || stopping) {
                sink.done();
                return true;
              }
              std::this_thread::sleep_for(std::chrono::milliseconds(20));
              return true;
            });
      });
    });

    svr.Get(R"(/sessions/([^/]+)/export)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto s = session(req.matches[1]);
        const auto ply = export_ply(current_scene(*s));
        res.set_content(std::string(ply.begin(), ply.end()), "application/octet-stream");
        res.set_header("Content-Disposition", "attachment; filename=\"" + s->id + ".ply\"");
      });
    });
  }
};

Service::Service(ServiceConfig config, clients::ModelBackends backends)
    : impl_(std::make_unique<Impl>(std::move(config), std::move(backends))) {}

Service::~Service() {
  if (impl_->server_thread.joinable()) stop();
}

int Service::start() {
  auto& d = *impl_;
  std::filesystem::create_directories(d.config.data_dir);
  d.restore();
  int port = d.config.port;
  if (port == 0) {
    port = d.server.bind_to_any_port(d.config.host);
    if (port < 0) throw Error("serve: cannot bind " + d.config.host);
  } else if (!d.server.bind_to_port(d.config.host, port)) {
    throw Error("serve: cannot bind " + d.config.host + ":" + std::to_string(port));
  }
  d.server_thread = std::thread([&d] { d.server.listen_after_bind(); });
  return port;
}

void Service::wait() {
  std::unique_lock lock(impl_->stop_mutex);
  impl_->stop_cv.wait(lock, [&] { return impl_->stopped; });
}

void Service::stop() {
  auto& d = *impl_;
  d.stopping = true;
  d.server.stop();
  if (d.server_thread.joinable()) d.server_thread.join();
  std::vector<std::shared_ptr<SessionEntry>> all;
  {
    std::lock_guard lock(d.registry_mutex);
    for (const auto& [id, s] : d.sessions) all.push_back(s);
  }
  for (const auto& s : all) {
    std::shared_ptr<edit::EditSession> e;
    {
      std::lock_guard lock(s->mutex);
      e = s->edit;
    }
    if (e && e->status() == edit::Status::kEditing) e->request_pause();
  }
  for (const auto& s : all) s->worker.drain();
  d.flush();
  {
    std::lock_guard lock(d.stop_mutex);
    d.stopped = true;
  }
  d.stop_cv.notify_all();
}

void Service::flush_checkpoints() { impl_->flush(); }

std::filesystem::path Service::session_dir(const std::string& session_id) const {
  return impl_->session_dir(session_id);
}

}  // namespace gsedit::service
