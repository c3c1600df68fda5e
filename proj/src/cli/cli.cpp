#include "gsedit/cli/cli.hpp"

#include <csignal>
#include <fstream>
#include <iostream>
#include <optional>

#include <pthread.h>

#include "gsedit/core/cameras_json.hpp"
#include "gsedit/core/ply.hpp"
#include "gsedit/edit/pipeline.hpp"
#include "gsedit/service/frames.hpp"
#include "gsedit/service/server.hpp"
#include "gsedit/synthetic/two_cluster.hpp"
#include "gsedit/version.hpp"

#include <CLI11.hpp>

namespace gsedit::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Scene = GaussianScene<double>;
using Cam = Camera<double>;

struct Common {
  std::string scene, cameras, config, out = "out", mock, endpoint;
  std::optional<std::uint64_t> seed;
};

struct Options {
  Common common;
  int view = 0;
  std::string channel = "color";
  std::size_t views = 0;
  std::string instruction, phrase, description, mods, roi_file;
  int iterations = -1, rounds = -1;
  double tau = -1;
  std::string host = "127.0.0.1", data_dir = "gsedit-data";
  int port = 8080;
  int per_cluster = 50, synth_views = 12, image_size = 64;
};

template <typename F>
auto in_stage(const char* stage, F&& f) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

json read_json_file(const std::string& path) {
  const auto bytes = read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw ParseError(path + ": " + e.what(), e.byte);
  }
}

json config_doc(const Common& c) {
  return c.config.empty() ? json::object() : in_stage("config", [&] { return read_json_file(c.config); });
}

edit::PipelineConfig pipeline_config(const Common& c, const json& doc) {
  return in_stage("config", [&] {
    json p = doc.value("pipeline", json::object());
    if (c.seed) {
      p["seed"] = *c.seed;
      p["edit"]["seed"] = *c.seed;
    }
    return edit::PipelineConfig::from_json(p);
  });
}

clients::ModelBackends backends(const Common& c, const json& doc) {
  return in_stage("backends", [&] {
    clients::BackendConfig b =
        doc.contains("backends") ? clients::BackendConfig::from_json(doc["backends"]) : clients::BackendConfig{};
    if (!c.mock.empty()) {
      b.mode = clients::BackendMode::kMock;
      b.fixture_path = c.mock;
    } else if (!c.endpoint.empty()) {
      b.mode = clients::BackendMode::kHttp;
      b.endpoint = c.endpoint;
    }
    b.validate();
    return clients::make_backends(b);
  });
}

Scene load_scene(const Common& c) {
  return in_stage("input", [&] {
    if (c.scene.empty()) throw InvalidParameter("--scene is required");
    return import_ply<double>(read_file(c.scene));
  });
}

std::vector<Cam> load_cams(const Common& c) {
  return in_stage("input", [&] {
    if (c.cameras.empty()) throw InvalidParameter("--cameras is required");
    return cameras_from_json<double>(read_json_file(c.cameras));
  });
}

fs::path out_dir(const Common& c) {
  return in_stage("output", [&] {
    fs::create_directories(c.out);
    return fs::path(c.out);
  });
}

void add_common(CLI::App* app, Common& c, bool needs_backends) {
  app->add_option("--scene", c.scene, "Scene PLY file")->required();
  app->add_option("--cameras", c.cameras, "Cameras JSON file")->required();
  app->add_option("--config", c.config, "JSON config with optional \"backends\" and \"pipeline\" objects");
  app->add_option("--out", c.out, "Output directory")->capture_default_str();
  app->add_option("--seed", c.seed, "Override the pipeline and edit seeds");
  if (needs_backends) {
    auto* mock = app->add_option("--mock", c.mock, "Use mock backends from this fixture directory");
    app->add_option("--endpoint", c.endpoint, "Use HTTP backends at this base URL")->excludes(mock);
  }
}

int cmd_render(const Options& o, std::ostream& out) {
  const Scene scene = load_scene(o.common);
  const auto cams = load_cams(o.common);
  const auto dir = out_dir(o.common);
  in_stage("render", [&] {
    if (o.view < 0 || std::size_t(o.view) >= cams.size()) {
      throw ContractError("view " + std::to_string(o.view) + " out of range (" + std::to_string(cams.size()) +
                          " cameras)");
    }
    const auto frame =
        service::render_frame(scene, cams[std::size_t(o.view)], service::frame_mode_from_name(o.channel));
    const auto path = dir / ("view" + std::to_string(o.view) + ".png");
    write_png(path, frame);
    out << path.string() << "\n";
  });
  return 0;
}

roi::SceneDescription describe(const Options& o, const Scene& scene, const std::vector<Cam>& cams,
                               const clients::ModelBackends& b, const edit::PipelineConfig& cfg) {
  return in_stage("describe", [&] {
    const std::size_t m = o.views ? o.views : std::min(cfg.description_views, cams.size());
    return roi::generate_description(scene, cams, m, b, cfg.prompts, cfg.seed);
  });
}

int cmd_describe(const Options& o, std::ostream& out) {
  const json doc = config_doc(o.common);
  const auto cfg = pipeline_config(o.common, doc);
  const Scene scene = load_scene(o.common);
  const auto cams = load_cams(o.common);
  const auto b = backends(o.common, doc);
  const auto dir = out_dir(o.common);
  const auto d = describe(o, scene, cams, b, cfg);
  write_file(dir / "description.json", d.to_json().dump(2));
  out << d.merged << "\n";
  return 0;
}

int cmd_extract(const Options& o, std::ostream& out) {
  const json doc = config_doc(o.common);
  const auto cfg = pipeline_config(o.common, doc);
  const Scene scene = load_scene(o.common);
  const auto cams = load_cams(o.common);
  const auto b = backends(o.common, doc);
  const auto dir = out_dir(o.common);
  const std::string merged =
      o.description.empty()
          ? describe(o, scene, cams, b, cfg).merged
          : in_stage("input", [&] { return read_json_file(o.description).at("merged").get<std::string>(); });
  const auto x = in_stage("extract", [&] {
    if (cfg.fallback_on_extraction_failure) return roi::extract_or_fallback(merged, o.instruction, b, cfg.prompts);
    return roi::Extraction{roi::extract_instruction_roi(merged, o.instruction, b, cfg.prompts), false};
  });
  write_file(dir / "extraction.json", json{{"phrase", x.phrase}, {"fallback", x.fallback}}.dump(2));
  out << x.phrase << "\n";
  return 0;
}

int cmd_lift(const Options& o, std::ostream& out) {
  const json doc = config_doc(o.common);
  const auto cfg = pipeline_config(o.common, doc);
  Scene scene = load_scene(o.common);
  const auto cams = load_cams(o.common);
  const auto b = backends(o.common, doc);
  const auto dir = out_dir(o.common);

  std::string phrase = o.phrase;
  if (phrase.empty()) {
    const auto d = describe(o, scene, cams, b, cfg);
    phrase = in_stage("extract", [&] { return roi::extract_or_fallback(d.merged, o.instruction, b, cfg.prompts).phrase; });
  }
  const auto masks = in_stage("masks", [&] {
    return roi::acquire_masks(scene, cams, phrase, b, o.views ? o.views : cfg.mask_views, cfg.seed);
  });
  optim::LiftConfig lift = cfg.lift;
  lift.threshold = o.tau > 0 ? o.tau : cfg.tau;
  if (o.iterations >= 0) lift.iterations = o.iterations;
  roi::LiftReport report;
  const auto r = in_stage("lift", [&] { return roi::lift_roi(scene, cams, masks, lift, &report); });

  fs::create_directories(dir / "masks");
  for (const auto& m : masks) write_png(dir / "masks" / ("view" + std::to_string(m.view) + ".png"), m.mask);
  write_file(dir / "lifted.ply", export_ply(scene));
  json j = r.to_json();
  j["phrase"] = phrase;
  j["lift_loss"] = report.loss;
  write_file(dir / "roi.json", j.dump(2));
  out << phrase << ": " << r.count() << " of " << r.size() << " gaussians\n";
  return 0;
}

int cmd_edit(const Options& o, std::ostream& out) {
  const json doc = config_doc(o.common);
  auto cfg = pipeline_config(o.common, doc);
  const Scene scene = load_scene(o.common);
  const auto cams = load_cams(o.common);
  const auto b = backends(o.common, doc);
  const auto dir = out_dir(o.common);

  const auto r = in_stage("roi", [&] {
    auto trained = roi::GaussianRoi::from_scene(scene, o.tau > 0 ? o.tau : cfg.tau);
    const auto mods = o.mods.empty() ? roi::RoiModification{} : roi::RoiModification::from_json(read_json_file(o.mods));
    return roi::combine_roi(trained, mods, scene);
  });
  if (o.rounds >= 0) cfg.edit.max_rounds = o.rounds;
  auto session = in_stage("edit", [&] {
    cfg.edit.validate();
    return std::make_unique<edit::EditSession>(scene, cams, r, o.instruction, cfg.edit);
  });
  const Scene edited = in_stage("edit", [&] { return edit::run_session(*session, b); });

  write_file(dir / "edited.ply", export_ply(edited));
  json hist = json::array();
  for (const auto& d : session->history()) hist.push_back(d.to_json());
  write_file(dir / "history.json", json{{"roi", r.to_json()}, {"rounds", hist}}.dump(2));
  out << session->round() << " rounds, " << r.count() << " gaussians in RoI\n";
  return 0;
}

int cmd_pipeline(const Options& o, std::ostream& out) {
  const json doc = config_doc(o.common);
  auto cfg = pipeline_config(o.common, doc);
  if (o.rounds >= 0) cfg.edit.max_rounds = o.rounds;
  if (o.tau > 0) cfg.tau = o.tau;
  in_stage("config", [&] { cfg.validate(); });
  const Scene scene = load_scene(o.common);
  const auto cams = load_cams(o.common);
  const auto b = backends(o.common, doc);
  const auto dir = out_dir(o.common);
  const auto mods = o.mods.empty() ? roi::RoiModification{}
                                   : in_stage("input", [&] { return roi::RoiModification::from_json(read_json_file(o.mods)); });

  const auto r = edit::run_pipeline(scene, cams, o.instruction, mods, b, cfg);
  write_file(dir / "edited.ply", export_ply(r.edited));
  json report = r.report();
  report["instruction"] = o.instruction;
  report["config"] = cfg.to_json();
  write_file(dir / "report.json", report.dump(2));
  out << (dir / "edited.ply").string() << "\n" << (dir / "report.json").string() << "\n";
  return 0;
}

int cmd_serve(const Options& o, std::ostream& out) {
  const json doc = config_doc(o.common);
  service::ServiceConfig sc;
  sc.host = o.host;
  sc.port = o.port;
  sc.data_dir = o.data_dir;
  sc.pipeline = pipeline_config(o.common, doc);
  const auto b = backends(o.common, doc);

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  service::Service svc(sc, b);
  const int port = in_stage("serve", [&] { return svc.start(); });
  out << "listening on http://" << sc.host << ":" << port << std::endl;
  int sig = 0;
  sigwait(&signals, &sig);
  out << "shutting down" << std::endl;
  svc.stop();
  return 0;
}

int cmd_synth(const Options& o, std::ostream& out) {
  synthetic::TwoClusterOptions opts;
  opts.per_cluster = o.per_cluster;
  opts.views = o.synth_views;
  opts.image_size = o.image_size;
  if (o.common.seed) opts.seed = *o.common.seed;
  in_stage("synth", [&] {
    if (opts.per_cluster < 1 || opts.views < 1 || opts.image_size < 16) {
      throw InvalidParameter("need >= 1 gaussian per cluster, >= 1 view and images of at least 16 px");
    }
    synthetic::write_fixture_dir(synthetic::make_two_cluster(opts), o.common.out);
  });
  out << o.common.out << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Instruction-driven editing of 3D Gaussian scenes", "gsedit"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  Options o;
  auto& c = o.common;

  auto* render = app.add_subcommand("render", "Render one view to <out>/view<N>.png");
  add_common(render, c, false);
  render->add_option("--view", o.view, "Camera index")->required();
  render->add_option("--channel", o.channel, "color, roi or overlay")->check(CLI::IsMember({"color", "roi", "overlay"}));

  auto* describe = app.add_subcommand("describe", "Caption sampled views and merge into <out>/description.json");
  add_common(describe, c, true);
  describe->add_option("--views", o.views, "Number of views to caption");

  auto* extract = app.add_subcommand("extract-roi", "Extract the instruction RoI phrase to <out>/extraction.json");
  add_common(extract, c, true);
  extract->add_option("--instruction", o.instruction, "Edit instruction")->required();
  extract->add_option("--description", o.description, "description.json from a previous describe run");
  extract->add_option("--views", o.views, "Number of views to caption");

  auto* lift = app.add_subcommand("lift", "Segment views and lift the RoI into <out>/lifted.ply and roi.json");
  add_common(lift, c, true);
  auto* phrase = lift->add_option("--phrase", o.phrase, "Text RoI to segment");
  lift->add_option("--instruction", o.instruction, "Edit instruction (the phrase is extracted from it)")
      ->excludes(phrase);
  lift->add_option("--views", o.views, "Number of mask views");
  lift->add_option("--iterations", o.iterations, "Lifting iterations");
  lift->add_option("--tau", o.tau, "Membership threshold");

  auto* edit = app.add_subcommand("edit", "Edit a lifted scene into <out>/edited.ply and history.json");
  add_common(edit, c, true);
  edit->add_option("--instruction", o.instruction, "Edit instruction")->required();
  edit->add_option("--rounds", o.rounds, "Maximum edit rounds");
  edit->add_option("--tau", o.tau, "Membership threshold on the stored RoI attribute");
  edit->add_option("--mods", o.mods, "RoI modification JSON {add, del, box}");

  auto* pipeline = app.add_subcommand("pipeline", "Run every stage; writes <out>/edited.ply and report.json");
  add_common(pipeline, c, true);
  pipeline->add_option("--instruction", o.instruction, "Edit instruction")->required();
  pipeline->add_option("--rounds", o.rounds, "Maximum edit rounds");
  pipeline->add_option("--tau", o.tau, "Membership threshold");
  pipeline->add_option("--mods", o.mods, "RoI modification JSON {add, del, box}");

  auto* serve = app.add_subcommand("serve", "Run the HTTP service");
  serve->add_option("--config", c.config, "JSON config with optional \"backends\" and \"pipeline\" objects");
  auto* serve_mock = serve->add_option("--mock", c.mock, "Use mock backends from this fixture directory");
  serve->add_option("--endpoint", c.endpoint, "Use HTTP backends at this base URL")->excludes(serve_mock);
  serve->add_option("--host", o.host, "Bind address")->capture_default_str();
  serve->add_option("--port", o.port, "Port (0 picks a free one)")->capture_default_str();
  serve->add_option("--data-dir", o.data_dir, "Scene and session storage")->capture_default_str();
  serve->add_option("--seed", c.seed, "Override the pipeline and edit seeds");

  auto* synth = app.add_subcommand("synth", "Write the synthetic two-cluster scene and mock fixtures");
  synth->add_option("--out", c.out, "Output directory")->required();
  synth->add_option("--per-cluster", o.per_cluster, "Gaussians per cluster")->capture_default_str();
  synth->add_option("--views", o.synth_views, "Number of cameras")->capture_default_str();
  synth->add_option("--size", o.image_size, "Image width and height")->capture_default_str();
  synth->add_option("--seed", c.seed, "Random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }

  try {
    if (render->parsed()) return cmd_render(o, out);
    if (describe->parsed()) return cmd_describe(o, out);
    if (extract->parsed()) return cmd_extract(o, out);
    if (lift->parsed()) {
      if (o.phrase.empty() && o.instruction.empty()) {
        err << "lift: one of --phrase or --instruction is required\n" << lift->help();
        return 2;
      }
      return cmd_lift(o, out);
    }
    if (edit->parsed()) return cmd_edit(o, out);
    if (pipeline->parsed()) return cmd_pipeline(o, out);
    if (serve->parsed()) return cmd_serve(o, out);
    if (synth->parsed()) return cmd_synth(o, out);
  } catch (const StageError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace gsedit::cli
