#include <cmath>
#include <numeric>

#include "doctest.h"
#include "gsedit/clients/mock.hpp"
#include "gsedit/core/ply.hpp"
#include "gsedit/edit/pipeline.hpp"
#include "gsedit/edit/session.hpp"
#include "gsedit/raster/rasterizer.hpp"
#include "gsedit/synthetic/two_cluster.hpp"
#include "test_support.hpp"

using namespace gsedit;
using namespace gsedit::edit;
using gsedit::testing::TempDir;

namespace {

std::string read_text(const std::filesystem::path& p) {
  const auto bytes = read_file(p);
  return std::string(bytes.begin(), bytes.end());
}

struct Fixture {
  TempDir dir;
  synthetic::TwoClusterScene data;
  clients::ModelBackends backends;

  explicit Fixture(synthetic::TwoClusterOptions options = {}) : data(synthetic::make_two_cluster(options)) {
    synthetic::write_fixture_dir(data, dir.path());
    auto doc = nlohmann::json::parse(read_text(dir.path() / "fixtures.json"));
    doc["chat"].push_back({{"user_contains", "Edit Instruction: Make it fancier"}, {"reply", ""}});
    doc["edits"].push_back({{"instruction", "Make it fancier"}, {"region", "red cluster"}, {"target", {1, 1, 0}}});
    write_file(dir.path() / "fixtures.json", doc.dump());
    backends = clients::make_mock_backends(dir.path());
  }

  roi::GaussianRoi red_roi() const {
    roi::GaussianRoi r;
    r.membership = data.red;
    r.soft = Eigen::VectorXd::Zero(Eigen::Index(data.red.size()));
    return r;
  }
  roi::GaussianRoi empty_roi() const {
    roi::GaussianRoi r;
    r.membership.assign(data.red.size(), false);
    r.soft = Eigen::VectorXd::Zero(Eigen::Index(data.red.size()));
    return r;
  }
};

EditConfig fixed_rounds(int rounds, std::uint64_t seed = 3) {
  EditConfig c;
  c.max_rounds = rounds;
  c.seed = seed;
  c.early_stop = false;
  return c;
}

bool bit_identical(const Gaussian<double>& a, const Gaussian<double>& b) {
  return (a.position.array() == b.position.array()).all() && (a.log_scale.array() == b.log_scale.array()).all() &&
         (a.rotation.array() == b.rotation.array()).all() && (a.color.array() == b.color.array()).all() &&
         a.opacity_logit == b.opacity_logit && a.roi_logit == b.roi_logit;
}

bool same_except_roi(const Gaussian<double>& a, const Gaussian<double>& b) {
  Gaussian<double> c = a;
  c.roi_logit = b.roi_logit;
  return bit_identical(c, b);
}

bool scenes_identical(const Scene& a, const Scene& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!bit_identical(a.gaussians[i], b.gaussians[i])) return false;
  return true;
}

Eigen::Vector3d mean_color(const Scene& s, const std::vector<bool>& members) {
  Eigen::Vector3d sum = Eigen::Vector3d::Zero();
  int n = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (members[i]) {
      sum += s.gaussians[i].color;
      ++n;
    }
  return sum / n;
}

/// Editor that can be told to fail its next call.
class FlakyEditor : public clients::ImageEditor {
 public:
  explicit FlakyEditor(std::shared_ptr<clients::ImageEditor> inner) : inner_(std::move(inner)) {}
  bool fail_next = false;

 protected:
  Image do_edit(const Image& rendered, const Image& original, std::string_view instruction,
                double noise_level) override {
    if (fail_next) {
      fail_next = false;
      throw BackendError("editor unavailable");
    }
    return inner_->edit_image(rendered, original, instruction, noise_level);
  }

 private:
  std::shared_ptr<clients::ImageEditor> inner_;
};

}  // namespace

TEST_CASE("EditConfig: validation and JSON round-trip") {
  EditConfig c;
  CHECK_NOTHROW(c.validate());
  c.max_rounds = 0;
  CHECK_THROWS_AS(c.validate(), PreconditionError);
  c = EditConfig{};
  c.t_min = 0.7;
  c.t_max = 0.6;
  CHECK_THROWS_AS(c.validate(), InvalidParameter);
  c = EditConfig{};
  c.attributes = {Attribute::kRoi};
  CHECK_THROWS_AS(c.validate(), InvalidParameter);

  EditConfig d;
  d.beta = 0.35;
  d.seed = 99;
  d.attributes = {Attribute::kPosition, Attribute::kColor};
  d.learning_rates.color = 0.01;
  d.mask_gradients = false;
  const auto back = EditConfig::from_json(d.to_json());
  CHECK(back.to_json() == d.to_json());
  CHECK_THROWS_AS(EditConfig::from_json({{"max_rounds", 0}}), PreconditionError);
  CHECK_THROWS_AS(EditConfig::from_json({{"attributes", {"wings"}}}), ValidationError);

  CHECK(status_from_name(status_name(Status::kPaused)) == Status::kPaused);
  CHECK_THROWS_AS(status_from_name("sleeping"), ValidationError);
}

TEST_CASE("edit_step: empty RoI leaves the working scene unchanged") {
  Fixture f;
  EditConfig cfg = fixed_rounds(5);
  cfg.attributes = {Attribute::kPosition, Attribute::kLogScale, Attribute::kRotation, Attribute::kColor,
                    Attribute::kOpacity};
  EditSession s(f.data.scene, f.data.cameras, f.empty_roi(), "make red cluster (0,0,1)", cfg);
  for (int k = 0; k < 5; ++k) {
    const auto d = s.step(f.backends);
    CHECK(d.loss > 0);
    for (const auto& [a, norm] : d.grad_norms) CHECK(norm == 0.0);
  }
  CHECK(s.round() == 5);
  CHECK(scenes_identical(*s.snapshot(), f.data.scene));
}

TEST_CASE("edit_step: identity instruction gives zero loss and a zero step") {
  Fixture f;
  EditSession s(f.data.scene, f.data.cameras, f.red_roi(), "", fixed_rounds(3));
  for (int k = 0; k < 3; ++k) {
    const auto d = s.step(f.backends);
    CHECK(d.loss == 0.0);
    for (const auto& [a, norm] : d.grad_norms) CHECK(norm == 0.0);
  }
  CHECK(scenes_identical(*s.snapshot(), f.data.scene));
}

TEST_CASE("edit_step: recolor loss at a fixed camera decreases within a 5-step moving average") {
  Fixture f;
  EditSession s(f.data.scene, f.data.cameras, f.red_roi(), "make red cluster (1,0,0)", fixed_rounds(50));
  std::vector<double> loss;
  for (int k = 0; k < 50; ++k) loss.push_back(s.step_view(0, f.backends).loss);
  std::vector<double> avg;
  for (std::size_t k = 0; k + 5 <= loss.size(); ++k)
    avg.push_back(std::accumulate(loss.begin() + long(k), loss.begin() + long(k) + 5, 0.0) / 5);
  for (std::size_t k = 1; k < avg.size(); ++k) {
    CAPTURE(k);
    CHECK(avg[k] < avg[k - 1]);
  }
}

TEST_CASE("edit_step: sampled noise level lies in the configured range") {
  Fixture f;
  EditConfig cfg = fixed_rounds(20);
  cfg.t_min = 0.3;
  cfg.t_max = 0.4;
  EditSession s(f.data.scene, f.data.cameras, f.red_roi(), "Turn the red cluster blue", cfg);
  for (int k = 0; k < 20; ++k) {
    const auto d = s.step(f.backends);
    CHECK(d.noise_level >= 0.3);
    CHECK(d.noise_level <= 0.4);
    CHECK(d.view < f.data.cameras.size());
    CHECK(d.round == k + 1);
  }
  CHECK_THROWS_AS(s.step(f.backends), PreconditionError);
}

TEST_CASE("edit_step: backend failure leaves round, RNG and scene untouched") {
  Fixture f;
  auto flaky = std::make_shared<FlakyEditor>(f.backends.editor);
  auto backends = f.backends;
  backends.editor = flaky;

  EditSession a(f.data.scene, f.data.cameras, f.red_roi(), "Turn the red cluster blue", fixed_rounds(10));
  EditSession b(f.data.scene, f.data.cameras, f.red_roi(), "Turn the red cluster blue", fixed_rounds(10));
  a.step(backends);
  b.step(f.backends);
  const auto before = a.snapshot();
  flaky->fail_next = true;
  CHECK_THROWS_AS(a.step(backends), BackendError);
  CHECK(a.round() == 1);
  CHECK(a.status() == Status::kEditing);
  CHECK(a.snapshot() == before);
  REQUIRE(a.last_error());
  CHECK(a.last_error()->find("editor unavailable") != std::string::npos);

  for (int k = 0; k < 3; ++k) {
    a.step(backends);
    b.step(f.backends);
  }
  CHECK(scenes_identical(*a.snapshot(), *b.snapshot()));
  CHECK(a.history().back().view == b.history().back().view);
}

TEST_CASE("edit_step: unknown instruction surfaces FixtureMissingError") {
  Fixture f;
  EditSession s(f.data.scene, f.data.cameras, f.red_roi(), "Paint everything gold", fixed_rounds(5));
  CHECK_THROWS_AS(s.step(f.backends), FixtureMissingError);
  CHECK(s.round() == 0);
  CHECK(s.status() == Status::kEditing);
}

TEST_CASE("run_session: preconditions") {
  Fixture f;
  CHECK_THROWS_AS(EditSession(f.data.scene, f.data.cameras, f.red_roi(), "x", fixed_rounds(0)), PreconditionError);
  auto short_roi = f.red_roi();
  short_roi.membership.pop_back();
  CHECK_THROWS_AS(EditSession(f.data.scene, f.data.cameras, short_roi, "x", fixed_rounds(5)), ContractError);

  EditSession s(f.data.scene, f.data.cameras, f.red_roi(), "", fixed_rounds(5));
  s.set_status(Status::kDone);
  CHECK_THROWS_AS(run_session(s, f.backends), PreconditionError);
  CHECK_THROWS_AS(s.set_max_rounds(0), PreconditionError);
}

TEST_CASE("run_session: background bit-identical, editor calls equal rounds, recolor reaches target") {
  Fixture f;
  EditConfig cfg = fixed_rounds(100);
  cfg.attributes = {Attribute::kPosition, Attribute::kLogScale, Attribute::kRotation, Attribute::kColor,
                    Attribute::kOpacity};
  EditSession s(f.data.scene, f.data.cameras, f.red_roi(), "Turn the red cluster blue", cfg);
  const long calls_before = f.backends.editor->calls();
  const Scene edited = run_session(s, f.backends);
  CHECK(s.status() == Status::kDone);
  CHECK(s.round() == 100);
  CHECK(f.backends.editor->calls() - calls_before == 100);
  CHECK(s.history().size() == 100);

  int changed = 0;
  for (std::size_t i = 0; i < edited.size(); ++i) {
    if (f.data.red[i]) {
      changed += !bit_identical(edited.gaussians[i], f.data.scene.gaussians[i]);
    } else {
      CHECK(bit_identical(edited.gaussians[i], f.data.scene.gaussians[i]));
    }
  }
  CHECK(changed == 50);
  CHECK(scenes_identical(s.original(), f.data.scene));
}

TEST_CASE("run_session: identical seeds give bit-identical PLY, different seeds differ") {
  Fixture f;
  auto run = [&](std::uint64_t seed) {
    EditSession s(f.data.scene, f.data.cameras, f.red_roi(), "Turn the red cluster blue", fixed_rounds(25, seed));
    return export_ply(run_session(s, f.backends));
  };
  const auto a = run(11), b = run(11), c = run(12);
  CHECK(a == b);
  CHECK(a != c);
}

TEST_CASE("run_session: pause, checkpoint and resume reproduce the uninterrupted run") {
  Fixture f;
  const std::string instr = "Turn the red cluster blue";
  EditSession full(f.data.scene, f.data.cameras, f.red_roi(), instr, fixed_rounds(30));
  const Scene reference = run_session(full, f.backends);

  SUBCASE("in memory") {
    EditSession s(f.data.scene, f.data.cameras, f.red_roi(), instr, fixed_rounds(30));
    for (int k = 0; k < 12; ++k) s.step(f.backends);
    s.request_pause();
    run_session(s, f.backends);
    CHECK(s.status() == Status::kPaused);
    CHECK(s.round() == 12);
    CHECK_FALSE(s.pause_requested());
    const Scene resumed = run_session(s, f.backends);
    CHECK(s.status() == Status::kDone);
    CHECK(s.round() == 30);
    CHECK(scenes_identical(resumed, reference));
  }
  SUBCASE("through a checkpoint") {
    TempDir ckpt;
    {
      EditSession s(f.data.scene, f.data.cameras, f.red_roi(), instr, fixed_rounds(30));
      for (int k = 0; k < 17; ++k) s.step(f.backends);
      s.request_pause();
      run_session(s, f.backends);
      s.save_checkpoint(ckpt.path());
    }
    auto s = EditSession::load_checkpoint(ckpt.path());
    CHECK(s->round() == 17);
    CHECK(s->status() == Status::kPaused);
    CHECK(s->instruction() == instr);
    CHECK(s->roi() == f.red_roi());
    CHECK(s->history().size() == 17);
    CHECK(scenes_identical(s->original(), f.data.scene));
    const Scene resumed = run_session(*s, f.backends);
    CHECK(s->round() == 30);
    CHECK(scenes_identical(resumed, reference));
    const auto h = s->history(), ref = full.history();
    REQUIRE(h.size() == ref.size());
    for (std::size_t k = 0; k < h.size(); ++k) {
      CHECK(h[k].view == ref[k].view);
      CHECK(h[k].loss == ref[k].loss);
    }
  }
}

TEST_CASE("run_session: early stop ends a converged run before max_rounds") {
  Fixture f;
  EditConfig cfg;
  cfg.max_rounds = 200;
  EditSession s(f.data.scene, f.data.cameras, f.red_roi(), "", cfg);
  run_session(s, f.backends);
  CHECK(s.status() == Status::kDone);
  CHECK(s.round() == 2 * cfg.early_stop_window);
}

TEST_CASE("run_session: with beta = 0 an isolated RoI Gaussian converges toward the target") {
  synthetic::TwoClusterOptions opts;
  opts.per_cluster = 1;
  Fixture f(opts);
  EditConfig cfg = fixed_rounds(80);
  cfg.beta = 0;
  EditSession s(f.data.scene, f.data.cameras, f.red_roi(), "make red cluster (0,0,1)", cfg);
  const Eigen::Vector3d blue(0, 0, 1);
  std::vector<double> dist;
  for (int k = 0; k < 80; ++k) {
    s.step(f.backends);
    dist.push_back((s.snapshot()->gaussians[0].color - blue).norm());
  }
  for (std::size_t k = 10; k < dist.size(); ++k) {
    CAPTURE(k);
    if (dist[k - 1] > 0) {
      CHECK(dist[k] < dist[k - 1]);
    } else {
      CHECK(dist[k] == 0.0);
    }
  }
  CHECK(dist.back() < 0.5 * (f.data.scene.gaussians[0].color - blue).norm());
  CHECK(bit_identical(s.snapshot()->gaussians[1], f.data.scene.gaussians[1]));
}

TEST_CASE("pipeline: red cluster turns blue and everything else is untouched") {
  Fixture f;
  PipelineConfig cfg;
  cfg.edit = fixed_rounds(100);
  const auto r = run_pipeline(f.data.scene, f.data.cameras, "Turn the red cluster blue", {}, f.backends, cfg);
  CHECK(r.extraction.phrase == "red cluster");
  CHECK_FALSE(r.extraction.fallback);
  CHECK(r.description.per_view_captions.size() == 6);
  CHECK(r.masks.size() == 8);
  CHECK(r.roi.membership == f.data.red);
  CHECK((mean_color(r.edited, f.data.red) - Eigen::Vector3d(0, 0, 1)).norm() < 0.1);
  CHECK(r.history.size() == 100);
  for (std::size_t i = 0; i < r.edited.size(); ++i)
    if (!f.data.red[i]) CHECK(same_except_roi(r.edited.gaussians[i], f.data.scene.gaussians[i]));
  const auto report = r.report();
  CHECK(report["instruction_roi"]["phrase"] == "red cluster");
  for (const char* stage : {"describe", "extract", "masks", "lift", "roi", "edit"})
    CHECK(report["stage_seconds"].contains(stage));
}

TEST_CASE("pipeline: extraction fallback segments with the whole instruction") {
  Fixture f;
  PipelineConfig cfg;
  cfg.edit = fixed_rounds(10);
  cfg.lift.iterations = 20;
  const auto r = run_pipeline(f.data.scene, f.data.cameras, "Make it fancier", {}, f.backends, cfg);
  CHECK(r.extraction.fallback);
  CHECK(r.extraction.phrase == "Make it fancier");
  CHECK(r.roi.count() == 0);
  for (std::size_t i = 0; i < r.edited.size(); ++i)
    CHECK(same_except_roi(r.edited.gaussians[i], f.data.scene.gaussians[i]));

  cfg.fallback_on_extraction_failure = false;
  try {
    run_pipeline(f.data.scene, f.data.cameras, "Make it fancier", {}, f.backends, cfg);
    FAIL("expected a StageError");
  } catch (const StageError& e) {
    CHECK(e.stage() == "extract");
  }
}

TEST_CASE("pipeline: user modifications apply before editing; stage errors are tagged") {
  Fixture f;
  PipelineConfig cfg;
  cfg.edit = fixed_rounds(5);
  cfg.lift.iterations = 150;
  roi::RoiModification mods;
  mods.del = {0, 1, 2};
  mods.add = {60};
  const auto r = run_pipeline(f.data.scene, f.data.cameras, "Turn the red cluster blue", mods, f.backends, cfg);
  CHECK_FALSE(r.roi.membership[0]);
  CHECK(r.roi.membership[60]);
  CHECK(same_except_roi(r.edited.gaussians[1], f.data.scene.gaussians[1]));

  mods.add = {1000};
  try {
    run_pipeline(f.data.scene, f.data.cameras, "Turn the red cluster blue", mods, f.backends, cfg);
    FAIL("expected a StageError");
  } catch (const StageError& e) {
    CHECK(e.stage() == "roi");
  }
}

TEST_CASE("pipeline: empty scene is a no-op") {
  Fixture f;
  const auto r = run_pipeline(Scene{}, f.data.cameras, "Turn the red cluster blue", {}, f.backends, {});
  CHECK(r.edited.empty());
  CHECK(r.history.empty());
}
