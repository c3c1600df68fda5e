#include <algorithm>
#include <random>
#include <set>

#include "doctest.h"
#include "gsedit/clients/mock.hpp"
#include "gsedit/raster/rasterizer.hpp"
#include "gsedit/roi/roi.hpp"
#include "gsedit/synthetic/two_cluster.hpp"
#include "test_support.hpp"

using namespace gsedit;
using namespace gsedit::roi;
using gsedit::testing::TempDir;

namespace {

double iou(const std::vector<bool>& a, const std::vector<bool>& b) {
  int inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] && b[i];
    uni += a[i] || b[i];
  }
  return uni == 0 ? 1.0 : double(inter) / uni;
}

GaussianRoi roi_of(std::size_t n, std::initializer_list<std::size_t> members) {
  GaussianRoi r;
  r.membership.assign(n, false);
  r.soft = Eigen::VectorXd::Zero(Eigen::Index(n));
  for (auto i : members) r.membership[i] = true;
  return r;
}

Scene line_scene(std::size_t n) {
  Scene s;
  for (std::size_t i = 0; i < n; ++i) {
    Gaussian<double> g;
    g.position = Vec3<double>(double(i), 0, 0);
    s.gaussians.push_back(g);
  }
  return s;
}

std::vector<ViewMask> truth_masks(const synthetic::TwoClusterScene& d, const std::vector<std::size_t>& views) {
  std::vector<ViewMask> out;
  for (auto v : views) out.push_back({v, synthetic::membership_mask(d.scene, d.cameras[v], d.red)});
  return out;
}

/// Mock backends with the synthetic fixture plus a few extra chat rules.
struct Fixture {
  TempDir dir;
  synthetic::TwoClusterScene data = synthetic::make_two_cluster();
  clients::ModelBackends backends;
  Fixture() {
    synthetic::write_fixture_dir(data, dir.path());
    auto doc = nlohmann::json::parse(read_file_text(dir.path() / "fixtures.json"));
    doc["chat"].push_back({{"user_contains", "Edit Instruction: make the hat blue"}, {"reply", "hat"}});
    doc["chat"].push_back({{"user_contains", "Edit Instruction: do something"}, {"reply", "   "}});
    write_file(dir.path() / "fixtures.json", doc.dump());
    backends = clients::make_mock_backends(dir.path());
  }
  static std::string read_file_text(const std::filesystem::path& p) {
    const auto bytes = read_file(p);
    return std::string(bytes.begin(), bytes.end());
  }
};

}  // namespace

TEST_CASE("stratified_views: one index per stratum, deterministic") {
  const auto v = stratified_views(12, 4, 9);
  REQUIRE(v.size() == 4);
  for (std::size_t s = 0; s < 4; ++s) {
    CHECK(v[s] >= s * 3);
    CHECK(v[s] < (s + 1) * 3);
  }
  CHECK(v == stratified_views(12, 4, 9));
  CHECK(stratified_views(5, 5, 1) == std::vector<std::size_t>{0, 1, 2, 3, 4});
  CHECK_THROWS_AS(stratified_views(3, 4, 0), PreconditionError);
}

TEST_CASE("combine_roi: set algebra examples") {
  const Scene s = line_scene(6);
  const auto trained = roi_of(6, {1, 2});
  CHECK(combine_roi(trained, {}, s).membership == trained.membership);

  RoiModification m;
  m.add = {3};
  m.del = {2};
  CHECK(combine_roi(trained, m, s).indices() == std::vector<std::size_t>{1, 3});

  RoiModification boxed;
  boxed.box = Box3<double>{Vec3<double>(1.5, -1, -1), Vec3<double>(3.5, 1, 1)};
  CHECK(combine_roi(roi_of(6, {1, 2, 3}), boxed, s).indices() == std::vector<std::size_t>{2, 3});

  // Deletion wins over addition for the same index.
  RoiModification both;
  both.add = {4};
  both.del = {4};
  CHECK(combine_roi(trained, both, s).indices() == std::vector<std::size_t>{1, 2});

  // Centers on the box boundary are outside.
  RoiModification edge;
  edge.box = Box3<double>{Vec3<double>(1, -1, -1), Vec3<double>(2, 1, 1)};
  CHECK(combine_roi(trained, edge, s).count() == 0);

  RoiModification bad;
  bad.add = {6};
  CHECK_THROWS_AS(combine_roi(trained, bad, s), ContractError);
}

TEST_CASE("combine_roi: 1000 random instances match a per-index oracle") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::bernoulli_distribution coin(0.3);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(0, 40)(rng);
    Scene s;
    for (std::size_t i = 0; i < n; ++i) {
      Gaussian<double> g;
      g.position = Vec3<double>(u(rng), u(rng), u(rng));
      s.gaussians.push_back(g);
    }
    GaussianRoi trained;
    trained.soft = Eigen::VectorXd::Zero(Eigen::Index(n));
    std::set<std::size_t> add, del;
    for (std::size_t i = 0; i < n; ++i) {
      trained.membership.push_back(coin(rng));
      if (coin(rng)) add.insert(i);
      if (coin(rng)) del.insert(i);
    }
    RoiModification m;
    m.add.assign(add.begin(), add.end());
    m.del.assign(del.begin(), del.end());
    std::shuffle(m.add.begin(), m.add.end(), rng);
    if (coin(rng)) {
      Vec3<double> a(u(rng), u(rng), u(rng)), b(u(rng), u(rng), u(rng));
      m.box = Box3<double>{a.cwiseMin(b), a.cwiseMax(b)};
    }
    const auto got = combine_roi(trained, m, s);
    for (std::size_t i = 0; i < n; ++i) {
      const bool in_box = !m.box || ((s.gaussians[i].position.array() > m.box->min_corner.array()).all() &&
                                     (s.gaussians[i].position.array() < m.box->max_corner.array()).all());
      const bool expected = (trained.membership[i] || add.count(i)) && !del.count(i) && in_box;
      REQUIRE(got.membership[i] == expected);
    }
  }
}

TEST_CASE("RoiModification: JSON round trip and validation") {
  const auto m = RoiModification::from_json(nlohmann::json::parse(
      R"({"add":[1,5],"del":[2],"box":{"min":[-1,-2,-3],"max":[1,2,3]}})"));
  CHECK(m.add == std::vector<std::size_t>{1, 5});
  CHECK(m.del == std::vector<std::size_t>{2});
  REQUIRE(m.box);
  CHECK(m.box->max_corner == Vec3<double>(1, 2, 3));
  const auto back = RoiModification::from_json(m.to_json());
  CHECK(back.add == m.add);
  CHECK(back.box->min_corner == m.box->min_corner);
  CHECK(RoiModification::from_json(nlohmann::json::object()).empty());
  CHECK_THROWS_AS(RoiModification::from_json({{"add", {-1}}}), ValidationError);
  CHECK_THROWS_AS(RoiModification::from_json(nlohmann::json::parse(R"({"box":{"min":[1,1,1],"max":[0,0,0]}})")),
                  ValidationError);
}

TEST_CASE("generate_description: view selection, merge call, errors") {
  Fixture f;
  const clients::PromptSet prompts;
  const auto d = generate_description(f.data.scene, f.data.cameras, 1, f.backends, prompts);
  REQUIRE(d.per_view_captions.size() == 1);
  CHECK(d.merged.find("red cluster") != std::string::npos);
  CHECK(d.merged.find("green cluster") != std::string::npos);
  CHECK(f.backends.assistant->calls() == 1);

  const auto six = generate_description(f.data.scene, f.data.cameras, 6, f.backends, prompts, 3);
  CHECK(six.per_view_captions.size() == 6);
  CHECK(f.backends.captioner->calls() == 7);
  CHECK_THROWS_AS(generate_description(f.data.scene, f.data.cameras, 13, f.backends, prompts), PreconditionError);
  CHECK_THROWS_AS(generate_description(f.data.scene, f.data.cameras, 0, f.backends, prompts), PreconditionError);

  // A captioner without a fallback fails on the first view and names it.
  TempDir empty;
  write_file(empty.path() / "fixtures.json", std::string_view("{}"));
  const auto bare = clients::make_mock_backends(empty.path());
  CHECK_THROWS_WITH_AS(generate_description(f.data.scene, f.data.cameras, 2, bare, prompts),
                       doctest::Contains("view 0"), BackendError);
}

TEST_CASE("extract_instruction_roi: answers, trimming, fallback") {
  Fixture f;
  const clients::PromptSet prompts;
  const std::string desc = "The scene shows a red cluster next to a green cluster.";
  CHECK(extract_instruction_roi(desc, "Turn the red cluster blue", f.backends, prompts) == "red cluster");
  CHECK(extract_instruction_roi("", "make the hat blue", f.backends, prompts) == "hat");
  CHECK_THROWS_AS(extract_instruction_roi(desc, "do something", f.backends, prompts), ExtractionFailed);
  CHECK_THROWS_AS(extract_instruction_roi(desc, "  ", f.backends, prompts), PreconditionError);

  const auto fb = extract_or_fallback(desc, "do something", f.backends, prompts);
  CHECK(fb.fallback);
  CHECK(fb.phrase == "do something");
  CHECK_FALSE(extract_or_fallback(desc, "Turn the red cluster blue", f.backends, prompts).fallback);
}

TEST_CASE("acquire_masks: ground-truth projections from the mock segmenter") {
  Fixture f;
  const auto masks = acquire_masks(f.data.scene, f.data.cameras, "red cluster", f.backends, 4, 5);
  REQUIRE(masks.size() == 4);
  for (const auto& m : masks) {
    const Image truth = synthetic::membership_mask(f.data.scene, f.data.cameras[m.view], f.data.red);
    CHECK((m.mask.data == truth.data).all());
    CHECK(m.mask.data.sum() > 0);
  }
  const auto unknown = acquire_masks(f.data.scene, f.data.cameras, "blue teapot", f.backends, 3);
  CHECK(unknown.size() == 3);
  for (const auto& m : unknown) CHECK(m.mask.data.isZero(0));
  CHECK(acquire_masks(f.data.scene, f.data.cameras, "red cluster", f.backends, 50).size() == 12);
  CHECK_THROWS_AS(acquire_masks(f.data.scene, f.data.cameras, "red cluster", f.backends, 0), PreconditionError);
}

TEST_CASE("lift_roi: recovers the red cluster and freezes everything else") {
  const auto d = synthetic::make_two_cluster();
  Scene s = d.scene;
  optim::LiftConfig cfg;
  LiftReport report;
  const auto r = lift_roi(s, d.cameras, truth_masks(d, stratified_views(12, 6, 0)), cfg, &report);
  CHECK(iou(r.membership, d.red) >= 0.95);
  CHECK(report.loss.size() == 300);
  CHECK(report.loss.back() < report.loss.front());
  for (std::size_t i = 0; i < s.size(); ++i) {
    Gaussian<double> a = s.gaussians[i], b = d.scene.gaussians[i];
    a.roi_logit = b.roi_logit = 0;
    REQUIRE(a == b);
    CHECK(r.soft(Eigen::Index(i)) == s.gaussians[i].roi());
  }
}

TEST_CASE("lift_roi: all-zero masks select nothing") {
  const auto d = synthetic::make_two_cluster();
  Scene s = d.scene;
  std::vector<ViewMask> masks;
  for (std::size_t v : {0, 4, 8}) masks.push_back({v, Image(64, 64, 1)});
  optim::LiftConfig cfg;
  cfg.iterations = 50;
  CHECK(lift_roi(s, d.cameras, masks, cfg).count() == 0);
  CHECK_THROWS_AS(lift_roi(s, d.cameras, {}, cfg), PreconditionError);
  CHECK_THROWS_AS(lift_roi(s, d.cameras, {{0, Image(32, 32, 1)}}, cfg), ContractError);
}

TEST_CASE("lift_roi: a full-frame mask selects every visible Gaussian") {
  const auto d = synthetic::make_two_cluster();
  const std::size_t view = 3;
  const auto& cam = d.cameras[view];

  // Visibility oracle: peak composited weight of each Gaussian alone in the RoI channel.
  std::vector<bool> visible(d.scene.size());
  for (std::size_t i = 0; i < d.scene.size(); ++i) {
    Scene probe = d.scene;
    for (std::size_t j = 0; j < probe.size(); ++j) probe.gaussians[j].roi_logit = j == i ? 40.0 : -40.0;
    visible[i] = raster::render(probe, cam, raster::Channel::kRoi).data.maxCoeff() > 0.1;
  }
  Scene s = d.scene;
  optim::LiftConfig cfg;
  cfg.iterations = 150;
  const auto r = lift_roi(s, d.cameras, {{view, Image::constant(64, 64, 1, 1.0)}}, cfg);
  int visible_count = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!visible[i]) continue;
    ++visible_count;
    CHECK(r.membership[i]);
  }
  CHECK(visible_count > 40);
}

TEST_CASE("lift_roi: an extra correct view does not hurt") {
  const auto d = synthetic::make_two_cluster();
  optim::LiftConfig cfg;
  cfg.iterations = 120;
  std::vector<std::size_t> views = {1, 5};
  double previous = -1;
  for (std::size_t extra : {9, 3, 7}) {
    views.push_back(extra);
    Scene s = d.scene;
    const double score = iou(lift_roi(s, d.cameras, truth_masks(d, views), cfg).membership, d.red);
    CHECK(score >= previous - 0.02);
    previous = score;
  }
  CHECK(previous >= 0.9);
}
