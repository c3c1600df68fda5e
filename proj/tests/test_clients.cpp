#include <atomic>
#include <random>
#include <thread>

#include "doctest.h"
#include "gsedit/clients/http.hpp"
#include "gsedit/clients/mock.hpp"
#include "gsedit/raster/rasterizer.hpp"
#include "gsedit/synthetic/two_cluster.hpp"
#include "test_support.hpp"

// After Eigen: <resolv.h> defines a _res macro.
#include <httplib.h>

using namespace gsedit;
using namespace gsedit::clients;
using gsedit::testing::random_image;
using gsedit::testing::TempDir;

namespace {

/// httplib server on an ephemeral port, stopped on destruction.
class TestServer {
 public:
  TestServer() {
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~TestServer() {
    server_.stop();
    thread_.join();
  }
  httplib::Server& server() { return server_; }
  BackendConfig config(int retries) const {
    BackendConfig c;
    c.mode = BackendMode::kHttp;
    c.endpoint = "http://127.0.0.1:" + std::to_string(port_);
    c.retries = retries;
    c.timeout_seconds = 5;
    return c;
  }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

Image solid(int w, int h, double r, double g, double b) {
  Image img(w, h, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      img.at(x, y, 0) = r;
      img.at(x, y, 1) = g;
      img.at(x, y, 2) = b;
    }
  return img;
}

}  // namespace

TEST_CASE("prompts: template substitution is exact and validated") {
  PromptSet p;
  CHECK(p.caption_prompt == "What is the content of the image");
  CHECK(p.fill_template("a bench.", "Turn it {instruction} orange") ==
        "Text description: a bench. Edit Instruction: Turn it {instruction} orange Answer:");
  p.template_text = "{instruction} / {description}";
  CHECK(p.fill_template("D", "I") == "I / D");
  p.template_text = "Text description: {description} Answer:";
  CHECK_THROWS_AS(p.validate(), InvalidParameter);
  p.template_text = "{description}{description}{instruction}";
  CHECK_THROWS_AS(p.validate(), InvalidParameter);
}

TEST_CASE("backend config: guidance envelope and parsing") {
  BackendConfig c;
  c.fixture_path = "x";
  c.image_guidance = 1.45;
  c.text_guidance = 12.0;
  CHECK_NOTHROW(c.validate());
  c.image_guidance = 2.5;
  CHECK_THROWS_AS(c.validate(), InvalidParameter);
  c.image_guidance = 1.2;
  c.text_guidance = 4.0;
  CHECK_THROWS_AS(c.validate(), InvalidParameter);
  c.text_guidance = std::nullopt;
  CHECK_NOTHROW(c.validate());

  const auto parsed = BackendConfig::from_json(
      {{"mode", "http"}, {"endpoint", "http://localhost:9/api"}, {"retries", 3}, {"text_guidance", 6.5}});
  CHECK(parsed.mode == BackendMode::kHttp);
  CHECK(parsed.retries == 3);
  CHECK(*parsed.text_guidance == 6.5);
  CHECK(BackendConfig::from_json(parsed.to_json()).endpoint == "http://localhost:9/api");
  CHECK_THROWS_AS(BackendConfig::from_json({{"mode", "grpc"}}), ValidationError);
  CHECK_THROWS_AS(BackendConfig::from_json({{"mode", "http"}, {"endpoint", "ftp://x"}}), InvalidParameter);
}

TEST_CASE("mock captioner and assistant: fixture lookups") {
  TempDir dir;
  const Image bench = solid(8, 6, 0.4, 0.3, 0.2), man = solid(8, 6, 0.9, 0.7, 0.6);
  write_png(dir.path() / "bench.png", bench);
  write_png(dir.path() / "man.png", man);
  nlohmann::json fx = {
      {"images", {{"bench_view_0", "bench.png"}, {"face_view_0", "man.png"}}},
      {"captions", {{"bench_view_0", "a bench next to a bicycle in a park"}}},
      {"chat",
       {{{"user_contains", "Edit Instruction: Turn the thing next to the bike orange"}, {"reply", " bench\n"}},
        {{"user_contains", {"a man", "Give him a red nose"}}, {"reply", "nose"}},
        {{"user_contains", "Turn its mouth red"}, {"reply", "mouth"}},
        {{"user_contains", "Edit Instruction: make the hat blue"}, {"reply", "hat"}},
        {{"system_sha256", sha256_hex("merge")}, {"reply", "merged"}}}},
  };
  write_file(dir.path() / "fixtures.json", fx.dump());
  const auto b = make_mock_backends(dir.path());
  const PromptSet prompts;

  CHECK(b.captioner->caption(bench, prompts.caption_prompt) == "a bench next to a bicycle in a park");
  CHECK_THROWS_AS(b.captioner->caption(man, prompts.caption_prompt), FixtureMissingError);
  CHECK_THROWS_AS(b.captioner->caption(Image(), prompts.caption_prompt), ContractError);

  auto ask = [&](const std::string& desc, const std::string& instr) {
    return b.assistant->chat(prompts.extract_prompt, prompts.fill_template(desc, instr));
  };
  CHECK(ask("a bench next to a bike in a park", "Turn the thing next to the bike orange") == " bench\n");
  CHECK(ask("a man with a beard", "Give him a red nose") == "nose");
  CHECK(ask("a bear statue", "Turn its mouth red") == "mouth");
  CHECK(ask("", "make the hat blue") == "hat");
  CHECK(b.assistant->chat("merge", "caption list") == "merged");
  CHECK_THROWS_AS(b.assistant->chat("other", "caption list"), FixtureMissingError);
  CHECK(b.assistant->calls() == 5);
}

TEST_CASE("mock segmenter and editor on the synthetic fixture") {
  TempDir dir;
  const auto data = synthetic::make_two_cluster();
  synthetic::write_fixture_dir(data, dir.path());
  const auto b = make_mock_backends(dir.path());

  const auto& cam = data.cameras[2];
  const Image view = raster::render(data.scene, cam, raster::Channel::kColor);
  const Image truth = synthetic::membership_mask(data.scene, cam, data.red);

  const Image mask = b.segmenter->segment(view, "Red Cluster ");
  CHECK(mask.same_shape(truth));
  CHECK((mask.data == truth.data).all());
  CHECK(mask.data.sum() > 20);
  const Image none = b.segmenter->segment(view, "purple teapot");
  CHECK(none.same_shape(truth));
  CHECK(none.data.isZero(0));
  CHECK_THROWS_AS(b.segmenter->segment(view, "  "), ContractError);

  // Rendered image differs from the original; the region still comes from the original view.
  std::mt19937_64 rng(3);
  const Image rendered = random_image(rng, view.width, view.height, 3);
  const Image edited = b.editor->edit_image(rendered, view, "Turn the red cluster blue", 0.1);
  const Eigen::Vector3d blue(0, 0, 1);
  double worst = 0;
  for (int y = 0; y < view.height; ++y)
    for (int x = 0; x < view.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double m = truth.at(x, y), r = rendered.at(x, y, c);
        const double expected = m * (0.8 * blue(c) + 0.2 * r) + (1 - m) * r;
        worst = std::max(worst, std::abs(edited.at(x, y, c) - expected));
      }
  CHECK(worst < 1e-15);
  CHECK((b.editor->edit_image(rendered, view, "Turn the red cluster blue", 0.9).data == edited.data).all());

  const Image literal = b.editor->edit_image(rendered, view, "make red cluster (0, 0, 1)", 0.5);
  CHECK((literal.data == edited.data).all());
  CHECK((b.editor->edit_image(rendered, view, "", 0.5).data == rendered.data).all());
  CHECK_THROWS_AS(b.editor->edit_image(rendered, view, "paint it black", 0.5), FixtureMissingError);
  CHECK_THROWS_AS(b.editor->edit_image(rendered, view, "", 1.5), InvalidParameter);
  CHECK(b.editor->calls() == 4);
}

TEST_CASE("recolor instruction parsing") {
  const auto r = parse_recolor_instruction("make  red cluster (1, 0.5,0)");
  REQUIRE(r);
  CHECK(r->region == "red cluster");
  CHECK(r->target == Eigen::Vector3d(1, 0.5, 0));
  CHECK_FALSE(parse_recolor_instruction("make it red"));
  CHECK_FALSE(parse_recolor_instruction("make x (1,2)"));
}

TEST_CASE("http captioner: 503 then success is retried") {
  TestServer srv;
  std::atomic<int> hits{0};
  nlohmann::json seen;
  srv.server().Post("/caption", [&](const httplib::Request& req, httplib::Response& res) {
    if (hits++ == 0) {
      res.status = 503;
      return;
    }
    seen = nlohmann::json::parse(req.body);
    res.set_content(nlohmann::json{{"text", "a bench next to a bicycle"}}.dump(), "application/json");
  });
  const Image img = solid(4, 4, 0.5, 0.5, 0.5);
  const auto b = make_http_backends(srv.config(1));
  CHECK(b.captioner->caption(img, "What is the content of the image") == "a bench next to a bicycle");
  CHECK(hits == 2);
  CHECK(seen["prompt"] == "What is the content of the image");
  CHECK(decode_png(base64_decode(seen["image_png_b64"].get<std::string>())) == decode_png(encode_png(img)));

  hits = 0;
  const auto no_retry = make_http_backends(srv.config(0));
  CHECK_THROWS_AS(no_retry.captioner->caption(img, "p"), BackendError);
  CHECK(hits == 1);
}

TEST_CASE("http adapters: contracts enforced on backend output") {
  TestServer srv;
  srv.server().Post("/segment", [&](const httplib::Request& req, httplib::Response& res) {
    const auto body = nlohmann::json::parse(req.body);
    const Image in = decode_png(base64_decode(body["image_png_b64"].get<std::string>()));
    const int w = body["phrase"] == "wrong size" ? in.width + 1 : in.width;
    Image mask(w, in.height, 3);
    mask.data.setConstant(1.0);
    res.set_content(nlohmann::json{{"mask_png_b64", base64_encode(encode_png(mask))}}.dump(), "application/json");
  });
  nlohmann::json edit_body;
  srv.server().Post("/edit", [&](const httplib::Request& req, httplib::Response& res) {
    edit_body = nlohmann::json::parse(req.body);
    res.set_content(nlohmann::json{{"image_png_b64", edit_body["image_png_b64"]}}.dump(), "application/json");
  });
  srv.server().Post("/chat", [&](const httplib::Request&, httplib::Response& res) {
    res.status = 400;
    res.set_content("bad request", "text/plain");
  });

  const Image img = solid(6, 5, 0.2, 0.4, 0.6);
  const auto b = make_http_backends(srv.config(2));
  const Image mask = b.segmenter->segment(img, "bench");
  CHECK(mask.channels == 1);
  CHECK(mask.width == 6);
  CHECK((mask.data == 1.0).all());
  CHECK_THROWS_AS(b.segmenter->segment(img, "wrong size"), BackendError);

  const Image out = b.editor->edit_image(img, img, "make it pop", 0.25);
  CHECK(out == decode_png(encode_png(img)));
  CHECK(edit_body["noise_level"] == 0.25);
  CHECK(edit_body["instruction"] == "make it pop");
  CHECK(edit_body["image_guidance"] == 1.5);
  CHECK(edit_body["text_guidance"] == 7.5);
  CHECK(edit_body.contains("original_png_b64"));

  CHECK_THROWS_AS(b.assistant->chat("s", "u"), BackendError);
}

TEST_CASE("http transport: unreachable endpoint fails after retries") {
  BackendConfig c;
  c.mode = BackendMode::kHttp;
  c.endpoint = "http://127.0.0.1:1";
  c.retries = 1;
  c.timeout_seconds = 1;
  const auto b = make_http_backends(c);
  CHECK_THROWS_WITH_AS(b.assistant->chat("s", "u"), doctest::Contains("2 attempt"), BackendError);
}
