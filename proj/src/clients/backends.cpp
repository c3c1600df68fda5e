#include "gsedit/clients/backends.hpp"

#include <algorithm>
#include <cmath>

#include "gsedit/clients/http.hpp"
#include "gsedit/clients/mock.hpp"

namespace gsedit::clients {

namespace {

std::size_t count_occurrences(std::string_view text, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string_view::npos; pos = text.find(needle, pos + needle.size())) ++n;
  return n;
}

std::string trimmed(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

void PromptSet::validate() const {
  if (caption_prompt.empty()) throw InvalidParameter("prompts: caption prompt is empty");
  if (merge_prompt.empty()) throw InvalidParameter("prompts: merge prompt is empty");
  if (extract_prompt.empty()) throw InvalidParameter("prompts: extract prompt is empty");
  if (count_occurrences(template_text, kDescriptionSlot) != 1 ||
      count_occurrences(template_text, kInstructionSlot) != 1) {
    throw InvalidParameter("prompts: template must contain {description} and {instruction} exactly once each");
  }
}

std::string PromptSet::fill_template(std::string_view description, std::string_view instruction) const {
  validate();
  const std::string_view t = template_text;
  auto d = t.find(kDescriptionSlot), i = t.find(kInstructionSlot);
  std::string out;
  auto emit = [&](std::size_t from, std::size_t at, std::string_view slot, std::string_view value) {
    out.append(t.substr(from, at - from));
    out.append(value);
    return at + slot.size();
  };
  std::size_t cursor = 0;
  if (d < i) {
    cursor = emit(cursor, d, kDescriptionSlot, description);
    cursor = emit(cursor, i, kInstructionSlot, instruction);
  } else {
    cursor = emit(cursor, i, kInstructionSlot, instruction);
    cursor = emit(cursor, d, kDescriptionSlot, description);
  }
  out.append(t.substr(cursor));
  return out;
}

PromptSet PromptSet::from_json(const nlohmann::json& j) {
  PromptSet p;
  try {
    if (j.contains("caption_prompt")) p.caption_prompt = j["caption_prompt"].get<std::string>();
    if (j.contains("merge_prompt")) p.merge_prompt = j["merge_prompt"].get<std::string>();
    if (j.contains("extract_prompt")) p.extract_prompt = j["extract_prompt"].get<std::string>();
    if (j.contains("template")) p.template_text = j["template"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("prompts: ") + e.what());
  }
  p.validate();
  return p;
}

nlohmann::json PromptSet::to_json() const {
  return {{"caption_prompt", caption_prompt},
          {"merge_prompt", merge_prompt},
          {"extract_prompt", extract_prompt},
          {"template", template_text}};
}

void BackendConfig::validate() const {
  if (!(timeout_seconds > 0) || !std::isfinite(timeout_seconds)) {
    throw InvalidParameter("backend: timeout must be positive");
  }
  if (retries < 0) throw InvalidParameter("backend: retries must be >= 0");
  if (mode == BackendMode::kHttp && endpoint.rfind("http://", 0) != 0) {
    throw InvalidParameter("backend: endpoint must start with http:// (got '" + endpoint + "')");
  }
  if (mode == BackendMode::kMock && fixture_path.empty()) throw InvalidParameter("backend: mock mode needs a fixture path");
  if (image_guidance && !(*image_guidance >= 1.0 && *image_guidance <= 2.0)) {
    throw InvalidParameter("backend: image guidance must lie in [1, 2]");
  }
  if (text_guidance && !(*text_guidance >= 5.0 && *text_guidance <= 15.0)) {
    throw InvalidParameter("backend: text guidance must lie in [5, 15]");
  }
}

BackendConfig BackendConfig::from_json(const nlohmann::json& j) {
  BackendConfig c;
  try {
    if (j.contains("mode")) {
      const auto m = j["mode"].get<std::string>();
      if (m == "http") {
        c.mode = BackendMode::kHttp;
      } else if (m == "mock") {
        c.mode = BackendMode::kMock;
      } else {
        throw ValidationError("backend: mode must be 'http' or 'mock'");
      }
    }
    if (j.contains("endpoint")) c.endpoint = j["endpoint"].get<std::string>();
    if (j.contains("timeout_seconds")) c.timeout_seconds = j["timeout_seconds"].get<double>();
    if (j.contains("retries")) c.retries = j["retries"].get<int>();
    if (j.contains("fixtures")) c.fixture_path = j["fixtures"].get<std::string>();
    for (auto [key, slot] : {std::pair{"image_guidance", &c.image_guidance}, {"text_guidance", &c.text_guidance}}) {
      if (!j.contains(key)) continue;
      *slot = j[key].is_null() ? std::nullopt : std::optional<double>(j[key].get<double>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("backend: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json BackendConfig::to_json() const {
  nlohmann::json j;
  j["mode"] = mode == BackendMode::kHttp ? "http" : "mock";
  j["endpoint"] = endpoint;
  j["timeout_seconds"] = timeout_seconds;
  j["retries"] = retries;
  j["fixtures"] = fixture_path.string();
  j["image_guidance"] = image_guidance ? nlohmann::json(*image_guidance) : nlohmann::json(nullptr);
  j["text_guidance"] = text_guidance ? nlohmann::json(*text_guidance) : nlohmann::json(nullptr);
  return j;
}

void require_valid_image(const Image& image, const char* where) {
  if (image.empty()) throw ContractError(std::string(where) + ": empty image");
  if (image.channels != 1 && image.channels != 3) throw ContractError(std::string(where) + ": image must have 1 or 3 channels");
  if (image.data.size() != image.pixel_count() * image.channels) throw ContractError(std::string(where) + ": image data length mismatch");
  if (!image.data.allFinite()) throw ContractError(std::string(where) + ": image has non-finite samples");
}

namespace {

Image enforce_output(Image out, int width, int height, int channels, const char* where) {
  if (out.width != width || out.height != height || out.channels != channels) {
    throw BackendError(std::string(where) + ": backend returned " + std::to_string(out.width) + "x" +
                       std::to_string(out.height) + "x" + std::to_string(out.channels) + ", expected " +
                       std::to_string(width) + "x" + std::to_string(height) + "x" + std::to_string(channels));
  }
  if (!out.data.allFinite()) throw BackendError(std::string(where) + ": backend returned non-finite samples");
  out.data = out.data.max(0.0).min(1.0);
  return out;
}

}  // namespace

std::string Captioner::caption(const Image& image, std::string_view prompt) {
  require_valid_image(image, "caption");
  std::string text = trimmed(do_caption(image, prompt));
  if (text.empty()) throw BackendError("caption: backend returned an empty caption");
  ++calls_;
  return text;
}

std::string ChatAssistant::chat(std::string_view system_prompt, std::string_view user_message) {
  if (user_message.empty()) throw ContractError("chat: empty user message");
  std::string reply = do_chat(system_prompt, user_message);
  ++calls_;
  return reply;
}

Image GroundingSegmenter::segment(const Image& image, std::string_view phrase) {
  require_valid_image(image, "segment");
  if (trimmed(phrase).empty()) throw ContractError("segment: empty phrase");
  Image mask = enforce_output(do_segment(image, phrase), image.width, image.height, 1, "segment");
  ++calls_;
  return mask;
}

Image ImageEditor::edit_image(const Image& rendered, const Image& original, std::string_view instruction,
                              double noise_level) {
  require_valid_image(rendered, "edit");
  require_valid_image(original, "edit");
  require_same_shape(rendered, original, "edit");
  if (!(noise_level >= 0.0 && noise_level <= 1.0)) throw InvalidParameter("edit: noise level must lie in [0, 1]");
  Image out = enforce_output(do_edit(rendered, original, instruction, noise_level), rendered.width,
                             rendered.height, rendered.channels, "edit");
  ++calls_;
  return out;
}

ModelBackends make_backends(const BackendConfig& config) {
  config.validate();
  if (config.mode == BackendMode::kHttp) return make_http_backends(config);
  return make_mock_backends(config.fixture_path);
}

}  // namespace gsedit::clients
