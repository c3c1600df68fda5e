#include "gsedit/clients/http.hpp"

#include <chrono>
#include <thread>

#include <httplib.h>

namespace gsedit::clients {

struct HttpTransport::Impl {
  std::string origin;  // scheme://host:port
  std::string prefix;  // path prefix without trailing slash
  double timeout_seconds;
  int retries;
};

HttpTransport::HttpTransport(const BackendConfig& config) : impl_(std::make_unique<Impl>()) {
  const std::string& url = config.endpoint;
  if (url.rfind("http://", 0) != 0) throw InvalidParameter("http backend: endpoint must start with http://");
  const auto slash = url.find('/', 7);
  impl_->origin = url.substr(0, slash);
  impl_->prefix = slash == std::string::npos ? "" : url.substr(slash);
  while (!impl_->prefix.empty() && impl_->prefix.back() == '/') impl_->prefix.pop_back();
  impl_->timeout_seconds = config.timeout_seconds;
  impl_->retries = config.retries;
}

HttpTransport::~HttpTransport() = default;

nlohmann::json HttpTransport::post(const std::string& path, const nlohmann::json& body) const {
  const std::string target = impl_->prefix + path;
  const std::string payload = body.dump();
  const auto timeout = std::chrono::duration<double>(impl_->timeout_seconds);
  const auto usec = std::chrono::duration_cast<std::chrono::microseconds>(timeout);

  std::string last_error;
  for (int attempt = 0; attempt <= impl_->retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(50 * attempt));
    httplib::Client client(impl_->origin);
    client.set_connection_timeout(usec);
    client.set_read_timeout(usec);
    client.set_write_timeout(usec);
    auto res = client.Post(target, payload, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) {
      throw BackendError("POST " + target + ": HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
    }
    try {
      return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw BackendError("POST " + target + ": malformed JSON response: " + e.what());
    }
  }
  throw BackendError("POST " + target + " failed after " + std::to_string(impl_->retries + 1) +
                     " attempt(s): " + last_error);
}

namespace {

std::string field(const nlohmann::json& j, const char* key, const char* where) {
  if (!j.is_object() || !j.contains(key) || !j[key].is_string()) {
    throw BackendError(std::string(where) + ": response lacks string field '" + key + "'");
  }
  return j[key].get<std::string>();
}

std::string png_b64(const Image& image) { return base64_encode(encode_png(image)); }

Image image_field(const nlohmann::json& j, const char* key, const char* where) {
  try {
    return decode_png(base64_decode(field(j, key, where)));
  } catch (const BackendError&) {
    throw;
  } catch (const Error& e) {
    throw BackendError(std::string(where) + ": undecodable image in '" + key + "': " + e.what());
  }
}

}  // namespace

std::string HttpCaptioner::do_caption(const Image& image, std::string_view prompt) {
  return field(transport_->post("/caption", {{"image_png_b64", png_b64(image)}, {"prompt", std::string(prompt)}}),
               "text", "caption");
}

std::string HttpChatAssistant::do_chat(std::string_view system_prompt, std::string_view user_message) {
  return field(transport_->post("/chat", {{"system", std::string(system_prompt)}, {"user", std::string(user_message)}}),
               "text", "chat");
}

Image HttpSegmenter::do_segment(const Image& image, std::string_view phrase) {
  Image mask = image_field(
      transport_->post("/segment", {{"image_png_b64", png_b64(image)}, {"phrase", std::string(phrase)}}),
      "mask_png_b64", "segment");
  if (mask.channels == 1) return mask;
  Image gray(mask.width, mask.height, 1);
  for (Eigen::Index i = 0; i < gray.data.size(); ++i) gray.data[i] = mask.data[i * mask.channels];
  return gray;
}

Image HttpEditor::do_edit(const Image& rendered, const Image& original, std::string_view instruction,
                          double noise_level) {
  nlohmann::json body = {{"image_png_b64", png_b64(rendered)},
                         {"original_png_b64", png_b64(original)},
                         {"instruction", std::string(instruction)},
                         {"noise_level", noise_level}};
  body["image_guidance"] = image_guidance_ ? nlohmann::json(*image_guidance_) : nlohmann::json(nullptr);
  body["text_guidance"] = text_guidance_ ? nlohmann::json(*text_guidance_) : nlohmann::json(nullptr);
  return image_field(transport_->post("/edit", body), "image_png_b64", "edit");
}

ModelBackends make_http_backends(const BackendConfig& config) {
  config.validate();
  auto transport = std::make_shared<const HttpTransport>(config);
  return {std::make_shared<HttpCaptioner>(transport), std::make_shared<HttpChatAssistant>(transport),
          std::make_shared<HttpSegmenter>(transport),
          std::make_shared<HttpEditor>(transport, config.image_guidance, config.text_guidance)};
}

}  // namespace gsedit::clients
