#pragma once

#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "gsedit/clients/backends.hpp"

namespace gsedit::clients {

/// JSON-over-HTTP POST with timeout and retry on connection failures and 5xx.
class HttpTransport {
 public:
  explicit HttpTransport(const BackendConfig& config);
  ~HttpTransport();
  HttpTransport(const HttpTransport&) = delete;
  HttpTransport& operator=(const HttpTransport&) = delete;

  nlohmann::json post(const std::string& path, const nlohmann::json& body) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

class HttpCaptioner : public Captioner {
 public:
  explicit HttpCaptioner(std::shared_ptr<const HttpTransport> transport) : transport_(std::move(transport)) {}

 protected:
  std::string do_caption(const Image& image, std::string_view prompt) override;

 private:
  std::shared_ptr<const HttpTransport> transport_;
};

class HttpChatAssistant : public ChatAssistant {
 public:
  explicit HttpChatAssistant(std::shared_ptr<const HttpTransport> transport) : transport_(std::move(transport)) {}

 protected:
  std::string do_chat(std::string_view system_prompt, std::string_view user_message) override;

 private:
  std::shared_ptr<const HttpTransport> transport_;
};

class HttpSegmenter : public GroundingSegmenter {
 public:
  explicit HttpSegmenter(std::shared_ptr<const HttpTransport> transport) : transport_(std::move(transport)) {}

 protected:
  Image do_segment(const Image& image, std::string_view phrase) override;

 private:
  std::shared_ptr<const HttpTransport> transport_;
};

class HttpEditor : public ImageEditor {
 public:
  HttpEditor(std::shared_ptr<const HttpTransport> transport, std::optional<double> image_guidance,
             std::optional<double> text_guidance)
      : transport_(std::move(transport)), image_guidance_(image_guidance), text_guidance_(text_guidance) {}

 protected:
  Image do_edit(const Image& rendered, const Image& original, std::string_view instruction,
                double noise_level) override;

 private:
  std::shared_ptr<const HttpTransport> transport_;
  std::optional<double> image_guidance_, text_guidance_;
};

ModelBackends make_http_backends(const BackendConfig& config);

}  // namespace gsedit::clients
