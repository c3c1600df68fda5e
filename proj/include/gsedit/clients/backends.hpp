#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "gsedit/core/image_io.hpp"

namespace gsedit::clients {

struct PromptSet {
  std::string caption_prompt = "What is the content of the image";
  std::string merge_prompt =
      "You are given descriptions of the same 3D scene seen from several viewpoints. Merge them into one detailed "
      "scene description that names every object and how the objects are positioned relative to each other.";
  std::string extract_prompt =
      "You are given a scene description and an edit instruction. Answer with only the short phrase naming the "
      "object or part of the scene that the instruction asks to change.";
  std::string template_text = "Text description: {description} Edit Instruction: {instruction} Answer:";

  static constexpr std::string_view kDescriptionSlot = "{description}";
  static constexpr std::string_view kInstructionSlot = "{instruction}";

  void validate() const;
  /// Substitutes both slots; the inserted text is not re-scanned for markers.
  std::string fill_template(std::string_view description, std::string_view instruction) const;

  static PromptSet from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

enum class BackendMode { kHttp, kMock };

struct BackendConfig {
  BackendMode mode = BackendMode::kMock;
  std::string endpoint = "http://127.0.0.1:8500";
  double timeout_seconds = 60.0;
  int retries = 2;
  std::filesystem::path fixture_path;
  std::optional<double> image_guidance = 1.5;
  std::optional<double> text_guidance = 7.5;

  void validate() const;
  static BackendConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Checks the image is non-empty, 1 or 3 channels, with finite samples.
void require_valid_image(const Image& image, const char* where);

// Each interface validates inputs, delegates to the backend, then enforces the
// output contract so callers never see malformed data. calls() counts
// successful calls only.

class Captioner {
 public:
  virtual ~Captioner() = default;
  std::string caption(const Image& image, std::string_view prompt);
  long calls() const { return calls_.load(); }

 protected:
  virtual std::string do_caption(const Image& image, std::string_view prompt) = 0;

 private:
  std::atomic<long> calls_{0};
};

class ChatAssistant {
 public:
  virtual ~ChatAssistant() = default;
  std::string chat(std::string_view system_prompt, std::string_view user_message);
  long calls() const { return calls_.load(); }

 protected:
  virtual std::string do_chat(std::string_view system_prompt, std::string_view user_message) = 0;

 private:
  std::atomic<long> calls_{0};
};

class GroundingSegmenter {
 public:
  virtual ~GroundingSegmenter() = default;
  /// Single-channel mask in [0, 1] with the image's dimensions.
  Image segment(const Image& image, std::string_view phrase);
  long calls() const { return calls_.load(); }

 protected:
  virtual Image do_segment(const Image& image, std::string_view phrase) = 0;

 private:
  std::atomic<long> calls_{0};
};

class ImageEditor {
 public:
  virtual ~ImageEditor() = default;
  Image edit_image(const Image& rendered, const Image& original, std::string_view instruction, double noise_level);
  long calls() const { return calls_.load(); }

 protected:
  virtual Image do_edit(const Image& rendered, const Image& original, std::string_view instruction,
                        double noise_level) = 0;

 private:
  std::atomic<long> calls_{0};
};

struct ModelBackends {
  std::shared_ptr<Captioner> captioner;
  std::shared_ptr<ChatAssistant> assistant;
  std::shared_ptr<GroundingSegmenter> segmenter;
  std::shared_ptr<ImageEditor> editor;
};

/// HTTP adapters or fixture mocks, depending on `config.mode`.
ModelBackends make_backends(const BackendConfig& config);

}  // namespace gsedit::clients
