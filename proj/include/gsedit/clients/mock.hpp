#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "gsedit/clients/backends.hpp"

namespace gsedit::clients {

// Fixture directory layout: fixtures.json plus the PNG files it references.
//
//   {
//     "images":   {"<id>": "views/a.png", ...},
//     "captions": {"<id>": "text", "*": "fallback text"},
//     "chat":     [{"system": s, "system_contains": s, "system_sha256": h,
//                   "user": s, "user_contains": s | [s...], "reply": s}, ...],
//     "segments": [{"image": "<id>" | "*", "phrase": s, "mask": "masks/a.png"}, ...],
//     "edits":    [{"instruction": s, "region": s, "target": [r, g, b]}, ...]
//   }
//
// Images are identified by image_key() of their 8-bit content, so a render
// that reproduces a fixture view bit-for-bit is recognized as that view.
// Edit instructions may also take the literal form "make <region> (r,g,b)".
class MockFixtures {
 public:
  static std::shared_ptr<const MockFixtures> load(const std::filesystem::path& dir);
  static std::shared_ptr<const MockFixtures> from_json(const nlohmann::json& doc, const std::filesystem::path& dir);

  struct ChatRule {
    std::optional<std::string> system, system_contains, system_sha256, user;
    std::vector<std::string> user_contains;
    std::string reply;
  };
  struct EditRule {
    std::string region;
    Eigen::Vector3d target;
  };

  std::optional<std::string> image_id(const Image& image) const;
  std::optional<std::string> caption_for(const Image& image) const;
  std::optional<std::string> reply_for(std::string_view system, std::string_view user) const;
  /// Fixture mask for (image, phrase), or none when no entry matches.
  std::optional<Image> mask_for(const Image& image, std::string_view phrase) const;
  std::optional<EditRule> edit_rule_for(std::string_view instruction) const;

 private:
  std::map<std::string, std::string> id_by_key_;
  std::map<std::string, std::string> captions_;
  std::vector<ChatRule> chat_;
  std::map<std::pair<std::string, std::string>, Image> masks_;  // (image id or "*", normalized phrase)
  std::map<std::string, EditRule> edits_;
};

/// Parses "make <region> (r,g,b)"; region is whitespace-trimmed.
std::optional<MockFixtures::EditRule> parse_recolor_instruction(std::string_view instruction);

/// m * (0.8 * target + 0.2 * rendered) + (1 - m) * rendered, per pixel.
Image recolor_blend(const Image& rendered, const Image& mask, const Eigen::Vector3d& target);

class MockCaptioner : public Captioner {
 public:
  explicit MockCaptioner(std::shared_ptr<const MockFixtures> f) : fixtures_(std::move(f)) {}

 protected:
  std::string do_caption(const Image& image, std::string_view prompt) override;

 private:
  std::shared_ptr<const MockFixtures> fixtures_;
};

class MockChatAssistant : public ChatAssistant {
 public:
  explicit MockChatAssistant(std::shared_ptr<const MockFixtures> f) : fixtures_(std::move(f)) {}

 protected:
  std::string do_chat(std::string_view system_prompt, std::string_view user_message) override;

 private:
  std::shared_ptr<const MockFixtures> fixtures_;
};

class MockSegmenter : public GroundingSegmenter {
 public:
  explicit MockSegmenter(std::shared_ptr<const MockFixtures> f) : fixtures_(std::move(f)) {}

 protected:
  Image do_segment(const Image& image, std::string_view phrase) override;

 private:
  std::shared_ptr<const MockFixtures> fixtures_;
};

/// Recolor editor: the region mask is looked up by the original view, so the
/// supervision stays fixed while the rendered image evolves. Noise level is ignored.
class MockEditor : public ImageEditor {
 public:
  explicit MockEditor(std::shared_ptr<const MockFixtures> f) : fixtures_(std::move(f)) {}

 protected:
  Image do_edit(const Image& rendered, const Image& original, std::string_view instruction,
                double noise_level) override;

 private:
  std::shared_ptr<const MockFixtures> fixtures_;
};

ModelBackends make_mock_backends(std::shared_ptr<const MockFixtures> fixtures);
ModelBackends make_mock_backends(const std::filesystem::path& dir);

}  // namespace gsedit::clients
