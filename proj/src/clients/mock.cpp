#include "gsedit/clients/mock.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <regex>

namespace gsedit::clients {

namespace {

std::string normalize_phrase(std::string_view s) {
  std::string out;
  bool space = false;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      space = !out.empty();
      continue;
    }
    if (space) out.push_back(' ');
    space = false;
    out.push_back(char(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

Image to_gray(const Image& img) {
  if (img.channels == 1) return img;
  Image gray(img.width, img.height, 1);
  for (Eigen::Index i = 0; i < gray.data.size(); ++i) gray.data[i] = img.data[i * img.channels];
  return gray;
}

std::optional<std::string> opt_string(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) return std::nullopt;
  return j[key].get<std::string>();
}

}  // namespace

std::shared_ptr<const MockFixtures> MockFixtures::load(const std::filesystem::path& dir) {
  const auto file = dir / "fixtures.json";
  if (!std::filesystem::exists(file)) throw FixtureMissingError("mock: no fixtures.json in " + dir.string());
  const auto bytes = read_file(file);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("mock fixtures " + file.string() + ": " + e.what(), e.byte);
  }
  return from_json(doc, dir);
}

std::shared_ptr<const MockFixtures> MockFixtures::from_json(const nlohmann::json& doc,
                                                            const std::filesystem::path& dir) {
  auto f = std::make_shared<MockFixtures>();
  try {
    if (doc.contains("images")) {
      for (const auto& [id, rel] : doc["images"].items()) {
        f->id_by_key_[image_key(read_png(dir / rel.get<std::string>()))] = id;
      }
    }
    if (doc.contains("captions")) {
      for (const auto& [id, text] : doc["captions"].items()) f->captions_[id] = text.get<std::string>();
    }
    if (doc.contains("chat")) {
      for (const auto& r : doc["chat"]) {
        ChatRule rule;
        rule.system = opt_string(r, "system");
        rule.system_contains = opt_string(r, "system_contains");
        rule.system_sha256 = opt_string(r, "system_sha256");
        rule.user = opt_string(r, "user");
        if (r.contains("user_contains")) {
          if (r["user_contains"].is_array()) {
            rule.user_contains = r["user_contains"].get<std::vector<std::string>>();
          } else {
            rule.user_contains.push_back(r["user_contains"].get<std::string>());
          }
        }
        rule.reply = r.at("reply").get<std::string>();
        f->chat_.push_back(std::move(rule));
      }
    }
    if (doc.contains("segments")) {
      for (const auto& s : doc["segments"]) {
        const auto id = s.at("image").get<std::string>();
        const auto phrase = normalize_phrase(s.at("phrase").get<std::string>());
        f->masks_[{id, phrase}] = to_gray(read_png(dir / s.at("mask").get<std::string>()));
      }
    }
    if (doc.contains("edits")) {
      for (const auto& e : doc["edits"]) {
        const auto t = e.at("target").get<std::vector<double>>();
        if (t.size() != 3) throw ValidationError("mock fixtures: edit target must have 3 components");
        f->edits_[normalize_phrase(e.at("instruction").get<std::string>())] =
            EditRule{e.at("region").get<std::string>(), Eigen::Vector3d(t[0], t[1], t[2])};
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("mock fixtures: ") + e.what());
  }
  return f;
}

std::optional<std::string> MockFixtures::image_id(const Image& image) const {
  const auto it = id_by_key_.find(image_key(image));
  if (it == id_by_key_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::string> MockFixtures::caption_for(const Image& image) const {
  if (const auto id = image_id(image)) {
    if (const auto it = captions_.find(*id); it != captions_.end()) return it->second;
  }
  if (const auto it = captions_.find("*"); it != captions_.end()) return it->second;
  return std::nullopt;
}

std::optional<std::string> MockFixtures::reply_for(std::string_view system, std::string_view user) const {
  std::optional<std::string> system_hash;
  for (const auto& r : chat_) {
    if (r.system && *r.system != system) continue;
    if (r.system_contains && system.find(*r.system_contains) == std::string_view::npos) continue;
    if (r.system_sha256) {
      if (!system_hash) system_hash = sha256_hex(system);
      if (*r.system_sha256 != *system_hash) continue;
    }
    if (r.user && *r.user != user) continue;
    const bool all = std::all_of(r.user_contains.begin(), r.user_contains.end(),
                                 [&](const std::string& s) { return user.find(s) != std::string_view::npos; });
    if (!all) continue;
    return r.reply;
  }
  return std::nullopt;
}

std::optional<Image> MockFixtures::mask_for(const Image& image, std::string_view phrase) const {
  const auto p = normalize_phrase(phrase);
  if (const auto id = image_id(image)) {
    if (const auto it = masks_.find({*id, p}); it != masks_.end()) return it->second;
  }
  if (const auto it = masks_.find({"*", p}); it != masks_.end()) return it->second;
  return std::nullopt;
}

std::optional<MockFixtures::EditRule> MockFixtures::edit_rule_for(std::string_view instruction) const {
  if (const auto it = edits_.find(normalize_phrase(instruction)); it != edits_.end()) return it->second;
  return parse_recolor_instruction(instruction);
}

std::optional<MockFixtures::EditRule> parse_recolor_instruction(std::string_view instruction) {
  static const std::regex pattern(
      R"(^\s*make\s+(.+?)\s*\(\s*([-+0-9.eE]+)\s*,\s*([-+0-9.eE]+)\s*,\s*([-+0-9.eE]+)\s*\)\s*$)",
      std::regex::icase);
  std::cmatch m;
  if (!std::regex_match(instruction.data(), instruction.data() + instruction.size(), m, pattern)) return std::nullopt;
  MockFixtures::EditRule rule;
  rule.region = m[1].str();
  for (int k = 0; k < 3; ++k) {
    const auto s = m[k + 2].str();
    double v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
    rule.target(k) = v;
  }
  return rule;
}

Image recolor_blend(const Image& rendered, const Image& mask, const Eigen::Vector3d& target) {
  if (mask.width != rendered.width || mask.height != rendered.height || mask.channels != 1) {
    throw ContractError("recolor_blend: mask must be single-channel with the image's dimensions");
  }
  Image out = rendered;
  for (int y = 0; y < rendered.height; ++y)
    for (int x = 0; x < rendered.width; ++x) {
      const double m = mask.at(x, y);
      for (int c = 0; c < rendered.channels; ++c) {
        const double r = rendered.at(x, y, c);
        const double blend = 0.8 * target(std::min(c, 2)) + 0.2 * r;
        out.at(x, y, c) = m * blend + (1 - m) * r;
      }
    }
  return out;
}

std::string MockCaptioner::do_caption(const Image& image, std::string_view) {
  if (auto c = fixtures_->caption_for(image)) return *c;
  throw FixtureMissingError("mock caption: no fixture for image " + image_key(image).substr(0, 16));
}

std::string MockChatAssistant::do_chat(std::string_view system_prompt, std::string_view user_message) {
  if (auto r = fixtures_->reply_for(system_prompt, user_message)) return *r;
  throw FixtureMissingError("mock chat: no rule matches user message '" +
                            std::string(user_message.substr(0, 120)) + "'");
}

Image MockSegmenter::do_segment(const Image& image, std::string_view phrase) {
  if (auto m = fixtures_->mask_for(image, phrase)) return *m;
  return Image(image.width, image.height, 1);
}

Image MockEditor::do_edit(const Image& rendered, const Image& original, std::string_view instruction, double) {
  if (normalize_phrase(instruction).empty()) return rendered;
  const auto rule = fixtures_->edit_rule_for(instruction);
  if (!rule) throw FixtureMissingError("mock edit: no rule for instruction '" + std::string(instruction) + "'");
  const auto mask = fixtures_->mask_for(original, rule->region);
  if (!mask) return rendered;
  return recolor_blend(rendered, *mask, rule->target);
}

ModelBackends make_mock_backends(std::shared_ptr<const MockFixtures> fixtures) {
  return {std::make_shared<MockCaptioner>(fixtures), std::make_shared<MockChatAssistant>(fixtures),
          std::make_shared<MockSegmenter>(fixtures), std::make_shared<MockEditor>(fixtures)};
}

ModelBackends make_mock_backends(const std::filesystem::path& dir) { return make_mock_backends(MockFixtures::load(dir)); }

}  // namespace gsedit::clients
