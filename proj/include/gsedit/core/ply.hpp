#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "gsedit/core/gaussian.hpp"

// Scene persistence in the binary little-endian PLY layout used by 3D Gaussian
// splatting exporters (x/y/z, scale_*, rot_*, opacity, f_dc_*). Exports add a
// `roi` logit plus exact `color_*` floats so that export -> import is lossless;
// f_dc is kept for other viewers.

namespace gsedit {

static_assert(std::endian::native == std::endian::little, "PLY codec assumes a little-endian host");

/// SH band-0 basis constant, Y_0^0 = 1 / (2 sqrt(pi)).
inline constexpr double kShC0 = 0.28209479177387814;

enum class PlyPrecision { kNative, kFloat32, kFloat64 };

namespace detail::ply {

enum class Type { kInt8, kUInt8, kInt16, kUInt16, kInt32, kUInt32, kFloat32, kFloat64 };

inline std::optional<Type> parse_type(std::string_view s) {
  if (s == "char" || s == "int8") return Type::kInt8;
  if (s == "uchar" || s == "uint8") return Type::kUInt8;
  if (s == "short" || s == "int16") return Type::kInt16;
  if (s == "ushort" || s == "uint16") return Type::kUInt16;
  if (s == "int" || s == "int32") return Type::kInt32;
  if (s == "uint" || s == "uint32") return Type::kUInt32;
  if (s == "float" || s == "float32") return Type::kFloat32;
  if (s == "double" || s == "float64") return Type::kFloat64;
  return std::nullopt;
}

inline std::size_t type_size(Type t) {
  switch (t) {
    case Type::kInt8:
    case Type::kUInt8: return 1;
    case Type::kInt16:
    case Type::kUInt16: return 2;
    case Type::kInt32:
    case Type::kUInt32:
    case Type::kFloat32: return 4;
    case Type::kFloat64: return 8;
  }
  return 0;
}

template <typename T>
T load(const std::uint8_t* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

inline double read_value(const std::uint8_t* p, Type t) {
  switch (t) {
    case Type::kInt8: return load<std::int8_t>(p);
    case Type::kUInt8: return load<std::uint8_t>(p);
    case Type::kInt16: return load<std::int16_t>(p);
    case Type::kUInt16: return load<std::uint16_t>(p);
    case Type::kInt32: return load<std::int32_t>(p);
    case Type::kUInt32: return load<std::uint32_t>(p);
    case Type::kFloat32: return load<float>(p);
    case Type::kFloat64: return load<double>(p);
  }
  return 0.0;
}

struct Property {
  std::string name;
  Type type = Type::kFloat32;
  std::size_t offset = 0;
};

struct Element {
  std::string name;
  std::size_t count = 0;
  std::vector<Property> properties;
  std::size_t stride = 0;
  bool has_list = false;

  const Property* find(std::string_view n) const {
    for (const auto& p : properties)
      if (p.name == n) return &p;
    return nullptr;
  }
};

struct Header {
  std::vector<Element> elements;
  std::size_t body_offset = 0;
  std::optional<std::array<double, 3>> background;
};

inline std::vector<std::string_view> split_words(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && line[i] == ' ') ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline bool parse_double(std::string_view s, double& out) {
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

inline Header parse_header(std::span<const std::uint8_t> bytes) {
  Header h;
  std::size_t pos = 0;
  bool first = true;
  bool saw_format = false;
  while (true) {
    const std::size_t line_start = pos;
    while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    if (pos >= bytes.size()) throw ParseError("PLY header is not terminated by end_header", line_start);
    std::string_view line(reinterpret_cast<const char*>(bytes.data()) + line_start, pos - line_start);
    ++pos;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const auto words = split_words(line);
    if (first) {
      if (line != "ply") throw ParseError("missing 'ply' magic", line_start);
      first = false;
      continue;
    }
    if (words.empty()) continue;
    const std::string_view key = words[0];
    if (key == "format") {
      if (words.size() != 3 || words[1] != "binary_little_endian") {
        throw ParseError("unsupported PLY format (need binary_little_endian)", line_start);
      }
      saw_format = true;
    } else if (key == "comment" || key == "obj_info") {
      if (words.size() == 5 && words[1] == "background_color") {
        std::array<double, 3> bg{};
        for (int k = 0; k < 3; ++k) {
          if (!parse_double(words[2 + k], bg[k])) throw ParseError("bad background_color comment", line_start);
        }
        h.background = bg;
      }
    } else if (key == "element") {
      std::size_t count = 0;
      if (words.size() != 3) throw ParseError("malformed element line", line_start);
      const auto [ptr, ec] = std::from_chars(words[2].data(), words[2].data() + words[2].size(), count);
      if (ec != std::errc() || ptr != words[2].data() + words[2].size()) {
        throw ParseError("malformed element count", line_start);
      }
      h.elements.push_back(Element{std::string(words[1]), count, {}, 0, false});
    } else if (key == "property") {
      if (h.elements.empty()) throw ParseError("property before any element", line_start);
      Element& el = h.elements.back();
      if (words.size() == 5 && words[1] == "list") {
        if (!parse_type(words[2]) || !parse_type(words[3])) throw ParseError("unknown list type", line_start);
        el.has_list = true;
        continue;
      }
      if (words.size() != 3) throw ParseError("malformed property line", line_start);
      const auto type = parse_type(words[1]);
      if (!type) throw ParseError("unknown property type '" + std::string(words[1]) + "'", line_start);
      el.properties.push_back(Property{std::string(words[2]), *type, el.stride});
      el.stride += type_size(*type);
    } else if (key == "end_header") {
      break;
    } else {
      throw ParseError("unexpected header keyword '" + std::string(key) + "'", line_start);
    }
  }
  if (!saw_format) throw ParseError("missing format line", 0);
  h.body_offset = pos;
  return h;
}

template <typename Scalar>
void append_value(std::vector<std::uint8_t>& out, Scalar v, bool as_double) {
  if (as_double) {
    const double d = static_cast<double>(v);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&d);
    out.insert(out.end(), p, p + sizeof(d));
  } else {
    const float f = static_cast<float>(v);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&f);
    out.insert(out.end(), p, p + sizeof(f));
  }
}

inline std::string shortest(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace detail::ply

inline constexpr std::array<const char*, 14> kPlyRequiredProperties = {
    "x",     "y",     "z",     "scale_0", "scale_1", "scale_2", "rot_0",
    "rot_1", "rot_2", "rot_3", "opacity", "f_dc_0",  "f_dc_1",  "f_dc_2"};

template <typename Scalar>
GaussianScene<Scalar> import_ply(std::span<const std::uint8_t> bytes) {
  using namespace detail::ply;
  const Header header = parse_header(bytes);

  std::size_t offset = header.body_offset;
  const Element* vertex = nullptr;
  for (const auto& el : header.elements) {
    if (el.name == "vertex") {
      vertex = &el;
      break;
    }
    if (el.has_list) throw ParseError("list element '" + el.name + "' before vertex data is not supported", offset);
    offset += el.count * el.stride;
  }
  if (!vertex) throw SchemaError("element vertex");
  if (vertex->has_list) throw ParseError("vertex element must not contain list properties", header.body_offset);

  std::array<const Property*, kPlyRequiredProperties.size()> req{};
  for (std::size_t k = 0; k < kPlyRequiredProperties.size(); ++k) {
    req[k] = vertex->find(kPlyRequiredProperties[k]);
    if (!req[k]) throw SchemaError(kPlyRequiredProperties[k]);
  }
  const Property* roi = vertex->find("roi");
  const std::array<const Property*, 3> exact_color = {vertex->find("color_r"), vertex->find("color_g"),
                                                       vertex->find("color_b")};
  const bool has_exact_color = exact_color[0] && exact_color[1] && exact_color[2];

  if (bytes.size() < offset || (bytes.size() - offset) / std::max<std::size_t>(vertex->stride, 1) < vertex->count) {
    throw ParseError("PLY body truncated: expected " + std::to_string(vertex->count) + " vertices", bytes.size());
  }

  GaussianScene<Scalar> scene;
  if (header.background) {
    for (int k = 0; k < 3; ++k) scene.background_color(k) = static_cast<Scalar>((*header.background)[k]);
  }
  scene.gaussians.resize(vertex->count);
  for (std::size_t i = 0; i < vertex->count; ++i) {
    const std::uint8_t* row = bytes.data() + offset + i * vertex->stride;
    auto get = [&](const Property* p) { return static_cast<Scalar>(read_value(row + p->offset, p->type)); };
    Gaussian<Scalar>& g = scene.gaussians[i];
    for (int k = 0; k < 3; ++k) {
      g.position(k) = get(req[k]);
      g.log_scale(k) = get(req[3 + k]);
    }
    for (int k = 0; k < 4; ++k) g.rotation(k) = get(req[6 + k]);
    g.opacity_logit = get(req[10]);
    for (int k = 0; k < 3; ++k) {
      if (has_exact_color) {
        g.color(k) = get(exact_color[k]);
      } else {
        const Scalar c = Scalar(0.5) + Scalar(kShC0) * get(req[11 + k]);
        g.color(k) = std::clamp(c, Scalar(0), Scalar(1));
      }
    }
    g.roi_logit = roi ? get(roi) : Scalar(kDefaultRoiLogit);

    using std::abs;
    const Scalar norm = g.rotation.norm();
    if (norm == Scalar(0)) throw ValidationError("vertex " + std::to_string(i) + ": zero rotation quaternion");
    if (abs(norm - Scalar(1)) > Scalar(1e-6)) g.rotation /= norm;
  }
  return scene;
}

template <typename Scalar>
std::vector<std::uint8_t> export_ply(const GaussianScene<Scalar>& scene,
                                     PlyPrecision precision = PlyPrecision::kNative) {
  using detail::ply::append_value;
  const bool as_double = precision == PlyPrecision::kFloat64 ||
                         (precision == PlyPrecision::kNative && !std::is_same_v<Scalar, float>);
  const char* type = as_double ? "double" : "float";

  std::ostringstream hdr;
  hdr << "ply\nformat binary_little_endian 1.0\n";
  hdr << "comment background_color";
  for (int k = 0; k < 3; ++k) hdr << ' ' << detail::ply::shortest(static_cast<double>(scene.background_color(k)));
  hdr << "\nelement vertex " << scene.size() << "\n";
  for (const char* name : kPlyRequiredProperties) hdr << "property " << type << ' ' << name << '\n';
  for (const char* name : {"roi", "color_r", "color_g", "color_b"}) hdr << "property " << type << ' ' << name << '\n';
  hdr << "end_header\n";

  const std::string h = hdr.str();
  std::vector<std::uint8_t> out(h.begin(), h.end());
  out.reserve(out.size() + scene.size() * 18 * (as_double ? 8 : 4));
  for (const auto& g : scene.gaussians) {
    for (int k = 0; k < 3; ++k) append_value(out, g.position(k), as_double);
    for (int k = 0; k < 3; ++k) append_value(out, g.log_scale(k), as_double);
    for (int k = 0; k < 4; ++k) append_value(out, g.rotation(k), as_double);
    append_value(out, g.opacity_logit, as_double);
    for (int k = 0; k < 3; ++k) append_value(out, (g.color(k) - Scalar(0.5)) / Scalar(kShC0), as_double);
    append_value(out, g.roi_logit, as_double);
    for (int k = 0; k < 3; ++k) append_value(out, g.color(k), as_double);
  }
  return out;
}

}  // namespace gsedit
