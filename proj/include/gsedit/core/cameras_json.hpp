#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "gsedit/core/camera.hpp"

namespace gsedit {

/// Parses a JSON array of {fx, fy, cx, cy, width, height, rotation[9] (row-major),
/// translation[3], near_clip?}. Every camera is validated.
template <typename Scalar>
std::vector<Camera<Scalar>> cameras_from_json(const nlohmann::json& doc) {
  if (!doc.is_array()) throw ValidationError("cameras: top-level JSON must be an array");
  std::vector<Camera<Scalar>> cams;
  cams.reserve(doc.size());
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& j = doc[i];
    const std::string where = "camera " + std::to_string(i) + ": ";
    for (const char* key : {"fx", "fy", "cx", "cy", "width", "height", "rotation", "translation"}) {
      if (!j.contains(key)) throw SchemaError(where + key);
    }
    if (!j["rotation"].is_array() || j["rotation"].size() != 9) {
      throw ValidationError(where + "rotation must hold 9 numbers");
    }
    if (!j["translation"].is_array() || j["translation"].size() != 3) {
      throw ValidationError(where + "translation must hold 3 numbers");
    }
    Camera<Scalar> cam;
    try {
      cam.fx = j["fx"].get<Scalar>();
      cam.fy = j["fy"].get<Scalar>();
      cam.cx = j["cx"].get<Scalar>();
      cam.cy = j["cy"].get<Scalar>();
      cam.width = j["width"].get<int>();
      cam.height = j["height"].get<int>();
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) cam.rotation(r, c) = j["rotation"][r * 3 + c].get<Scalar>();
      for (int k = 0; k < 3; ++k) cam.translation(k) = j["translation"][k].get<Scalar>();
      if (j.contains("near_clip")) cam.near_clip = j["near_clip"].get<Scalar>();
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(where + e.what());
    }
    try {
      validate_camera(cam);
    } catch (const ValidationError& e) {
      throw ValidationError(where + e.what());
    }
    cams.push_back(cam);
  }
  return cams;
}

template <typename Scalar>
std::vector<Camera<Scalar>> load_cameras(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("cameras JSON: ") + e.what(), e.byte);
  }
  return cameras_from_json<Scalar>(doc);
}

template <typename Scalar>
nlohmann::json cameras_to_json(const std::vector<Camera<Scalar>>& cams) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& c : cams) {
    nlohmann::json j;
    j["fx"] = c.fx;
    j["fy"] = c.fy;
    j["cx"] = c.cx;
    j["cy"] = c.cy;
    j["width"] = c.width;
    j["height"] = c.height;
    std::vector<Scalar> r(9), t(3);
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) r[a * 3 + b] = c.rotation(a, b);
      t[a] = c.translation(a);
    }
    j["rotation"] = r;
    j["translation"] = t;
    j["near_clip"] = c.near_clip;
    out.push_back(std::move(j));
  }
  return out;
}

}  // namespace gsedit
