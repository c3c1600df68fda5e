#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "gsedit/core/errors.hpp"
#include "gsedit/core/gaussian.hpp"
#include "gsedit/raster/rasterizer.hpp"

namespace gsedit::optim {

template <typename Scalar>
using ParamArray = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
struct AdamState {
  ParamArray<Scalar> first_moment, second_moment;
  long step_count = 0;
  Scalar lr = Scalar(1e-3);
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar eps = Scalar(1e-15);

  AdamState() = default;
  AdamState(Eigen::Index n, Scalar learning_rate)
      : first_moment(ParamArray<Scalar>::Zero(n)), second_moment(ParamArray<Scalar>::Zero(n)), lr(learning_rate) {}
};

/// Bias-corrected Adam. Rejects non-finite gradients before touching any state.
template <typename Scalar>
void adam_step(Eigen::Ref<ParamArray<Scalar>> params, const Eigen::Ref<const ParamArray<Scalar>>& grads,
               AdamState<Scalar>& st) {
  if (params.size() != grads.size() || st.first_moment.size() != params.size() ||
      st.second_moment.size() != params.size()) {
    throw ContractError("adam_step: parameter, gradient and moment sizes differ (" + std::to_string(params.size()) +
                        ", " + std::to_string(grads.size()) + ", " + std::to_string(st.first_moment.size()) + ")");
  }
  for (Eigen::Index i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      throw NumericalError("adam_step: non-finite gradient " + std::to_string(double(grads[i])) + " at entry " +
                           std::to_string(i) + " (step " + std::to_string(st.step_count + 1) + ")");
    }
  }
  ++st.step_count;
  st.first_moment = st.beta1 * st.first_moment + (1 - st.beta1) * grads;
  st.second_moment = st.beta2 * st.second_moment + (1 - st.beta2) * grads.square();
  const Scalar c1 = 1 - std::pow(st.beta1, Scalar(st.step_count));
  const Scalar c2 = 1 - std::pow(st.beta2, Scalar(st.step_count));
  params -= st.lr * (st.first_moment / c1) / ((st.second_moment / c2).sqrt() + st.eps);
}

struct LearningRates {
  double position = 1.6e-4;
  double log_scale = 5e-3;
  double rotation = 1e-3;
  double color = 2.5e-2;
  double opacity_logit = 5e-2;
  double roi_logit = 1e-1;

  double of(Attribute a) const {
    switch (a) {
      case Attribute::kPosition: return position;
      case Attribute::kLogScale: return log_scale;
      case Attribute::kRotation: return rotation;
      case Attribute::kColor: return color;
      case Attribute::kOpacity: return opacity_logit;
      case Attribute::kRoi: return roi_logit;
    }
    return 0.0;
  }

  void validate() const {
    for (Attribute a : kAllAttributes) {
      if (!(of(a) > 0) || !std::isfinite(of(a))) {
        throw InvalidParameter(std::string("learning rate for ") + attribute_name(a) + " must be positive");
      }
    }
  }
};

inline std::vector<Eigen::Index> all_rows(std::size_t n) {
  std::vector<Eigen::Index> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = Eigen::Index(i);
  return rows;
}

/// Flattens one attribute of the given rows, row-major.
template <typename Scalar>
ParamArray<Scalar> pack(const GaussianScene<Scalar>& scene, Attribute a, const std::vector<Eigen::Index>& rows) {
  const int w = attribute_width(a);
  ParamArray<Scalar> out(Eigen::Index(rows.size()) * w);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& g = scene.gaussians[std::size_t(rows[r])];
    const Eigen::Index o = Eigen::Index(r) * w;
    switch (a) {
      case Attribute::kPosition: out.template segment<3>(o) = g.position.array(); break;
      case Attribute::kLogScale: out.template segment<3>(o) = g.log_scale.array(); break;
      case Attribute::kRotation: out.template segment<4>(o) = g.rotation.array(); break;
      case Attribute::kColor: out.template segment<3>(o) = g.color.array(); break;
      case Attribute::kOpacity: out[o] = g.opacity_logit; break;
      case Attribute::kRoi: out[o] = g.roi_logit; break;
    }
  }
  return out;
}

template <typename Scalar>
void unpack(GaussianScene<Scalar>& scene, Attribute a, const std::vector<Eigen::Index>& rows,
            const ParamArray<Scalar>& values) {
  const int w = attribute_width(a);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto& g = scene.gaussians[std::size_t(rows[r])];
    const Eigen::Index o = Eigen::Index(r) * w;
    switch (a) {
      case Attribute::kPosition: g.position = values.template segment<3>(o).matrix(); break;
      case Attribute::kLogScale: g.log_scale = values.template segment<3>(o).matrix(); break;
      case Attribute::kRotation: g.rotation = values.template segment<4>(o).matrix(); break;
      case Attribute::kColor: g.color = values.template segment<3>(o).matrix(); break;
      case Attribute::kOpacity: g.opacity_logit = values[o]; break;
      case Attribute::kRoi: g.roi_logit = values[o]; break;
    }
  }
}

template <typename Scalar>
ParamArray<Scalar> pack_gradient(const raster::GradientBuffer<Scalar>& grads, Attribute a,
                                 const std::vector<Eigen::Index>& rows) {
  const auto block = grads.block(a);
  const int w = attribute_width(a);
  ParamArray<Scalar> out(Eigen::Index(rows.size()) * w);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (int k = 0; k < w; ++k) out[Eigen::Index(r) * w + k] = block(rows[r], k);
  return out;
}

/// Adam over a fixed subset of Gaussians and attributes. Rows outside the
/// subset are never read or written; after each step quaternions of the
/// subset are renormalized and colors clamped to [0, 1].
template <typename Scalar>
class SceneOptimizer {
 public:
  SceneOptimizer() = default;
  SceneOptimizer(std::vector<Eigen::Index> rows, std::vector<Attribute> attributes, const LearningRates& lrs)
      : rows_(std::move(rows)), attributes_(std::move(attributes)) {
    lrs.validate();
    for (Attribute a : attributes_) {
      states_[a] = AdamState<Scalar>(Eigen::Index(rows_.size()) * attribute_width(a), Scalar(lrs.of(a)));
    }
  }

  void step(GaussianScene<Scalar>& scene, const raster::GradientBuffer<Scalar>& grads) {
    if (grads.size() != Eigen::Index(scene.size())) {
      throw ContractError("SceneOptimizer: gradient buffer length " + std::to_string(grads.size()) +
                          " does not match scene size " + std::to_string(scene.size()));
    }
    for (Eigen::Index r : rows_) {
      if (r < 0 || std::size_t(r) >= scene.size()) throw ContractError("SceneOptimizer: row index out of range");
    }
    std::map<Attribute, ParamArray<Scalar>> packed_grads;
    for (Attribute a : attributes_) {
      packed_grads[a] = pack_gradient(grads, a, rows_);
      if (!packed_grads[a].allFinite()) {
        for (Eigen::Index i = 0; i < packed_grads[a].size(); ++i) {
          if (!std::isfinite(packed_grads[a][i])) {
            const auto w = attribute_width(a);
            throw NumericalError(std::string("non-finite gradient for ") + attribute_name(a) + " of gaussian " +
                                 std::to_string(rows_[std::size_t(i / w)]));
          }
        }
      }
    }
    for (Attribute a : attributes_) {
      ParamArray<Scalar> p = pack(scene, a, rows_);
      adam_step<Scalar>(p, packed_grads[a], states_.at(a));
      if (a == Attribute::kRotation) {
        for (Eigen::Index r = 0; r < Eigen::Index(rows_.size()); ++r) {
          auto q = p.template segment<4>(4 * r);
          const Scalar n = q.matrix().norm();
          if (!(n > 0)) throw NumericalError("SceneOptimizer: quaternion collapsed to zero");
          q /= n;
        }
      } else if (a == Attribute::kColor) {
        p = p.max(Scalar(0)).min(Scalar(1));
      }
      unpack(scene, a, rows_, p);
    }
    ++steps_;
  }

  const std::vector<Eigen::Index>& rows() const { return rows_; }
  const std::vector<Attribute>& attributes() const { return attributes_; }
  const AdamState<Scalar>& state(Attribute a) const { return states_.at(a); }
  long steps() const { return steps_; }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["steps"] = steps_;
    j["rows"] = rows_;
    for (const auto& [a, st] : states_) {
      nlohmann::json s;
      s["step_count"] = st.step_count;
      s["lr"] = st.lr;
      s["beta1"] = st.beta1;
      s["beta2"] = st.beta2;
      s["eps"] = st.eps;
      s["m"] = std::vector<Scalar>(st.first_moment.begin(), st.first_moment.end());
      s["v"] = std::vector<Scalar>(st.second_moment.begin(), st.second_moment.end());
      j["states"][attribute_name(a)] = s;
    }
    return j;
  }

  static SceneOptimizer from_json(const nlohmann::json& j) {
    SceneOptimizer o;
    try {
      o.steps_ = j.at("steps").get<long>();
      o.rows_ = j.at("rows").get<std::vector<Eigen::Index>>();
      for (Attribute a : kAllAttributes) {
        if (!j.at("states").contains(attribute_name(a))) continue;
        const auto& s = j["states"][attribute_name(a)];
        AdamState<Scalar> st;
        st.step_count = s.at("step_count").get<long>();
        st.lr = s.at("lr").get<Scalar>();
        st.beta1 = s.at("beta1").get<Scalar>();
        st.beta2 = s.at("beta2").get<Scalar>();
        st.eps = s.at("eps").get<Scalar>();
        const auto m = s.at("m").get<std::vector<Scalar>>();
        const auto v = s.at("v").get<std::vector<Scalar>>();
        const auto expected = std::size_t(o.rows_.size()) * std::size_t(attribute_width(a));
        if (m.size() != expected || v.size() != expected) {
          throw ValidationError(std::string("optimizer state: moment length mismatch for ") + attribute_name(a));
        }
        st.first_moment = Eigen::Map<const ParamArray<Scalar>>(m.data(), Eigen::Index(m.size()));
        st.second_moment = Eigen::Map<const ParamArray<Scalar>>(v.data(), Eigen::Index(v.size()));
        o.attributes_.push_back(a);
        o.states_[a] = std::move(st);
      }
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("optimizer state: ") + e.what());
    }
    return o;
  }

 private:
  std::vector<Eigen::Index> rows_;
  std::vector<Attribute> attributes_;
  std::map<Attribute, AdamState<Scalar>> states_;
  long steps_ = 0;
};

}  // namespace gsedit::optim
