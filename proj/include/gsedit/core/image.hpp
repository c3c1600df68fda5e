#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>

#include <Eigen/Dense>

#include "gsedit/core/errors.hpp"

namespace gsedit {

/// Row-major, channel-interleaved image with values nominally in [0, 1].
template <typename Scalar>
struct ImageBuffer {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  int width = 0;
  int height = 0;
  int channels = 1;
  Array data;

  ImageBuffer() = default;
  ImageBuffer(int w, int h, int c) : width(w), height(h), channels(c), data(Array::Zero(Eigen::Index(w) * h * c)) {}

  static ImageBuffer constant(int w, int h, int c, Scalar value) {
    ImageBuffer img(w, h, c);
    img.data.setConstant(value);
    return img;
  }

  Eigen::Index pixel_count() const { return Eigen::Index(width) * height; }
  bool empty() const { return width == 0 || height == 0; }

  Scalar& at(int x, int y, int c = 0) { return data[(Eigen::Index(y) * width + x) * channels + c]; }
  Scalar at(int x, int y, int c = 0) const { return data[(Eigen::Index(y) * width + x) * channels + c]; }

  bool same_shape(const ImageBuffer& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }

  template <typename Other>
  ImageBuffer<Other> cast() const {
    ImageBuffer<Other> out;
    out.width = width;
    out.height = height;
    out.channels = channels;
    out.data = data.template cast<Other>();
    return out;
  }

  bool operator==(const ImageBuffer& o) const {
    return same_shape(o) && (data == o.data).all();
  }
};

template <typename Scalar>
void require_same_shape(const ImageBuffer<Scalar>& a, const ImageBuffer<Scalar>& b, const char* where) {
  if (!a.same_shape(b)) {
    throw ContractError(std::string(where) + ": image dimensions differ (" + std::to_string(a.width) +
                        "x" + std::to_string(a.height) + "x" + std::to_string(a.channels) + " vs " +
                        std::to_string(b.width) + "x" + std::to_string(b.height) + "x" +
                        std::to_string(b.channels) + ")");
  }
}

/// Clamp every sample into [0, 1]; throws NumericalError on NaN/inf.
template <typename Scalar>
ImageBuffer<Scalar> sanitized(ImageBuffer<Scalar> img) {
  if (!img.data.allFinite()) throw NumericalError("image contains non-finite values");
  img.data = img.data.max(Scalar(0)).min(Scalar(1));
  return img;
}

template <typename Scalar>
double psnr(const ImageBuffer<Scalar>& a, const ImageBuffer<Scalar>& b) {
  require_same_shape(a, b, "psnr");
  const double mse = double((a.data - b.data).square().mean());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

}  // namespace gsedit
