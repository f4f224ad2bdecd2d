#pragma once

#include <Eigen/Dense>

#include <cstdint>

namespace sliceprop {

using Index = Eigen::Index;

/// A single H×W scalar slice, row-major so that (y, x) maps to y*W + x.
template <typename Scalar>
using Image = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// One row per pixel, one column per channel.
template <typename Scalar>
using PixelMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using SliceMask = Image<float>;

/// H×W grid of C-channel pixels. Pixel (y, x) is row y*W + x of `data`.
template <typename Scalar>
struct ChannelStack {
  int height = 0;
  int width = 0;
  PixelMatrix<Scalar> data;

  ChannelStack() = default;
  ChannelStack(int h, int w, int channels)
      : height(h), width(w), data(PixelMatrix<Scalar>::Zero(Index(h) * w, channels)) {}

  int channels() const { return static_cast<int>(data.cols()); }
  Index pixels() const { return Index(height) * width; }

  template <typename Other>
  ChannelStack<Other> cast() const {
    ChannelStack<Other> out;
    out.height = height;
    out.width = width;
    out.data = data.template cast<Other>();
    return out;
  }
};

/// Gradient-enhanced (or edge-profiled) slice: channel stack fed to the encoder.
template <typename Scalar>
using GradientEnhancedSlice = ChannelStack<Scalar>;

/// Per-pixel features emitted by the encoder.
template <typename Scalar>
using FeatureMap = ChannelStack<Scalar>;

/// Flattens an image into a single-channel stack.
template <typename Scalar, typename Derived>
ChannelStack<Scalar> as_channel(const Eigen::DenseBase<Derived>& image) {
  ChannelStack<Scalar> out(static_cast<int>(image.rows()), static_cast<int>(image.cols()), 1);
  for (Index y = 0; y < image.rows(); ++y)
    for (Index x = 0; x < image.cols(); ++x)
      out.data(y * image.cols() + x, 0) = static_cast<Scalar>(image(y, x));
  return out;
}

}  // namespace sliceprop
