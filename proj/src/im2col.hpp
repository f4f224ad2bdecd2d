#pragma once

// Internal: patch extraction shared by the 2D encoder and the 3D refiner.

#include "sliceprop/tensor.hpp"

#include <algorithm>

namespace sliceprop::detail {

// Zero-padded patch matrix: row y*W + x, column (ky*k + kx)*C + c.
template <typename Scalar>
inline PixelMatrix<Scalar> im2col(const PixelMatrix<Scalar>& in, int height, int width, int k) {
  const Index channels = in.cols();
  const int pad = k / 2;
  PixelMatrix<Scalar> cols = PixelMatrix<Scalar>::Zero(in.rows(), channels * k * k);
  for (int ky = 0; ky < k; ++ky)
    for (int kx = 0; kx < k; ++kx) {
      const int dy = ky - pad;
      const int dx = kx - pad;
      const int x0 = std::max(0, -dx);
      const int x1 = std::min(width, width - dx);
      if (x1 <= x0) continue;
      const Index col = Index(ky * k + kx) * channels;
      for (int y = std::max(0, -dy); y < std::min(height, height - dy); ++y)
        cols.block(Index(y) * width + x0, col, x1 - x0, channels) =
            in.block(Index(y + dy) * width + x0 + dx, 0, x1 - x0, channels);
    }
  return cols;
}

// Adjoint of im2col.
template <typename Scalar>
inline PixelMatrix<Scalar> col2im(const PixelMatrix<Scalar>& cols, int height, int width, int k, Index channels) {
  const int pad = k / 2;
  PixelMatrix<Scalar> out = PixelMatrix<Scalar>::Zero(Index(height) * width, channels);
  for (int ky = 0; ky < k; ++ky)
    for (int kx = 0; kx < k; ++kx) {
      const int dy = ky - pad;
      const int dx = kx - pad;
      const int x0 = std::max(0, -dx);
      const int x1 = std::min(width, width - dx);
      if (x1 <= x0) continue;
      const Index col = Index(ky * k + kx) * channels;
      for (int y = std::max(0, -dy); y < std::min(height, height - dy); ++y)
        out.block(Index(y + dy) * width + x0 + dx, 0, x1 - x0, channels) +=
            cols.block(Index(y) * width + x0, col, x1 - x0, channels);
    }
  return out;
}

}  // namespace sliceprop::detail
