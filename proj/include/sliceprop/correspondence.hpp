#pragma once

#include "sliceprop/encoder.hpp"
#include "sliceprop/tensor.hpp"

#include <cstdlib>
#include <filesystem>

namespace sliceprop {

/// Square local window of radius r: (2r+1)² candidate source pixels per target
/// pixel, clipped at the slice border.
struct WindowSpec {
  int radius = 7;

  int side() const { return 2 * radius + 1; }
  int slots() const { return side() * side(); }
  void validate(int height, int width) const;
};

/// Row-stochastic, window-sparse weights A(u, v) from source slice pixels v to
/// target slice pixels u. Row u of `weights` holds the window of u; column
/// k = (dy + r)·(2r+1) + (dx + r) holds v = u + (dy, dx). Slots falling outside
/// the slice are exactly zero.
template <typename Scalar>
struct AffinityMatrix {
  int height = 0;
  int width = 0;
  int radius = 0;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> weights;

  int side() const { return 2 * radius + 1; }
  /// A(u, v) with u = (uy, ux), v = (vy, vx); zero outside the window.
  Scalar operator()(int uy, int ux, int vy, int vx) const;

  /// Weight 1 on v = u.
  static AffinityMatrix identity(int height, int width, int radius);
};

/// Calls fn(slot, first_target_row, first_source_row, count) for every maximal run
/// of horizontally adjacent targets whose window slot lands inside the slice.
/// Runs are visited slot-major, then by row. Pixel rows are y*W + x.
template <typename Fn>
void for_each_window_run(int height, int width, int radius, Fn&& fn) {
  const int side = 2 * radius + 1;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      const int slot = (dy + radius) * side + (dx + radius);
      const int x0 = dx < 0 ? -dx : 0;
      const int x1 = dx > 0 ? width - dx : width;
      if (x1 <= x0) continue;
      const int y0 = dy < 0 ? -dy : 0;
      const int y1 = dy > 0 ? height - dy : height;
      for (int y = y0; y < y1; ++y)
        fn(slot, Index(y) * width + x0, Index(y + dy) * width + x0 + dx, Index(x1 - x0));
    }
}

/// Like for_each_window_run, but one span per slot covering every valid row:
/// v = u + dy*W + dx throughout, so entries whose x + dx leaves [0, W) wrap
/// onto a neighbouring row and must be discarded by the caller
/// (see for_each_wrapped_entry).
template <typename Fn>
void for_each_window_span(int height, int width, int radius, Fn&& fn) {
  const int side = 2 * radius + 1;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      if (std::abs(dx) >= width) continue;
      const int y0 = dy < 0 ? -dy : 0;
      const int y1 = dy > 0 ? height - dy : height;
      if (y1 <= y0) continue;
      const Index u0 = Index(y0) * width + (dx < 0 ? -dx : 0);
      const Index u1 = Index(y1) * width - (dx > 0 ? dx : 0);
      fn((dy + radius) * side + (dx + radius), u0, u0 + Index(dy) * width + dx, u1 - u0);
    }
}

/// Visits (slot, u) for every in-span entry of for_each_window_span whose
/// candidate wrapped across a row boundary.
template <typename Fn>
void for_each_wrapped_entry(int height, int width, int radius, Fn&& fn) {
  const int side = 2 * radius + 1;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      if (dx == 0 || std::abs(dx) >= width) continue;
      const int slot = (dy + radius) * side + (dx + radius);
      const int y0 = dy < 0 ? -dy : 0;
      const int y1 = dy > 0 ? height - dy : height;
      for (int y = y0; y < y1; ++y)
        for (int k = 0; k < std::abs(dx); ++k) {
          // dx > 0: columns W-dx..W-1 of row y (last row's are outside the span);
          // dx < 0: columns 0..-dx-1 (first row's are outside the span).
          if (dx > 0 && y == y1 - 1) continue;
          if (dx < 0 && y == y0) continue;
          const int x = dx > 0 ? width - dx + k : k;
          fn(slot, Index(y) * width + x);
        }
    }
}

/// A(u, v) = softmax over v ∈ Ω(u) of ⟨query(u), key(v)⟩.
template <typename Scalar>
AffinityMatrix<Scalar> compute_affinity(const FeatureMap<Scalar>& key, const FeatureMap<Scalar>& query,
                                        const WindowSpec& window);

template <typename Scalar>
struct AffinityGradients {
  FeatureMap<Scalar> key;
  FeatureMap<Scalar> query;
};

/// Backpropagates dL/dA through the windowed softmax onto key and query features.
template <typename Scalar>
AffinityGradients<Scalar> compute_affinity_backward(const FeatureMap<Scalar>& key, const FeatureMap<Scalar>& query,
                                                    const AffinityMatrix<Scalar>& affinity,
                                                    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& d_affinity);

/// Channel-wise concatenation: slice features first, then PL features.
template <typename Scalar>
FeatureMap<Scalar> fuse_keys_queries(const FeatureMap<Scalar>& slice_features, const FeatureMap<Scalar>& pl_features);

/// Dual-path affinity. Both branches are encoded with the one `params` object.
template <typename Scalar>
AffinityMatrix<Scalar> oeg_affinity(const EncoderParams<Scalar>& params, const GradientEnhancedSlice<Scalar>& slice_j,
                                    const GradientEnhancedSlice<Scalar>& slice_j1,
                                    const GradientEnhancedSlice<Scalar>& pl_j,
                                    const GradientEnhancedSlice<Scalar>& pl_j1, const WindowSpec& window);

/// out(u) = Σ_v A(u, v) values(v), summed in window row-major order.
template <typename Scalar>
ChannelStack<Scalar> apply_affinity(const AffinityMatrix<Scalar>& affinity, const ChannelStack<Scalar>& values);

template <typename Scalar>
struct ApplyGradients {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> affinity;
  ChannelStack<Scalar> values;
};

template <typename Scalar>
ApplyGradients<Scalar> apply_affinity_backward(const AffinityMatrix<Scalar>& affinity,
                                               const ChannelStack<Scalar>& values,
                                               const ChannelStack<Scalar>& d_out);

/// Debug dump: `<stem>.json` {"shape": [H, W], "radius": r} and `<stem>.raw` with
/// (2r+1)² little-endian f32 weights per target row, window row-major, clipped
/// slots written as 0.
void dump_affinity(const AffinityMatrix<double>& affinity, const std::filesystem::path& stem);

}  // namespace sliceprop
