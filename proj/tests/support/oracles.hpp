#pragma once

// Brute-force reference implementations used by the unit and acceptance tests.
// Deliberately written as plain per-pixel loops, sharing no code with the library.

#include "sliceprop/correspondence.hpp"
#include "sliceprop/geig.hpp"

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace oracle {

using sliceprop::Index;

inline int reflect(int i, int n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

inline std::pair<int, int> step(sliceprop::Direction d) {
  switch (d) {
    case sliceprop::Direction::horizontal: return {0, 1};
    case sliceprop::Direction::vertical: return {1, 0};
    case sliceprop::Direction::diagonal_up: return {-1, 1};
    case sliceprop::Direction::diagonal_down: return {1, 1};
  }
  return {0, 0};
}

template <typename Img>
Img second_derivative(const Img& s, sliceprop::Direction d, int scale) {
  const int h = (scale - 1) / 2;
  const auto [sy, sx] = step(d);
  const int H = static_cast<int>(s.rows()), W = static_cast<int>(s.cols());
  Img out(H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const auto plus = s(reflect(y + h * sy, H), reflect(x + h * sx, W));
      const auto minus = s(reflect(y - h * sy, H), reflect(x - h * sx, W));
      out(y, x) = plus - 2 * s(y, x) + minus;
    }
  return out;
}

// A(u, v) for every u and every v of the whole slice; zero outside the window.
inline std::vector<std::vector<double>> dense_affinity(const sliceprop::FeatureMap<double>& key,
                                                       const sliceprop::FeatureMap<double>& query, int r) {
  const int H = key.height, W = key.width, n = H * W;
  std::vector<std::vector<double>> a(n, std::vector<double>(n, 0.0));
  for (int uy = 0; uy < H; ++uy)
    for (int ux = 0; ux < W; ++ux) {
      const int u = uy * W + ux;
      double denom = 0.0;
      for (int vy = 0; vy < H; ++vy)
        for (int vx = 0; vx < W; ++vx) {
          if (std::abs(vy - uy) > r || std::abs(vx - ux) > r) continue;
          double dot = 0.0;
          for (int c = 0; c < key.channels(); ++c) dot += query.data(u, c) * key.data(vy * W + vx, c);
          a[u][vy * W + vx] = std::exp(dot);
          denom += a[u][vy * W + vx];
        }
      for (double& w : a[u]) w /= denom;
    }
  return a;
}

inline std::vector<std::vector<double>> dense_apply(const std::vector<std::vector<double>>& a,
                                                    const sliceprop::ChannelStack<double>& values) {
  std::vector<std::vector<double>> out(a.size(), std::vector<double>(values.channels(), 0.0));
  for (std::size_t u = 0; u < a.size(); ++u)
    for (std::size_t v = 0; v < a.size(); ++v)
      for (int c = 0; c < values.channels(); ++c) out[u][c] += a[u][v] * values.data(Index(v), c);
  return out;
}

template <typename S>
sliceprop::ChannelStack<S> random_stack(int h, int w, int c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  sliceprop::ChannelStack<S> out(h, w, c);
  for (Index i = 0; i < out.data.size(); ++i) out.data.data()[i] = static_cast<S>(n(rng));
  return out;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("sliceprop_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace oracle
