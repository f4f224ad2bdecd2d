#pragma once

#include "sliceprop/tensor.hpp"

#include <optional>
#include <string>
#include <vector>

namespace sliceprop {

enum class Direction { horizontal, vertical, diagonal_up, diagonal_down };

/// Lattice step (dy, dx) of a direction. Diagonals use (±1, ±1) without renormalisation.
struct LatticeStep {
  int dy;
  int dx;
};
LatticeStep lattice_step(Direction d);

std::string to_string(Direction d);
Direction parse_direction(const std::string& name);

struct GeigConfig {
  std::vector<Direction> directions{Direction::horizontal, Direction::vertical, Direction::diagonal_up,
                                    Direction::diagonal_down};
  std::vector<int> scales{3, 5};
  bool include_intensity = true;

  void validate() const;
  int derivative_channels() const { return static_cast<int>(directions.size() * scales.size()); }
  int channels() const { return derivative_channels() + (include_intensity ? 1 : 0); }
};

/// Fixed intensity window used to normalise the intensity channel to [0, 1].
struct IntensityRange {
  double lo = 0.0;
  double hi = 1.0;
};

/// Central second difference I(p+h·dir) - 2 I(p) + I(p-h·dir), h = (scale-1)/2,
/// reflect padding (index -1 mirrors to 1).
template <typename Scalar>
Image<Scalar> second_derivative(const Image<Scalar>& slice, Direction direction, int scale);

/// Central first difference I(p+h·dir) - I(p-h·dir), same stepping and padding.
template <typename Scalar>
Image<Scalar> first_derivative(const Image<Scalar>& slice, Direction direction, int scale);

/// Min-max normalisation to [0, 1]; a constant slice maps to 0. Without a range
/// the slice's own extrema are used.
template <typename Scalar>
Image<Scalar> normalize_intensity(const Image<Scalar>& slice, std::optional<IntensityRange> range = {});

/// Gradient-enhanced slice: optional intensity channel followed by the softmax
/// over all d·s second-derivative responses, direction-major then scale.
template <typename Scalar>
GradientEnhancedSlice<Scalar> geig_transform(const Image<Scalar>& slice, const GeigConfig& cfg,
                                             std::optional<IntensityRange> range = {});

/// First-order counterpart: softmax over first differences in cfg.directions at one
/// window size, intensity prepended when cfg.include_intensity. cfg.scales is ignored.
template <typename Scalar>
GradientEnhancedSlice<Scalar> edge_profile(const Image<Scalar>& slice, const GeigConfig& cfg, int window,
                                           std::optional<IntensityRange> range = {});

enum class InputKind { edge_profile, geig };

std::string to_string(InputKind k);
InputKind parse_input_kind(const std::string& name);

/// Input representation shared by training, propagation and the PL path.
struct InputTransform {
  InputKind kind = InputKind::geig;
  GeigConfig geig;
  int edge_window = 3;

  int channels() const;

  template <typename Scalar>
  GradientEnhancedSlice<Scalar> apply(const Image<Scalar>& slice,
                                      std::optional<IntensityRange> range = {}) const;
};

}  // namespace sliceprop
