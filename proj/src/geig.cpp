#include "sliceprop/geig.hpp"

#include "sliceprop/errors.hpp"

#include <algorithm>
#include <cmath>

namespace sliceprop {

LatticeStep lattice_step(Direction d) {
  switch (d) {
    case Direction::horizontal:
      return {0, 1};
    case Direction::vertical:
      return {1, 0};
    case Direction::diagonal_up:
      return {-1, 1};
    case Direction::diagonal_down:
      return {1, 1};
  }
  return {0, 1};
}

std::string to_string(Direction d) {
  switch (d) {
    case Direction::horizontal:
      return "h";
    case Direction::vertical:
      return "v";
    case Direction::diagonal_up:
      return "du";
    case Direction::diagonal_down:
      return "dd";
  }
  return "?";
}

Direction parse_direction(const std::string& name) {
  if (name == "h" || name == "horizontal") return Direction::horizontal;
  if (name == "v" || name == "vertical") return Direction::vertical;
  if (name == "du" || name == "diagonal_up") return Direction::diagonal_up;
  if (name == "dd" || name == "diagonal_down") return Direction::diagonal_down;
  throw ConfigError("unknown direction '" + name + "'");
}

std::string to_string(InputKind k) { return k == InputKind::geig ? "geig" : "edge_profile"; }

InputKind parse_input_kind(const std::string& name) {
  if (name == "geig") return InputKind::geig;
  if (name == "edge_profile") return InputKind::edge_profile;
  throw ConfigError("unknown input transform '" + name + "'");
}

void GeigConfig::validate() const {
  if (directions.empty()) throw ConfigError("GEIG needs at least one direction");
  if (scales.empty()) throw ConfigError("GEIG needs at least one scale");
  for (int s : scales)
    if (s < 3 || s % 2 == 0) throw ConfigError("GEIG scales must be odd and >= 3, got " + std::to_string(s));
}

namespace {

inline int reflect(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

void check_scale(int rows, int cols, int scale) {
  if (scale < 1 || scale % 2 == 0) throw ConfigError("derivative window must be odd, got " + std::to_string(scale));
  if (scale >= 2 * std::min(rows, cols))
    throw ScaleTooLargeError("window " + std::to_string(scale) + " too large for a " + std::to_string(rows) +
                             "x" + std::to_string(cols) + " slice");
}

template <typename Scalar, typename Combine>
Image<Scalar> stencil(const Image<Scalar>& in, Direction direction, int scale, Combine combine) {
  const int rows = static_cast<int>(in.rows());
  const int cols = static_cast<int>(in.cols());
  check_scale(rows, cols, scale);
  const int h = (scale - 1) / 2;
  const auto st = lattice_step(direction);
  Image<Scalar> out(rows, cols);
  for (int y = 0; y < rows; ++y) {
    const int yp = reflect(y + h * st.dy, rows);
    const int ym = reflect(y - h * st.dy, rows);
    for (int x = 0; x < cols; ++x) {
      const int xp = reflect(x + h * st.dx, cols);
      const int xm = reflect(x - h * st.dx, cols);
      out(y, x) = combine(in(yp, xp), in(y, x), in(ym, xm));
    }
  }
  return out;
}

// Writes the row-wise softmax of `logits` into `out` (max-subtracted).
template <typename Scalar>
void softmax_rows(const PixelMatrix<Scalar>& logits, Eigen::Block<PixelMatrix<Scalar>> out) {
  for (Index p = 0; p < logits.rows(); ++p) {
    const Scalar m = logits.row(p).maxCoeff();
    auto e = (logits.row(p).array() - m).exp();
    out.row(p) = e / e.sum();
  }
}

template <typename Scalar>
GradientEnhancedSlice<Scalar> assemble(const Image<Scalar>& slice, const std::vector<Image<Scalar>>& responses,
                                       bool include_intensity, std::optional<IntensityRange> range) {
  const int rows = static_cast<int>(slice.rows());
  const int cols = static_cast<int>(slice.cols());
  const int n = static_cast<int>(responses.size());
  const int offset = include_intensity ? 1 : 0;
  GradientEnhancedSlice<Scalar> out(rows, cols, n + offset);
  if (include_intensity) {
    const Image<Scalar> norm = normalize_intensity(slice, range);
    out.data.col(0) = Eigen::Map<const Vector<Scalar>>(norm.data(), norm.size());
  }
  PixelMatrix<Scalar> logits(Index(rows) * cols, n);
  for (int c = 0; c < n; ++c) logits.col(c) = Eigen::Map<const Vector<Scalar>>(responses[c].data(), responses[c].size());
  softmax_rows<Scalar>(logits, out.data.block(0, offset, logits.rows(), n));
  return out;
}

}  // namespace

template <typename Scalar>
Image<Scalar> second_derivative(const Image<Scalar>& slice, Direction direction, int scale) {
  if (scale < 3) throw ConfigError("second-derivative scale must be >= 3");
  return stencil<Scalar>(slice, direction, scale,
                         [](Scalar plus, Scalar centre, Scalar minus) { return plus - Scalar(2) * centre + minus; });
}

template <typename Scalar>
Image<Scalar> first_derivative(const Image<Scalar>& slice, Direction direction, int scale) {
  return stencil<Scalar>(slice, direction, scale, [](Scalar plus, Scalar, Scalar minus) { return plus - minus; });
}

template <typename Scalar>
Image<Scalar> normalize_intensity(const Image<Scalar>& slice, std::optional<IntensityRange> range) {
  const double lo = range ? range->lo : static_cast<double>(slice.minCoeff());
  const double hi = range ? range->hi : static_cast<double>(slice.maxCoeff());
  if (!(hi > lo)) return Image<Scalar>::Zero(slice.rows(), slice.cols());
  return (slice - Scalar(lo)) / Scalar(hi - lo);
}

template <typename Scalar>
GradientEnhancedSlice<Scalar> geig_transform(const Image<Scalar>& slice, const GeigConfig& cfg,
                                             std::optional<IntensityRange> range) {
  cfg.validate();
  std::vector<Image<Scalar>> responses;
  responses.reserve(cfg.derivative_channels());
  for (Direction d : cfg.directions)
    for (int s : cfg.scales) responses.push_back(second_derivative(slice, d, s));
  return assemble(slice, responses, cfg.include_intensity, range);
}

template <typename Scalar>
GradientEnhancedSlice<Scalar> edge_profile(const Image<Scalar>& slice, const GeigConfig& cfg, int window,
                                           std::optional<IntensityRange> range) {
  if (cfg.directions.empty()) throw ConfigError("edge profile needs at least one direction");
  std::vector<Image<Scalar>> responses;
  responses.reserve(cfg.directions.size());
  for (Direction d : cfg.directions) responses.push_back(first_derivative(slice, d, window));
  return assemble(slice, responses, cfg.include_intensity, range);
}

int InputTransform::channels() const {
  if (kind == InputKind::geig) return geig.channels();
  return static_cast<int>(geig.directions.size()) + (geig.include_intensity ? 1 : 0);
}

template <typename Scalar>
GradientEnhancedSlice<Scalar> InputTransform::apply(const Image<Scalar>& slice,
                                                    std::optional<IntensityRange> range) const {
  if (kind == InputKind::geig) return geig_transform(slice, geig, range);
  return edge_profile(slice, geig, edge_window, range);
}

#define SLICEPROP_INSTANTIATE_GEIG(S)                                                                        \
  template Image<S> second_derivative<S>(const Image<S>&, Direction, int);                                   \
  template Image<S> first_derivative<S>(const Image<S>&, Direction, int);                                    \
  template Image<S> normalize_intensity<S>(const Image<S>&, std::optional<IntensityRange>);                  \
  template GradientEnhancedSlice<S> geig_transform<S>(const Image<S>&, const GeigConfig&,                    \
                                                      std::optional<IntensityRange>);                        \
  template GradientEnhancedSlice<S> edge_profile<S>(const Image<S>&, const GeigConfig&, int,                 \
                                                    std::optional<IntensityRange>);                          \
  template GradientEnhancedSlice<S> InputTransform::apply<S>(const Image<S>&, std::optional<IntensityRange>) \
      const;

SLICEPROP_INSTANTIATE_GEIG(float)
SLICEPROP_INSTANTIATE_GEIG(double)

}  // namespace sliceprop
