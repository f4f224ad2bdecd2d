#include "sliceprop/correspondence.hpp"

#include "sliceprop/errors.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <fstream>
#include <limits>

namespace sliceprop {

void WindowSpec::validate(int height, int width) const {
  if (radius < 0) throw ConfigError("window radius must be nonnegative");
  if (side() > std::min(height, width))
    throw ConfigError("window side " + std::to_string(side()) + " exceeds slice extent " + std::to_string(height) +
                      "x" + std::to_string(width));
}

template <typename Scalar>
Scalar AffinityMatrix<Scalar>::operator()(int uy, int ux, int vy, int vx) const {
  const int dy = vy - uy;
  const int dx = vx - ux;
  if (std::abs(dy) > radius || std::abs(dx) > radius) return Scalar(0);
  return weights(Index(uy) * width + ux, (dy + radius) * side() + (dx + radius));
}

template <typename Scalar>
AffinityMatrix<Scalar> AffinityMatrix<Scalar>::identity(int height, int width, int radius) {
  AffinityMatrix a;
  a.height = height;
  a.width = width;
  a.radius = radius;
  a.weights = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>::Zero(Index(height) * width, a.side() * a.side());
  a.weights.col(radius * a.side() + radius).setOnes();
  return a;
}

namespace {

template <typename Scalar>
void require_same_grid(const ChannelStack<Scalar>& a, const ChannelStack<Scalar>& b, const char* what) {
  if (a.height != b.height || a.width != b.width)
    throw ShapeError(std::string(what) + ": spatial shapes differ (" + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" + std::to_string(b.width) + ")");
}

}  // namespace

template <typename Scalar>
AffinityMatrix<Scalar> compute_affinity(const FeatureMap<Scalar>& key, const FeatureMap<Scalar>& query,
                                        const WindowSpec& window) {
  require_same_grid(key, query, "compute_affinity");
  if (key.channels() != query.channels()) throw ShapeError("compute_affinity: key/query channel counts differ");
  window.validate(key.height, key.width);

  AffinityMatrix<Scalar> a;
  a.height = key.height;
  a.width = key.width;
  a.radius = window.radius;
  auto& w = a.weights;
  w.setConstant(key.pixels(), window.slots(), -std::numeric_limits<Scalar>::infinity());
  for_each_window_span(a.height, a.width, a.radius, [&](int slot, Index u, Index v, Index n) {
    w.col(slot).segment(u, n) =
        query.data.middleRows(u, n).cwiseProduct(key.data.middleRows(v, n)).rowwise().sum();
  });
  for_each_wrapped_entry(a.height, a.width, a.radius,
                         [&](int slot, Index u) { w(u, slot) = -std::numeric_limits<Scalar>::infinity(); });
  const Vector<Scalar> row_max = w.rowwise().maxCoeff();
  w = (w.colwise() - row_max).array().exp().matrix();
  const Vector<Scalar> row_sum = w.rowwise().sum();
  w = row_sum.cwiseInverse().asDiagonal() * w;
  return a;
}

template <typename Scalar>
AffinityGradients<Scalar> compute_affinity_backward(const FeatureMap<Scalar>& key, const FeatureMap<Scalar>& query,
                                                    const AffinityMatrix<Scalar>& affinity,
                                                    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& d_affinity) {
  const auto& A = affinity.weights;
  if (d_affinity.rows() != A.rows() || d_affinity.cols() != A.cols())
    throw ShapeError("compute_affinity_backward: gradient shape does not match affinity");
  // Softmax Jacobian, row by row: dlogit = A ⊙ (dA - Σ_k A·dA).
  const Vector<Scalar> inner = A.cwiseProduct(d_affinity).rowwise().sum();
  const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> d_logit =
      A.cwiseProduct(d_affinity.colwise() - inner);

  AffinityGradients<Scalar> g{FeatureMap<Scalar>(key.height, key.width, key.channels()),
                              FeatureMap<Scalar>(query.height, query.width, query.channels())};
  // Wrapped entries carry A = 0, hence d_logit = 0, so whole spans are safe here.
  for_each_window_span(affinity.height, affinity.width, affinity.radius, [&](int slot, Index u, Index v, Index n) {
    const auto coeff = d_logit.col(slot).segment(u, n).asDiagonal();
    g.query.data.middleRows(u, n).noalias() += coeff * key.data.middleRows(v, n);
    g.key.data.middleRows(v, n).noalias() += coeff * query.data.middleRows(u, n);
  });
  return g;
}

template <typename Scalar>
FeatureMap<Scalar> fuse_keys_queries(const FeatureMap<Scalar>& slice_features, const FeatureMap<Scalar>& pl_features) {
  require_same_grid(slice_features, pl_features, "fuse_keys_queries");
  FeatureMap<Scalar> out(slice_features.height, slice_features.width,
                         slice_features.channels() + pl_features.channels());
  out.data.leftCols(slice_features.channels()) = slice_features.data;
  out.data.rightCols(pl_features.channels()) = pl_features.data;
  return out;
}

template <typename Scalar>
AffinityMatrix<Scalar> oeg_affinity(const EncoderParams<Scalar>& params, const GradientEnhancedSlice<Scalar>& slice_j,
                                    const GradientEnhancedSlice<Scalar>& slice_j1,
                                    const GradientEnhancedSlice<Scalar>& pl_j,
                                    const GradientEnhancedSlice<Scalar>& pl_j1, const WindowSpec& window) {
  require_same_grid(slice_j, slice_j1, "oeg_affinity");
  require_same_grid(slice_j, pl_j, "oeg_affinity");
  require_same_grid(slice_j, pl_j1, "oeg_affinity");
  const auto key = fuse_keys_queries(encode(params, slice_j), encode(params, pl_j));
  const auto query = fuse_keys_queries(encode(params, slice_j1), encode(params, pl_j1));
  return compute_affinity(key, query, window);
}

template <typename Scalar>
ChannelStack<Scalar> apply_affinity(const AffinityMatrix<Scalar>& affinity, const ChannelStack<Scalar>& values) {
  if (values.height != affinity.height || values.width != affinity.width)
    throw ShapeError("apply_affinity: values grid does not match affinity");
  ChannelStack<Scalar> out(values.height, values.width, values.channels());
  for_each_window_span(affinity.height, affinity.width, affinity.radius, [&](int slot, Index u, Index v, Index n) {
    out.data.middleRows(u, n).noalias() +=
        affinity.weights.col(slot).segment(u, n).asDiagonal() * values.data.middleRows(v, n);
  });
  return out;
}

template <typename Scalar>
ApplyGradients<Scalar> apply_affinity_backward(const AffinityMatrix<Scalar>& affinity,
                                               const ChannelStack<Scalar>& values,
                                               const ChannelStack<Scalar>& d_out) {
  if (values.height != affinity.height || values.width != affinity.width || d_out.height != affinity.height ||
      d_out.width != affinity.width || d_out.channels() != values.channels())
    throw ShapeError("apply_affinity_backward: shapes do not match");
  ApplyGradients<Scalar> g;
  g.affinity = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>::Zero(affinity.weights.rows(),
                                                                          affinity.weights.cols());
  g.values = ChannelStack<Scalar>(values.height, values.width, values.channels());
  for_each_window_span(affinity.height, affinity.width, affinity.radius, [&](int slot, Index u, Index v, Index n) {
    g.affinity.col(slot).segment(u, n) =
        d_out.data.middleRows(u, n).cwiseProduct(values.data.middleRows(v, n)).rowwise().sum();
    g.values.data.middleRows(v, n).noalias() +=
        affinity.weights.col(slot).segment(u, n).asDiagonal() * d_out.data.middleRows(u, n);
  });
  for_each_wrapped_entry(affinity.height, affinity.width, affinity.radius,
                         [&](int slot, Index u) { g.affinity(u, slot) = Scalar(0); });
  return g;
}

void dump_affinity(const AffinityMatrix<double>& affinity, const std::filesystem::path& stem) {
  std::filesystem::path hp = stem, rp = stem;
  hp += ".json";
  rp += ".raw";
  std::ofstream h(hp, std::ios::binary | std::ios::trunc);
  if (!h) throw PersistenceError(hp.string(), "cannot open for writing");
  h << nlohmann::json{{"shape", {affinity.height, affinity.width}}, {"radius", affinity.radius}}.dump() << "\n";
  std::ofstream r(rp, std::ios::binary | std::ios::trunc);
  if (!r) throw PersistenceError(rp.string(), "cannot open for writing");
  const auto& w = affinity.weights;
  std::vector<char> row(std::size_t(w.cols()) * 4);
  for (Index u = 0; u < w.rows(); ++u) {
    for (Index k = 0; k < w.cols(); ++k) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(w(u, k)));
      for (int b = 0; b < 4; ++b) row[4 * k + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
    }
    r.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
  if (!h || !r) throw PersistenceError(stem.string(), "affinity dump failed");
}

#define SLICEPROP_INSTANTIATE_CORRESPONDENCE(S)                                                                   \
  template struct AffinityMatrix<S>;                                                                              \
  template AffinityMatrix<S> compute_affinity<S>(const FeatureMap<S>&, const FeatureMap<S>&, const WindowSpec&);  \
  template AffinityGradients<S> compute_affinity_backward<S>(                                                     \
      const FeatureMap<S>&, const FeatureMap<S>&, const AffinityMatrix<S>&,                                       \
      const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>&);                                                   \
  template FeatureMap<S> fuse_keys_queries<S>(const FeatureMap<S>&, const FeatureMap<S>&);                        \
  template AffinityMatrix<S> oeg_affinity<S>(const EncoderParams<S>&, const GradientEnhancedSlice<S>&,            \
                                             const GradientEnhancedSlice<S>&, const GradientEnhancedSlice<S>&,    \
                                             const GradientEnhancedSlice<S>&, const WindowSpec&);                 \
  template ChannelStack<S> apply_affinity<S>(const AffinityMatrix<S>&, const ChannelStack<S>&);                   \
  template ApplyGradients<S> apply_affinity_backward<S>(const AffinityMatrix<S>&, const ChannelStack<S>&,         \
                                                        const ChannelStack<S>&);

SLICEPROP_INSTANTIATE_CORRESPONDENCE(float)
SLICEPROP_INSTANTIATE_CORRESPONDENCE(double)

}  // namespace sliceprop
