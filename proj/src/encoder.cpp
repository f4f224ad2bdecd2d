#include "sliceprop/encoder.hpp"

#include "sliceprop/errors.hpp"

#include "im2col.hpp"

#include <cmath>
#include <random>

namespace sliceprop {

void EncoderConfig::validate() const {
  if (in_channels < 1) throw ConfigError("encoder in_channels must be positive");
  for (int h : hidden_channels)
    if (h < 1) throw ConfigError("encoder hidden widths must be positive");
  if (feature_dim < 2) throw ConfigError("encoder feature_dim must be >= 2");
  if (kernel_size < 1 || kernel_size % 2 == 0) throw ConfigError("encoder kernel_size must be odd");
}

std::vector<int> EncoderConfig::widths() const {
  std::vector<int> w{in_channels};
  w.insert(w.end(), hidden_channels.begin(), hidden_channels.end());
  w.push_back(feature_dim);
  return w;
}

std::size_t EncoderConfig::parameter_count() const {
  const auto w = widths();
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < w.size(); ++l)
    n += std::size_t(kernel_size) * kernel_size * w[l] * w[l + 1] + w[l + 1];
  return n;
}

template <typename Scalar>
std::size_t EncoderParams<Scalar>::size() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

template <typename Scalar>
Vector<Scalar> EncoderParams<Scalar>::flatten() const {
  Vector<Scalar> flat(size());
  Index at = 0;
  for (const auto& l : layers) {
    flat.segment(at, l.weight.size()) = Eigen::Map<const Vector<Scalar>>(l.weight.data(), l.weight.size());
    at += l.weight.size();
    flat.segment(at, l.bias.size()) = l.bias;
    at += l.bias.size();
  }
  return flat;
}

template <typename Scalar>
void EncoderParams<Scalar>::assign(const Vector<Scalar>& flat) {
  if (static_cast<std::size_t>(flat.size()) != size())
    throw ShapeError("parameter vector has " + std::to_string(flat.size()) + " entries, expected " +
                     std::to_string(size()));
  Index at = 0;
  for (auto& l : layers) {
    Eigen::Map<Vector<Scalar>>(l.weight.data(), l.weight.size()) = flat.segment(at, l.weight.size());
    at += l.weight.size();
    l.bias = flat.segment(at, l.bias.size());
    at += l.bias.size();
  }
}

template <typename Scalar>
bool EncoderParams<Scalar>::all_finite() const {
  for (const auto& l : layers)
    if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
  return true;
}

template <typename Scalar>
EncoderParams<Scalar> EncoderParams<Scalar>::zeros_like(const EncoderParams& like) {
  EncoderParams out;
  out.config = like.config;
  for (const auto& l : like.layers)
    out.layers.push_back({PixelMatrix<Scalar>::Zero(l.weight.rows(), l.weight.cols()), Vector<Scalar>::Zero(l.bias.size())});
  return out;
}

template <typename Scalar>
EncoderParams<Scalar> init_encoder(const EncoderConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  EncoderParams<Scalar> p;
  p.config = cfg;
  const auto w = cfg.widths();
  const int taps = cfg.kernel_size * cfg.kernel_size;
  for (std::size_t l = 0; l + 1 < w.size(); ++l) {
    const int fan_in = taps * w[l];
    const double bound = std::sqrt(6.0 / fan_in);
    std::uniform_real_distribution<double> weight(-bound, bound);
    std::uniform_real_distribution<double> bias(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
    ConvLayer<Scalar> layer{PixelMatrix<Scalar>(fan_in, w[l + 1]), Vector<Scalar>(w[l + 1])};
    for (Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = static_cast<Scalar>(weight(rng));
    for (Index i = 0; i < layer.bias.size(); ++i) layer.bias[i] = static_cast<Scalar>(bias(rng));
    p.layers.push_back(std::move(layer));
  }
  return p;
}

namespace {

constexpr double kNormEps = 1e-12;

}  // namespace

template <typename Scalar>
FeatureMap<Scalar> encode(const EncoderParams<Scalar>& params, const GradientEnhancedSlice<Scalar>& input,
                          EncoderTape<Scalar>* tape) {
  const auto& cfg = params.config;
  if (input.channels() != cfg.in_channels)
    throw ShapeError("encoder expects " + std::to_string(cfg.in_channels) + " input channels, got " +
                     std::to_string(input.channels()));
  const int k = cfg.kernel_size;
  if (tape) {
    tape->height = input.height;
    tape->width = input.width;
    tape->columns.clear();
    tape->pre_activations.clear();
  }
  PixelMatrix<Scalar> act = input.data;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& layer = params.layers[l];
    PixelMatrix<Scalar> cols = detail::im2col(act, input.height, input.width, k);
    PixelMatrix<Scalar> z = cols * layer.weight;
    z.rowwise() += layer.bias.transpose();
    const bool last = l + 1 == params.layers.size();
    act = last ? z : PixelMatrix<Scalar>(z.cwiseMax(Scalar(0)));
    if (tape) {
      tape->columns.push_back(std::move(cols));
      tape->pre_activations.push_back(std::move(z));
    }
  }
  FeatureMap<Scalar> out;
  out.height = input.height;
  out.width = input.width;
  if (cfg.l2_normalize) {
    Vector<Scalar> norms = (act.rowwise().squaredNorm().array() + Scalar(kNormEps)).sqrt();
    out.data = norms.cwiseInverse().asDiagonal() * act;
    if (tape) tape->norms = std::move(norms);
  } else {
    out.data = std::move(act);
  }
  return out;
}

template <typename Scalar>
EncoderGradients<Scalar> encode_backward(const EncoderParams<Scalar>& params, const EncoderTape<Scalar>& tape,
                                         const FeatureMap<Scalar>& upstream) {
  const auto& cfg = params.config;
  if (upstream.height != tape.height || upstream.width != tape.width || upstream.channels() != cfg.feature_dim)
    throw ShapeError("upstream gradient shape does not match the encoder output");
  if (tape.columns.size() != params.layers.size()) throw ShapeError("encoder tape does not match parameters");

  EncoderGradients<Scalar> g{EncoderParams<Scalar>::zeros_like(params), {}};
  PixelMatrix<Scalar> dz = upstream.data;
  if (cfg.l2_normalize) {
    // y = f/|f|  =>  df = (dy - y (y·dy)) / |f|
    const PixelMatrix<Scalar>& f = tape.pre_activations.back();
    const Vector<Scalar> inv = tape.norms.cwiseInverse();
    const PixelMatrix<Scalar> y = inv.asDiagonal() * f;
    const Vector<Scalar> proj = y.cwiseProduct(dz).rowwise().sum();
    dz = inv.asDiagonal() * (dz - proj.asDiagonal() * y);
  }
  const int k = cfg.kernel_size;
  const auto widths = cfg.widths();
  for (std::size_t l = params.layers.size(); l-- > 0;) {
    const auto& layer = params.layers[l];
    g.params.layers[l].weight.noalias() = tape.columns[l].transpose() * dz;
    g.params.layers[l].bias = dz.colwise().sum().transpose();
    PixelMatrix<Scalar> dcols = dz * layer.weight.transpose();
    PixelMatrix<Scalar> dx = detail::col2im(dcols, tape.height, tape.width, k, widths[l]);
    if (l > 0)
      dz = dx.cwiseProduct(PixelMatrix<Scalar>((tape.pre_activations[l - 1].array() > Scalar(0)).template cast<Scalar>()));
    else {
      g.input.height = tape.height;
      g.input.width = tape.width;
      g.input.data = std::move(dx);
    }
  }
  return g;
}

template <typename Scalar>
EncoderGradients<Scalar> encode_backward(const EncoderParams<Scalar>& params,
                                         const GradientEnhancedSlice<Scalar>& input,
                                         const FeatureMap<Scalar>& upstream) {
  EncoderTape<Scalar> tape;
  encode(params, input, &tape);
  return encode_backward(params, tape, upstream);
}

#define SLICEPROP_INSTANTIATE_ENCODER(S)                                                                       \
  template struct EncoderParams<S>;                                                                            \
  template EncoderParams<S> init_encoder<S>(const EncoderConfig&);                                             \
  template FeatureMap<S> encode<S>(const EncoderParams<S>&, const GradientEnhancedSlice<S>&, EncoderTape<S>*); \
  template EncoderGradients<S> encode_backward<S>(const EncoderParams<S>&, const EncoderTape<S>&,              \
                                                  const FeatureMap<S>&);                                       \
  template EncoderGradients<S> encode_backward<S>(const EncoderParams<S>&, const GradientEnhancedSlice<S>&,    \
                                                  const FeatureMap<S>&);

SLICEPROP_INSTANTIATE_ENCODER(float)
SLICEPROP_INSTANTIATE_ENCODER(double)

}  // namespace sliceprop
