#pragma once

#include "sliceprop/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace sliceprop {

enum class Nonlinearity { relu };

struct EncoderConfig {
  int in_channels = 9;
  std::vector<int> hidden_channels{16, 16};
  int feature_dim = 16;
  int kernel_size = 3;
  Nonlinearity nonlinearity = Nonlinearity::relu;
  bool l2_normalize = false;
  std::uint64_t seed = 0;

  void validate() const;
  /// Channel widths of every layer boundary: in, hidden..., feature_dim.
  std::vector<int> widths() const;
  std::size_t parameter_count() const;
};

/// Same-padded convolution weights. Row (ky*k + kx)*in + c of `weight` holds the
/// output-channel weights for kernel tap (ky, kx) and input channel c.
template <typename Scalar>
struct ConvLayer {
  PixelMatrix<Scalar> weight;
  Vector<Scalar> bias;
};

/// Encoder parameters θ. The same object serves both dual-path branches.
/// Flat layout (used by checkpoints and the optimiser): for each layer in order,
/// `weight` in row-major order followed by `bias`.
template <typename Scalar>
struct EncoderParams {
  EncoderConfig config;
  std::vector<ConvLayer<Scalar>> layers;

  std::size_t size() const;
  Vector<Scalar> flatten() const;
  void assign(const Vector<Scalar>& flat);
  bool all_finite() const;
  /// Zero-valued tensors shaped like `like`.
  static EncoderParams zeros_like(const EncoderParams& like);

  template <typename Other>
  EncoderParams<Other> cast() const {
    EncoderParams<Other> out;
    out.config = config;
    for (const auto& l : layers) out.layers.push_back({l.weight.template cast<Other>(), l.bias.template cast<Other>()});
    return out;
  }
};

template <typename Scalar>
EncoderParams<Scalar> init_encoder(const EncoderConfig& cfg);

/// Intermediate values kept by a forward pass for the backward pass.
template <typename Scalar>
struct EncoderTape {
  int height = 0;
  int width = 0;
  std::vector<PixelMatrix<Scalar>> columns;         // im2col input of every layer
  std::vector<PixelMatrix<Scalar>> pre_activations;  // conv outputs before the nonlinearity
  Vector<Scalar> norms;                              // per-pixel feature norms (l2_normalize only)
};

template <typename Scalar>
FeatureMap<Scalar> encode(const EncoderParams<Scalar>& params, const GradientEnhancedSlice<Scalar>& input,
                          EncoderTape<Scalar>* tape = nullptr);

template <typename Scalar>
struct EncoderGradients {
  EncoderParams<Scalar> params;
  GradientEnhancedSlice<Scalar> input;
};

template <typename Scalar>
EncoderGradients<Scalar> encode_backward(const EncoderParams<Scalar>& params, const EncoderTape<Scalar>& tape,
                                         const FeatureMap<Scalar>& upstream);

template <typename Scalar>
EncoderGradients<Scalar> encode_backward(const EncoderParams<Scalar>& params,
                                         const GradientEnhancedSlice<Scalar>& input,
                                         const FeatureMap<Scalar>& upstream);

// ---- checkpoints -------------------------------------------------------
//
// `<stem>.json` holds {"config": ..., "format": "f64", "sha": <sha256 of payload>,
// "meta": {...}}; `<stem>.bin` holds the flat parameter vector as little-endian f64.

struct Checkpoint {
  EncoderParams<double> params;
  std::string meta_json = "{}";  // free-form JSON object, e.g. the input transform
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& stem);
Checkpoint load_checkpoint(const std::filesystem::path& stem);

std::string encoder_config_json(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_json(const std::string& text);

}  // namespace sliceprop
