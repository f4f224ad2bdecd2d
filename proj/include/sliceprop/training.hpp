#pragma once

#include "sliceprop/correspondence.hpp"
#include "sliceprop/encoder.hpp"
#include "sliceprop/geig.hpp"
#include "sliceprop/volume.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sliceprop {

enum class PathMode { single_path, dual_path };
enum class LossKind { l1, mse };

std::string to_string(PathMode m);
std::string to_string(LossKind k);
PathMode parse_path_mode(const std::string& s);
LossKind parse_loss_kind(const std::string& s);

struct TrainConfig {
  PathMode mode = PathMode::single_path;
  double learning_rate = 1e-4;
  double weight_decay = 0.005;
  int epochs = 4;
  int batch_size = 1;
  WindowSpec window{7};
  LossKind loss = LossKind::l1;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
};

/// Intensity window of a whole volume; the intensity channel and the
/// reconstruction target are normalised with it.
IntensityRange volume_range(const Volume& volume);

// ---- pair sampling -----------------------------------------------------

/// Adjacent pair (slice, slice + 1) of volume `volume`.
struct PairRef {
  std::size_t volume = 0;
  int slice = 0;
};

/// Deterministic epoch-wise shuffling of every adjacent slice pair.
class PairSampler {
 public:
  PairSampler(std::vector<int> depths, std::uint64_t seed);

  std::size_t pairs_per_epoch() const { return pairs_.size(); }
  /// The shuffled pair order of epoch `epoch`.
  std::vector<PairRef> epoch(int epoch) const;

 private:
  std::vector<PairRef> pairs_;
  std::uint64_t seed_;
};

/// Builds the sampler, skipping volumes with fewer than two slices (with a
/// warning on stderr). Dual-path sampling requires shape-matched PLs.
PairSampler sample_pairs(std::span<const Volume> volumes, std::span<const MaskVolume> pls, PathMode mode,
                         std::uint64_t seed);

// ---- per-pair loss -----------------------------------------------------

/// Everything one optimisation step needs for a pair (S_j, S_j+1).
struct TrainingItem {
  GradientEnhancedSlice<double> slice_j;
  GradientEnhancedSlice<double> slice_j1;
  GradientEnhancedSlice<double> pl_j;   // dual path only
  GradientEnhancedSlice<double> pl_j1;  // dual path only
  ChannelStack<double> source;          // normalised intensity of S_j
  ChannelStack<double> target;          // normalised intensity of S_j+1
};

/// Transformed inputs of a whole volume, computed once before training.
struct PreparedVolume {
  std::string id;
  std::vector<GradientEnhancedSlice<double>> slices;
  std::vector<GradientEnhancedSlice<double>> pls;
  std::vector<ChannelStack<double>> intensities;

  TrainingItem item(int j) const;
};

PreparedVolume prepare_volume(const Volume& volume, const MaskVolume* pls, const InputTransform& transform);

/// PL slices go through the same transform as intensity slices, on a fixed [0, 1] window.
GradientEnhancedSlice<double> transform_mask_slice(const Image<double>& mask_slice, const InputTransform& transform);

struct ReconstructionLoss {
  double loss = 0.0;
  Eigen::MatrixXd d_affinity;
  ChannelStack<double> reconstruction;
};

/// L = mean_u |(A·source)(u) - target(u)| (l1) or its square (mse), with dL/dA.
ReconstructionLoss reconstruction_loss(const AffinityMatrix<double>& affinity, const ChannelStack<double>& source,
                                       const ChannelStack<double>& target, LossKind kind);

struct LossGradient {
  double loss = 0.0;
  EncoderParams<double> params;
  GradientEnhancedSlice<double> d_pl_j;
  GradientEnhancedSlice<double> d_pl_j1;
};

/// Forward (encode, fuse, affinity, reconstruct) and full backward for one pair.
LossGradient loss_and_gradient(const EncoderParams<double>& params, const TrainingItem& item, PathMode mode,
                               const WindowSpec& window, LossKind loss);

double item_loss(const EncoderParams<double>& params, const TrainingItem& item, PathMode mode,
                 const WindowSpec& window, LossKind loss);

// ---- optimiser ---------------------------------------------------------

/// Adaptive-moment update with decoupled weight decay:
/// θ ← θ(1 - lr·wd) - lr·m̂/(√v̂ + ε).
class AdamW {
 public:
  AdamW(double learning_rate, double weight_decay, double beta1, double beta2, double epsilon);
  void step(Vector<double>& params, const Vector<double>& grad);
  long steps() const { return t_; }

 private:
  double lr_, wd_, b1_, b2_, eps_;
  Vector<double> m_, v_;
  long t_ = 0;
};

// ---- training loop -----------------------------------------------------

struct TrainLogRow {
  long step = 0;
  int epoch = 0;
  std::string pair_id;
  double loss = 0.0;
};

struct TrainResult {
  EncoderParams<double> params;
  std::vector<TrainLogRow> log;
  std::vector<double> epoch_mean_loss;
};

/// Self-supervised slice-reconstruction training. `pls` is required (and
/// shape-matched) in dual-path mode and ignored otherwise. `encoder.in_channels`
/// is overwritten with the transform's channel count.
TrainResult train(const TrainConfig& cfg, EncoderConfig encoder, const InputTransform& transform,
                  std::span<const Volume> volumes, std::span<const MaskVolume> pls = {});

// ---- gradient check ----------------------------------------------------

struct GradientCheckReport {
  std::size_t parameters = 0;
  double max_relative_error = 0.0;       // over all parameters
  double max_relative_error_pl = 0.0;    // over PL-path inputs (dual path)
  double pl_input_gradient_norm = 0.0;
  double analytic_norm = 0.0;
  std::size_t kink_retries = 0;      // coordinates re-probed with a smaller step
  std::size_t unresolved_kinks = 0;  // coordinates still straddling a kink at the smallest step
  bool passed = false;
};

/// Analytic versus central finite-difference gradients (step `h`) of the
/// end-to-end loss; passes when every relative error is below `threshold`.
/// Relative error is |a - n| / max(|a|, |n|, floor). A coordinate whose probes
/// flip a ReLU or an l1 residual sign is re-probed with h halved, up to 12 times;
/// a coordinate that never settles fails the check.
GradientCheckReport gradient_check(const TrainConfig& cfg, const EncoderParams<double>& params,
                                   const TrainingItem& item, double h = 1e-4, double threshold = 1e-4,
                                   double floor = 1e-8);

}  // namespace sliceprop
