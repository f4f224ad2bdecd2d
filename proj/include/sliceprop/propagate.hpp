#pragma once

#include "sliceprop/correspondence.hpp"
#include "sliceprop/encoder.hpp"
#include "sliceprop/geig.hpp"
#include "sliceprop/volume.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace sliceprop {

/// How the PL branch of a dual-path model is fed at test time, when no
/// pseudo-labels exist:
///  - dual_reuse_prev: the running estimate M̂_i for both slices of the pair;
///  - dual_zero_pl: an all-zero mask for both.
/// single_path runs the slice branch only.
enum class PropagationMode { single_path, dual_reuse_prev, dual_zero_pl };

std::string to_string(PropagationMode m);
PropagationMode parse_propagation_mode(const std::string& s);

struct PropagationConfig {
  PropagationMode mode = PropagationMode::dual_reuse_prev;
  WindowSpec window{7};
  bool per_step_binarize = false;
  double output_threshold = 0.5;
  InputTransform transform;

  void validate() const;
};

struct TraceRecord {
  std::string direction;  // "seed", "forward" or "backward"
  int z = 0;
  double soft_mass = 0.0;
  double max_value = 0.0;
  std::optional<double> dice;
};

struct PropagationTrace {
  TraceRecord seed;
  std::vector<TraceRecord> steps;  // D - 1 entries: forward chain, then backward chain
};

struct PropagationResult {
  MaskVolume soft;
  MaskVolume binary;
  PropagationTrace trace;
};

/// M̂_next = A·M̂, clamped to [0, 1] and binarised when cfg.per_step_binarize.
ChannelStack<double> propagate_step(const AffinityMatrix<double>& affinity, const ChannelStack<double>& mask,
                                    const PropagationConfig& cfg);

/// Chains affinities slice by slice from `annotated_index` towards both ends,
/// M̂_{i±1} = A_{i→i±1} M̂_i. Takes no pseudo-label input by construction.
/// The annotated slice is copied verbatim into both outputs.
PropagationResult propagate_volume(const EncoderParams<double>& params, const Volume& volume, int annotated_index,
                                   const SliceMask& annotated_mask, const PropagationConfig& cfg);

/// Fills `dice` of every trace record from the binary output and ground truth.
void annotate_trace(PropagationTrace& trace, const MaskVolume& binary, const MaskVolume& gt);

/// Runs propagate_volume and returns the per-step diagnostics, with Dice when
/// `gt` is given.
PropagationTrace propagation_trace(const EncoderParams<double>& params, const Volume& volume, int annotated_index,
                                   const SliceMask& annotated_mask, const PropagationConfig& cfg,
                                   const MaskVolume* gt = nullptr);

/// trace.csv: direction,z,soft_mass,max_value[,dice]
void write_trace_csv(const PropagationTrace& trace, const std::filesystem::path& path);

}  // namespace sliceprop
