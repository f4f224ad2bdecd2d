#pragma once

#include "sliceprop/correspondence.hpp"
#include "sliceprop/encoder.hpp"
#include "sliceprop/geig.hpp"
#include "sliceprop/volume.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sliceprop {

/// Bootstrap PLs: single-path propagation of the annotated slice through the
/// whole volume with the bootstrap (edge-profile) model. Soft output; the
/// annotated slice is copied verbatim.
MaskVolume generate_pls(const EncoderParams<double>& bootstrap_params, const Volume& volume, int annotated_index,
                        const SliceMask& annotated_mask, const WindowSpec& window, const InputTransform& transform);

/// 3D PL refinement stage. Implementations must be reentrant.
class Refiner {
 public:
  virtual ~Refiner() = default;
  virtual std::string name() const = 0;
  virtual MaskKind output_kind() const = 0;
  virtual MaskVolume refine(const Volume& volume, const MaskVolume& pls) const = 0;
};

class IdentityRefiner final : public Refiner {
 public:
  std::string name() const override { return "identity"; }
  MaskKind output_kind() const override { return MaskKind::soft; }
  MaskVolume refine(const Volume& volume, const MaskVolume& pls) const override;
};

/// Binarise at 0.5, keep the largest 6-connected component, then close with a
/// 3×3×3 cube (erosion ignores out-of-volume neighbours, so closing never shrinks).
class MorphologicalRefiner final : public Refiner {
 public:
  std::string name() const override { return "morph"; }
  MaskKind output_kind() const override { return MaskKind::binary; }
  MaskVolume refine(const Volume& volume, const MaskVolume& pls) const override;
};

struct LearnedRefinerConfig {
  std::vector<int> hidden_channels{8, 8};
  int crop = 16;
  int steps = 300;
  double learning_rate = 1e-3;
  double weight_decay = 0.005;
  double corruption = 0.1;  // probability of flipping an input PL voxel during training
  std::uint64_t seed = 0;
};

/// Tiny 3-layer 3D convolutional denoiser mapping (normalised intensity, PL) to
/// a refined PL probability. Trained on random crops with corrupted PL inputs
/// against the binarised PLs themselves.
class LearnedRefiner final : public Refiner {
 public:
  explicit LearnedRefiner(LearnedRefinerConfig cfg = {});
  ~LearnedRefiner() override;
  LearnedRefiner(LearnedRefiner&&) noexcept;
  LearnedRefiner& operator=(LearnedRefiner&&) noexcept;

  std::string name() const override { return "learned"; }
  MaskKind output_kind() const override { return MaskKind::soft; }

  /// Returns the mean training loss of the last 10% of steps.
  double fit(std::span<const Volume> volumes, std::span<const MaskVolume> pls);
  bool trained() const;
  MaskVolume refine(const Volume& volume, const MaskVolume& pls) const override;

 private:
  struct Net;
  LearnedRefinerConfig cfg_;
  std::unique_ptr<Net> net_;
};

std::unique_ptr<Refiner> make_refiner(const std::string& name, const LearnedRefinerConfig& learned = {});

/// Delegates to the refiner, wrapping failures in RefinementError and checking
/// that the result is a valid mask of the input shape.
MaskVolume refine_pls(const Refiner& refiner, const Volume& volume, const MaskVolume& pls);

/// Re-imposes the annotated slice after refinement.
void impose_annotation(MaskVolume& pls, int annotated_index, const SliceMask& annotated_mask);

struct PlQualityRow {
  int z = 0;
  double dice = 0.0;
  int distance = 0;
};

/// Per-slice Dice of the binarised PLs against ground truth.
std::vector<PlQualityRow> pl_quality_report(const MaskVolume& pls, const MaskVolume& gt, int annotated_index);
void write_pl_quality_csv(const std::vector<PlQualityRow>& rows, const std::filesystem::path& path);

}  // namespace sliceprop
