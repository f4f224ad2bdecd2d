#pragma once

#include "sliceprop/volume.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace sliceprop {

/// What Dice means when both prediction and ground truth are empty.
enum class EmptyPolicy { one, skip };

/// 2|P∩G| / (|P| + |G|) over binary slices; 1 when both are empty.
double dice(const Eigen::Ref<const Image<float>>& pred, const Eigen::Ref<const Image<float>>& gt);
double dice(const MaskVolume& pred, const MaskVolume& gt);

struct DecayPoint {
  int distance = 0;
  double mean_dice = 0.0;
  int slices = 0;
};

/// Mean per-slice Dice grouped by |z - annotated_index|, ascending distance.
/// With EmptyPolicy::skip, slices where both masks are empty are left out.
std::vector<DecayPoint> dice_decay_curve(const MaskVolume& pred, const MaskVolume& gt, int annotated_index,
                                         EmptyPolicy policy = EmptyPolicy::one);

struct VolumeScore {
  std::string volume_id;
  std::string family;
  int annotated_index = 0;
  std::vector<double> slice_dice;
  double volume_dice = 0.0;  // 3D Dice over the whole volume
};

/// One propagation run (one model, one mode, one seed) over a test set.
struct RunResult {
  std::string run_id;
  std::string config_digest;
  std::uint64_t seed = 0;
  std::vector<VolumeScore> volumes;

  double mean() const;  // mean volume Dice
  double stddev() const;  // population std of volume Dice
};

VolumeScore score_volume(const MaskVolume& pred, const MaskVolume& gt, int annotated_index,
                         const std::string& family);

struct SummaryRow {
  std::string run;
  double mean = 0.0;  // mean over seeds of each seed's mean volume Dice
  double std = 0.0;   // population std over seeds
  int n = 0;          // seeds
  std::map<std::string, double> family_mean;
};

/// Groups results by run id (repeated seeds) and aggregates, in first-seen order.
std::vector<SummaryRow> summarize_runs(const std::vector<RunResult>& results);

void write_results_csv(const std::vector<RunResult>& results, const std::filesystem::path& path);
void write_summary_csv(const std::vector<SummaryRow>& rows, const std::filesystem::path& path);

struct DecayRow {
  std::string run;
  int distance = 0;
  double mean_dice = 0.0;
};
/// Decay curves pooled over every volume and seed of each run.
std::vector<DecayRow> decay_table(const std::vector<RunResult>& results);
void write_decay_csv(const std::vector<DecayRow>& rows, const std::filesystem::path& path);

}  // namespace sliceprop
