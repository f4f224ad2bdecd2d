#pragma once

#include "sliceprop/encoder.hpp"
#include "sliceprop/geig.hpp"
#include "sliceprop/propagate.hpp"
#include "sliceprop/pseudolabel.hpp"
#include "sliceprop/training.hpp"
#include "sliceprop/volume.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace sliceprop {

// Staged on-disk pipeline behind the `sliceprop` command line tool. Every
// stage reads its inputs from, and writes its outputs below, one output root:
//
//   data/            synthetic phantoms (train/ and test/) + manifest
//   bootstrap/       single-path edge-profile model, train_log.csv
//   pls/raw/         bootstrap pseudo-labels of the train volumes
//   pls/<refiner>/   refined pseudo-labels
//   oeg/<name>/      dual-path model trained on PLs
//   runs/<run>/      propagated test masks and traces of one model + mode
//   eval/            results.csv, summary.csv, decay.csv
//   plot/            decay.csv and an optional decay.ppm raster
//
// Each stage directory holds a manifest.json with the resolved config and the
// SHA-256 of every input and output file, relative to the output root.

/// Flat key=value configuration covering every stage. Every key has a default;
/// unknown keys are rejected with ConfigError.
class PipelineConfig {
 public:
  PipelineConfig();

  void set(const std::string& key, const std::string& value);
  /// Merges a file holding either a JSON object or `key = value` lines
  /// (blank lines and `#` comments allowed).
  void merge_file(const std::filesystem::path& path);

  const std::string& get(const std::string& key) const;
  int get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<int> get_ints(const std::string& key) const;
  std::vector<std::string> get_list(const std::string& key) const;

  const std::map<std::string, std::string>& values() const { return values_; }
  /// The fully resolved config as a JSON object (keys sorted).
  std::string to_json() const;
  std::string digest() const;

 private:
  std::map<std::string, std::string> values_;
};

/// Default values of every known key.
const std::map<std::string, std::string>& default_config();

GeigConfig geig_config(const PipelineConfig& cfg);
InputTransform input_transform(const PipelineConfig& cfg, InputKind kind);
EncoderConfig encoder_config(const PipelineConfig& cfg);
TrainConfig train_config(const PipelineConfig& cfg, PathMode mode);
LearnedRefinerConfig refiner_config(const PipelineConfig& cfg);
PropagationConfig propagation_config(const PipelineConfig& cfg);

// ---- phantom families --------------------------------------------------

/// "cylinder" (alias "continuity"), "object_appears", "object_ends".
const std::vector<std::string>& phantom_families();
std::string canonical_family(const std::string& name);

struct FamilyPhantom {
  PhantomSpec spec;
  /// First slice of the discontinuity: where the distractor appears, or the
  /// first slice past the end of the segmented object. Unset for cylinders.
  std::optional<int> event_z;
};

/// Deterministic phantom `index` of `family`; `seed` fixes geometry and noise.
FamilyPhantom family_phantom(const std::string& family, Shape3 shape, double noise, std::uint64_t seed);

// ---- annotated slices --------------------------------------------------

/// Annotated slice of a volume under the `annotate` policy:
/// "protocol" (pick_annotated_slice), "largest" or "middle".
int choose_annotated_slice(const MaskVolume& gt, const std::string& policy, std::uint64_t seed);

// ---- stages ------------------------------------------------------------

void cmd_synth(const PipelineConfig& cfg, const std::filesystem::path& out);
void cmd_train_bootstrap(const PipelineConfig& cfg, const std::filesystem::path& out);
void cmd_gen_pls(const PipelineConfig& cfg, const std::filesystem::path& out);
void cmd_refine_pls(const PipelineConfig& cfg, const std::filesystem::path& out);
void cmd_train_oeg(const PipelineConfig& cfg, const std::filesystem::path& out);
void cmd_propagate(const PipelineConfig& cfg, const std::filesystem::path& out);
void cmd_eval(const PipelineConfig& cfg, const std::filesystem::path& out);
void cmd_plot(const PipelineConfig& cfg, const std::filesystem::path& out);

/// Name of the run directory cmd_propagate writes for this config.
std::string run_name(const PipelineConfig& cfg);

/// One test volume of a data set, as listed in data/manifest.json.
struct DataEntry {
  std::string id;
  std::string family;
  std::string split;  // "train" or "test"
  std::filesystem::path volume;  // stems relative to the output root
  std::filesystem::path mask;
  std::optional<int> event_z;
};

std::vector<DataEntry> read_data_manifest(const std::filesystem::path& out);

/// Annotated slice per test volume id, as recorded by cmd_propagate.
std::map<std::string, int> read_run_annotations(const std::filesystem::path& run_dir);

}  // namespace sliceprop
