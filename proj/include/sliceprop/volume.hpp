#pragma once

#include "sliceprop/tensor.hpp"

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace sliceprop {

struct Shape3 {
  int depth = 0;
  int height = 0;
  int width = 0;

  std::size_t slice_size() const { return std::size_t(height) * std::size_t(width); }
  std::size_t size() const { return std::size_t(depth) * slice_size(); }
  auto operator<=>(const Shape3&) const = default;
};

std::string to_string(const Shape3& shape);

/// 3D intensity grid, axis order (z, y, x), z-major storage.
struct Volume {
  Shape3 shape;
  std::vector<float> data;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::string id;

  Volume() = default;
  Volume(Shape3 s, std::string volume_id = {})
      : shape(s), data(s.size(), 0.0f), id(std::move(volume_id)) {}

  float& at(int z, int y, int x) { return data[offset(z, y, x)]; }
  float at(int z, int y, int x) const { return data[offset(z, y, x)]; }

  Eigen::Map<Image<float>> slice(int z) {
    return {data.data() + std::size_t(z) * shape.slice_size(), shape.height, shape.width};
  }
  Eigen::Map<const Image<float>> slice(int z) const {
    return {data.data() + std::size_t(z) * shape.slice_size(), shape.height, shape.width};
  }

 private:
  std::size_t offset(int z, int y, int x) const {
    return (std::size_t(z) * shape.height + y) * shape.width + x;
  }
};

enum class MaskKind { soft, binary };

/// Per-voxel object probabilities in [0, 1]; binary masks hold only 0 and 1.
struct MaskVolume {
  Shape3 shape;
  std::vector<float> data;
  MaskKind kind = MaskKind::binary;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::string id;

  MaskVolume() = default;
  MaskVolume(Shape3 s, MaskKind k, std::string mask_id = {})
      : shape(s), data(s.size(), 0.0f), kind(k), id(std::move(mask_id)) {}

  float& at(int z, int y, int x) { return data[(std::size_t(z) * shape.height + y) * shape.width + x]; }
  float at(int z, int y, int x) const {
    return data[(std::size_t(z) * shape.height + y) * shape.width + x];
  }

  Eigen::Map<Image<float>> slice(int z) {
    return {data.data() + std::size_t(z) * shape.slice_size(), shape.height, shape.width};
  }
  Eigen::Map<const Image<float>> slice(int z) const {
    return {data.data() + std::size_t(z) * shape.slice_size(), shape.height, shape.width};
  }

  /// Foreground voxel count of slice z (values >= 0.5).
  std::size_t slice_area(int z) const;
  bool slice_empty(int z) const { return slice_area(z) == 0; }
};

void validate(const Volume& volume);
void validate(const MaskVolume& mask);
void validate_pair(const Volume& volume, const MaskVolume& mask);

/// Thresholds a soft mask at `threshold` (values >= threshold become 1).
MaskVolume binarize(const MaskVolume& mask, double threshold = 0.5);

// ---- persistence -------------------------------------------------------
//
// A volume or mask is stored as two files sharing a stem: `<stem>.json` (header)
// and `<stem>.raw` (little-endian payload, z-major then y then x).
// `path` may be given with or without a .json/.raw extension.

void save_volume(const Volume& volume, const std::filesystem::path& path);
Volume load_volume(const std::filesystem::path& path);
void save_mask(const MaskVolume& mask, const std::filesystem::path& path);
MaskVolume load_mask(const std::filesystem::path& path);

std::filesystem::path header_path(const std::filesystem::path& stem);
std::filesystem::path payload_path(const std::filesystem::path& stem);

// ---- synthetic phantoms ------------------------------------------------

enum class ObjectKind { ellipsoid, cylinder, blob };

struct PhantomObject {
  ObjectKind kind = ObjectKind::ellipsoid;
  std::array<double, 3> center{0, 0, 0};  // (z, y, x) in voxels
  std::array<double, 3> radii{1, 1, 1};   // (z, y, x); cylinders ignore the z radius
  double intensity = 1.0;
  int z_start = 0;
  int z_end = 0;
  // Distractor objects contribute intensity but are not part of the mask.
  bool in_mask = true;
};

struct PhantomSpec {
  Shape3 shape;
  std::vector<PhantomObject> objects;
  double background = 0.0;
  double background_noise_sigma = 0.0;
  std::uint64_t seed = 0;
  std::string id;
};

struct Phantom {
  Volume volume;
  MaskVolume mask;
};

Phantom synth_volume(const PhantomSpec& spec);

// ---- annotated-slice protocol -----------------------------------------

int largest_gt_slice_index(const MaskVolume& mask);
int pick_annotated_slice(const MaskVolume& mask, std::uint64_t seed);

}  // namespace sliceprop
