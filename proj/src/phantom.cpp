#include "sliceprop/errors.hpp"
#include "sliceprop/volume.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace sliceprop {

namespace {

struct Lobe {
  std::array<double, 3> center;
  std::array<double, 3> radii;
};

// Normalised squared ellipsoid radius of voxel (z, y, x).
double rho2(const std::array<double, 3>& c, const std::array<double, 3>& r, int z, int y, int x) {
  const double dz = (z - c[0]) / r[0];
  const double dy = (y - c[1]) / r[1];
  const double dx = (x - c[2]) / r[2];
  return dz * dz + dy * dy + dx * dx;
}

std::vector<Lobe> blob_lobes(const PhantomObject& obj, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> count(2, 4);
  std::uniform_real_distribution<double> shift(-0.5, 0.5);
  std::uniform_real_distribution<double> scale(0.6, 1.0);
  const int n = count(rng);
  std::vector<Lobe> lobes(n);
  for (auto& lobe : lobes)
    for (int a = 0; a < 3; ++a) {
      lobe.center[a] = obj.center[a] + shift(rng) * obj.radii[a];
      lobe.radii[a] = obj.radii[a] * scale(rng);
    }
  return lobes;
}

}  // namespace

Phantom synth_volume(const PhantomSpec& spec) {
  const Shape3& s = spec.shape;
  if (s.depth < 1 || s.height < 1 || s.width < 1)
    throw DegenerateSpecError("phantom shape " + to_string(s) + " is empty");
  for (const auto& obj : spec.objects) {
    if (!(obj.z_start >= 0 && obj.z_start < obj.z_end && obj.z_end <= s.depth))
      throw DegenerateSpecError("object z-range [" + std::to_string(obj.z_start) + ", " +
                                std::to_string(obj.z_end) + ") outside [0, D)");
    for (double r : obj.radii)
      if (!(r > 0.0)) throw DegenerateSpecError("object radii must be positive");
  }
  if (spec.background_noise_sigma < 0.0)
    throw DegenerateSpecError("background noise sigma must be nonnegative");

  std::mt19937_64 rng(spec.seed);
  Phantom out{Volume(s, spec.id), MaskVolume(s, MaskKind::binary, spec.id)};
  std::fill(out.volume.data.begin(), out.volume.data.end(), static_cast<float>(spec.background));

  // Objects are painted in order; later objects overwrite earlier intensities.
  for (std::size_t k = 0; k < spec.objects.size(); ++k) {
    const auto& obj = spec.objects[k];
    const auto lobes = obj.kind == ObjectKind::blob ? blob_lobes(obj, rng) : std::vector<Lobe>{};
    std::size_t support = 0;
    for (int z = obj.z_start; z < obj.z_end; ++z)
      for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) {
          bool inside = false;
          switch (obj.kind) {
            case ObjectKind::ellipsoid:
              inside = rho2(obj.center, obj.radii, z, y, x) <= 1.0;
              break;
            case ObjectKind::cylinder: {
              const double dy = (y - obj.center[1]) / obj.radii[1];
              const double dx = (x - obj.center[2]) / obj.radii[2];
              inside = dy * dy + dx * dx <= 1.0;
              break;
            }
            case ObjectKind::blob: {
              double occupancy = 0.0;
              for (const auto& lobe : lobes)
                occupancy += std::max(0.0, 1.0 - rho2(lobe.center, lobe.radii, z, y, x));
              inside = occupancy >= 0.5;
              break;
            }
          }
          if (!inside) continue;
          ++support;
          out.volume.at(z, y, x) = static_cast<float>(spec.background + obj.intensity);
          if (obj.in_mask) out.mask.at(z, y, x) = 1.0f;
        }
    if (support == 0)
      throw DegenerateSpecError("object " + std::to_string(k) + " has empty support after voxelization");
  }

  if (spec.background_noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, spec.background_noise_sigma);
    for (auto& v : out.volume.data) v = static_cast<float>(v + noise(rng));
  }
  return out;
}

}  // namespace sliceprop
