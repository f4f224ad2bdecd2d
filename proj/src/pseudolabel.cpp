#include "sliceprop/pseudolabel.hpp"

#include "sliceprop/errors.hpp"
#include "sliceprop/eval.hpp"
#include "sliceprop/propagate.hpp"

#include <fstream>
#include <iomanip>

namespace sliceprop {

MaskVolume generate_pls(const EncoderParams<double>& bootstrap_params, const Volume& volume, int annotated_index,
                        const SliceMask& annotated_mask, const WindowSpec& window, const InputTransform& transform) {
  PropagationConfig cfg;
  cfg.mode = PropagationMode::single_path;
  cfg.window = window;
  cfg.transform = transform;
  auto r = propagate_volume(bootstrap_params, volume, annotated_index, annotated_mask, cfg);
  r.soft.id = volume.id;
  return std::move(r.soft);
}

MaskVolume refine_pls(const Refiner& refiner, const Volume& volume, const MaskVolume& pls) {
  validate_pair(volume, pls);
  MaskVolume out;
  try {
    out = refiner.refine(volume, pls);
  } catch (const std::exception& e) {
    throw RefinementError(refiner.name(), e.what());
  }
  if (out.shape != pls.shape) throw RefinementError(refiner.name(), "output shape differs from input shape");
  if (out.kind != refiner.output_kind()) throw RefinementError(refiner.name(), "output kind differs from declared kind");
  try {
    validate(out);
  } catch (const Error& e) {
    throw RefinementError(refiner.name(), e.what());
  }
  return out;
}

void impose_annotation(MaskVolume& pls, int annotated_index, const SliceMask& annotated_mask) {
  if (annotated_index < 0 || annotated_index >= pls.shape.depth)
    throw ConfigError("annotated index outside the PL volume");
  if (annotated_mask.rows() != pls.shape.height || annotated_mask.cols() != pls.shape.width)
    throw ShapeError("annotated mask shape does not match the PL volume");
  pls.slice(annotated_index) = annotated_mask;
}

std::vector<PlQualityRow> pl_quality_report(const MaskVolume& pls, const MaskVolume& gt, int annotated_index) {
  if (pls.shape != gt.shape) throw ShapeError("pl_quality_report: shapes differ");
  const MaskVolume bin = binarize(pls);
  std::vector<PlQualityRow> rows;
  for (int z = 0; z < gt.shape.depth; ++z)
    rows.push_back({z, dice(bin.slice(z), gt.slice(z)), std::abs(z - annotated_index)});
  return rows;
}

void write_pl_quality_csv(const std::vector<PlQualityRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PersistenceError(path.string(), "cannot open for writing");
  out << std::setprecision(9) << "z,dice,distance\n";
  for (const auto& r : rows) out << r.z << "," << r.dice << "," << r.distance << "\n";
}

std::unique_ptr<Refiner> make_refiner(const std::string& name, const LearnedRefinerConfig& learned) {
  if (name == "identity") return std::make_unique<IdentityRefiner>();
  if (name == "morph") return std::make_unique<MorphologicalRefiner>();
  if (name == "learned") return std::make_unique<LearnedRefiner>(learned);
  throw ConfigError("unknown refiner '" + name + "' (expected identity|morph|learned)");
}

}  // namespace sliceprop
