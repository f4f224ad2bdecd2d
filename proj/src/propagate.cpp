#include "sliceprop/propagate.hpp"

#include "sliceprop/errors.hpp"
#include "sliceprop/eval.hpp"
#include "sliceprop/training.hpp"

#include <fstream>
#include <iomanip>

namespace sliceprop {

std::string to_string(PropagationMode m) {
  switch (m) {
    case PropagationMode::single_path:
      return "single_path";
    case PropagationMode::dual_reuse_prev:
      return "dual_reuse_prev";
    case PropagationMode::dual_zero_pl:
      return "dual_zero_pl";
  }
  return "?";
}

PropagationMode parse_propagation_mode(const std::string& s) {
  if (s == "single_path") return PropagationMode::single_path;
  if (s == "dual_reuse_prev") return PropagationMode::dual_reuse_prev;
  if (s == "dual_zero_pl") return PropagationMode::dual_zero_pl;
  throw ConfigError("unknown propagation mode '" + s + "'");
}

void PropagationConfig::validate() const {
  if (!(output_threshold > 0.0 && output_threshold < 1.0))
    throw ConfigError("output_threshold must lie strictly inside (0, 1)");
  if (window.radius < 0) throw ConfigError("window radius must be >= 0");
}

ChannelStack<double> propagate_step(const AffinityMatrix<double>& affinity, const ChannelStack<double>& mask,
                                    const PropagationConfig& cfg) {
  ChannelStack<double> next = apply_affinity(affinity, mask);
  // Convex combinations stay in [0, 1]; clamp away round-off only.
  next.data = next.data.cwiseMax(0.0).cwiseMin(1.0);
  if (cfg.per_step_binarize)
    next.data = next.data.unaryExpr([t = cfg.output_threshold](double v) { return v >= t ? 1.0 : 0.0; });
  return next;
}

namespace {

class Chain {
 public:
  Chain(const EncoderParams<double>& params, const Volume& volume, const PropagationConfig& cfg)
      : params_(params), cfg_(cfg), range_(volume_range(volume)) {
    features_.resize(volume.shape.depth);
    slices_.reserve(volume.shape.depth);
    for (int z = 0; z < volume.shape.depth; ++z) slices_.push_back(volume.slice(z).cast<double>());
    if (cfg.mode == PropagationMode::dual_zero_pl) {
      const Image<double> zeros = Image<double>::Zero(volume.shape.height, volume.shape.width);
      zero_pl_ = encode(params, transform_mask_slice(zeros, cfg.transform));
    }
  }

  // One propagation step from slice `from` (mask `mask`) to slice `to`.
  ChannelStack<double> step(int from, int to, const ChannelStack<double>& mask) {
    const auto& key_slice = features(from);
    const auto& query_slice = features(to);
    AffinityMatrix<double> a;
    switch (cfg_.mode) {
      case PropagationMode::single_path:
        a = compute_affinity(key_slice, query_slice, cfg_.window);
        break;
      case PropagationMode::dual_reuse_prev: {
        Image<double> m = Eigen::Map<const Image<double>>(mask.data.data(), mask.height, mask.width);
        const auto pl = encode(params_, transform_mask_slice(m, cfg_.transform));
        a = compute_affinity(fuse_keys_queries(key_slice, pl), fuse_keys_queries(query_slice, pl), cfg_.window);
        break;
      }
      case PropagationMode::dual_zero_pl:
        a = compute_affinity(fuse_keys_queries(key_slice, zero_pl_), fuse_keys_queries(query_slice, zero_pl_),
                             cfg_.window);
        break;
    }
    return propagate_step(a, mask, cfg_);
  }

 private:
  const FeatureMap<double>& features(int z) {
    auto& f = features_[z];
    if (f.pixels() == 0) f = encode(params_, cfg_.transform.apply<double>(slices_[z], range_));
    return f;
  }

  const EncoderParams<double>& params_;
  const PropagationConfig& cfg_;
  IntensityRange range_;
  std::vector<Image<double>> slices_;
  std::vector<FeatureMap<double>> features_;
  FeatureMap<double> zero_pl_;
};

TraceRecord record(const char* direction, int z, const ChannelStack<double>& m) {
  return {direction, z, m.data.sum(), m.data.size() ? m.data.maxCoeff() : 0.0, std::nullopt};
}

void store(MaskVolume& out, int z, const ChannelStack<double>& m) {
  auto s = out.slice(z);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) s(y, x) = static_cast<float>(m.data(Index(y) * m.width + x, 0));
}

}  // namespace

PropagationResult propagate_volume(const EncoderParams<double>& params, const Volume& volume, int annotated_index,
                                   const SliceMask& annotated_mask, const PropagationConfig& cfg) {
  cfg.validate();
  const Shape3& shape = volume.shape;
  if (annotated_index < 0 || annotated_index >= shape.depth)
    throw ConfigError("annotated index " + std::to_string(annotated_index) + " outside [0, " +
                      std::to_string(shape.depth) + ")");
  if (annotated_mask.rows() != shape.height || annotated_mask.cols() != shape.width)
    throw ShapeError("annotated mask shape does not match the volume slices");
  if (((annotated_mask != 0.0f) && (annotated_mask != 1.0f)).any())
    throw InvariantError("annotated mask must be binary");
  if ((annotated_mask == 1.0f).count() == 0) throw EmptyMaskError("annotated mask is empty");
  cfg.window.validate(shape.height, shape.width);

  PropagationResult r{MaskVolume(shape, MaskKind::soft, volume.id), MaskVolume(shape, MaskKind::binary, volume.id),
                      {}};
  r.soft.spacing = r.binary.spacing = volume.spacing;
  r.soft.slice(annotated_index) = annotated_mask;

  const ChannelStack<double> seed = as_channel<double>(annotated_mask);
  r.trace.seed = record("seed", annotated_index, seed);
  Chain chain(params, volume, cfg);

  ChannelStack<double> m = seed;
  for (int z = annotated_index + 1; z < shape.depth; ++z) {
    m = chain.step(z - 1, z, m);
    store(r.soft, z, m);
    r.trace.steps.push_back(record("forward", z, m));
  }
  m = seed;
  for (int z = annotated_index - 1; z >= 0; --z) {
    m = chain.step(z + 1, z, m);
    store(r.soft, z, m);
    r.trace.steps.push_back(record("backward", z, m));
  }

  r.binary = binarize(r.soft, cfg.output_threshold);
  r.binary.slice(annotated_index) = annotated_mask;
  return r;
}

void annotate_trace(PropagationTrace& trace, const MaskVolume& binary, const MaskVolume& gt) {
  auto fill = [&](TraceRecord& rec) { rec.dice = dice(binary.slice(rec.z), gt.slice(rec.z)); };
  fill(trace.seed);
  for (auto& rec : trace.steps) fill(rec);
}

PropagationTrace propagation_trace(const EncoderParams<double>& params, const Volume& volume, int annotated_index,
                                   const SliceMask& annotated_mask, const PropagationConfig& cfg,
                                   const MaskVolume* gt) {
  auto r = propagate_volume(params, volume, annotated_index, annotated_mask, cfg);
  if (gt) annotate_trace(r.trace, r.binary, *gt);
  return r.trace;
}

void write_trace_csv(const PropagationTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PersistenceError(path.string(), "cannot open for writing");
  const bool with_dice = trace.seed.dice.has_value();
  out << "direction,z,soft_mass,max_value" << (with_dice ? ",dice" : "") << "\n";
  out << std::setprecision(9);
  auto row = [&](const TraceRecord& r) {
    out << r.direction << "," << r.z << "," << r.soft_mass << "," << r.max_value;
    if (with_dice) out << "," << r.dice.value_or(0.0);
    out << "\n";
  };
  row(trace.seed);
  for (const auto& r : trace.steps) row(r);
}

}  // namespace sliceprop
