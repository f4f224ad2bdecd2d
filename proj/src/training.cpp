#include "sliceprop/training.hpp"

#include "sliceprop/errors.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>

namespace sliceprop {

std::string to_string(PathMode m) { return m == PathMode::single_path ? "single_path" : "dual_path"; }
std::string to_string(LossKind k) { return k == LossKind::l1 ? "l1" : "mse"; }

PathMode parse_path_mode(const std::string& s) {
  if (s == "single_path") return PathMode::single_path;
  if (s == "dual_path") return PathMode::dual_path;
  throw ConfigError("unknown training mode '" + s + "'");
}

LossKind parse_loss_kind(const std::string& s) {
  if (s == "l1") return LossKind::l1;
  if (s == "mse") return LossKind::mse;
  throw ConfigError("unknown loss '" + s + "'");
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (window.radius < 0) throw ConfigError("window radius must be >= 0");
}

IntensityRange volume_range(const Volume& volume) {
  const auto [lo, hi] = std::minmax_element(volume.data.begin(), volume.data.end());
  return {static_cast<double>(*lo), static_cast<double>(*hi)};
}

// ---- pair sampling -----------------------------------------------------

PairSampler::PairSampler(std::vector<int> depths, std::uint64_t seed) : seed_(seed) {
  for (std::size_t v = 0; v < depths.size(); ++v)
    for (int j = 0; j + 1 < depths[v]; ++j) pairs_.push_back({v, j});
}

std::vector<PairRef> PairSampler::epoch(int epoch) const {
  std::vector<PairRef> order = pairs_;
  std::mt19937_64 rng(seed_ ^ (0x9E3779B97F4A7C15ULL * std::uint64_t(epoch + 1)));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

PairSampler sample_pairs(std::span<const Volume> volumes, std::span<const MaskVolume> pls, PathMode mode,
                         std::uint64_t seed) {
  if (mode == PathMode::dual_path) {
    if (pls.size() != volumes.size())
      throw ConfigError("dual_path training needs one pseudo-label volume per training volume");
    for (std::size_t i = 0; i < volumes.size(); ++i) validate_pair(volumes[i], pls[i]);
  }
  std::vector<int> depths;
  for (const auto& v : volumes) {
    if (v.shape.depth < 2) {
      std::cerr << "warning: volume '" << v.id << "' has fewer than two slices; skipped\n";
      depths.push_back(0);
    } else {
      depths.push_back(v.shape.depth);
    }
  }
  return PairSampler(std::move(depths), seed);
}

// ---- inputs ------------------------------------------------------------

GradientEnhancedSlice<double> transform_mask_slice(const Image<double>& mask_slice, const InputTransform& transform) {
  return transform.apply<double>(mask_slice, IntensityRange{0.0, 1.0});
}

PreparedVolume prepare_volume(const Volume& volume, const MaskVolume* pls, const InputTransform& transform) {
  PreparedVolume out;
  out.id = volume.id;
  const auto range = volume_range(volume);
  for (int z = 0; z < volume.shape.depth; ++z) {
    const Image<double> s = volume.slice(z).cast<double>();
    out.slices.push_back(transform.apply<double>(s, range));
    out.intensities.push_back(as_channel<double>(normalize_intensity<double>(s, range)));
    if (pls) out.pls.push_back(transform_mask_slice(pls->slice(z).cast<double>(), transform));
  }
  return out;
}

TrainingItem PreparedVolume::item(int j) const {
  TrainingItem it;
  it.slice_j = slices.at(j);
  it.slice_j1 = slices.at(j + 1);
  if (!pls.empty()) {
    it.pl_j = pls.at(j);
    it.pl_j1 = pls.at(j + 1);
  }
  it.source = intensities.at(j);
  it.target = intensities.at(j + 1);
  return it;
}

// ---- loss --------------------------------------------------------------

ReconstructionLoss reconstruction_loss(const AffinityMatrix<double>& affinity, const ChannelStack<double>& source,
                                       const ChannelStack<double>& target, LossKind kind) {
  if (source.height != target.height || source.width != target.width || source.channels() != target.channels())
    throw ShapeError("reconstruction_loss: source and target shapes differ");
  ReconstructionLoss r;
  r.reconstruction = apply_affinity(affinity, source);
  const PixelMatrix<double> residual = r.reconstruction.data - target.data;
  const double n = static_cast<double>(residual.size());
  ChannelStack<double> d_recon(source.height, source.width, source.channels());
  if (kind == LossKind::l1) {
    r.loss = residual.cwiseAbs().sum() / n;
    d_recon.data = residual.unaryExpr([n](double e) { return (e > 0.0 ? 1.0 : (e < 0.0 ? -1.0 : 0.0)) / n; });
  } else {
    r.loss = residual.squaredNorm() / n;
    d_recon.data = residual * (2.0 / n);
  }
  r.d_affinity = apply_affinity_backward(affinity, source, d_recon).affinity;
  return r;
}

namespace {

struct Forward {
  FeatureMap<double> key_slice, key_pl, query_slice, query_pl;
  EncoderTape<double> tape_key_slice, tape_key_pl, tape_query_slice, tape_query_pl;
  FeatureMap<double> key, query;
  AffinityMatrix<double> affinity;
};

Forward forward(const EncoderParams<double>& params, const TrainingItem& item, PathMode mode, const WindowSpec& window,
                bool keep_tape) {
  Forward f;
  f.key_slice = encode(params, item.slice_j, keep_tape ? &f.tape_key_slice : nullptr);
  f.query_slice = encode(params, item.slice_j1, keep_tape ? &f.tape_query_slice : nullptr);
  if (mode == PathMode::dual_path) {
    if (item.pl_j.pixels() == 0 || item.pl_j1.pixels() == 0)
      throw ConfigError("dual_path step without pseudo-label inputs");
    f.key_pl = encode(params, item.pl_j, keep_tape ? &f.tape_key_pl : nullptr);
    f.query_pl = encode(params, item.pl_j1, keep_tape ? &f.tape_query_pl : nullptr);
    f.key = fuse_keys_queries(f.key_slice, f.key_pl);
    f.query = fuse_keys_queries(f.query_slice, f.query_pl);
  } else {
    f.key = f.key_slice;
    f.query = f.query_slice;
  }
  f.affinity = compute_affinity(f.key, f.query, window);
  return f;
}

void accumulate(EncoderParams<double>& into, const EncoderParams<double>& g) {
  for (std::size_t l = 0; l < into.layers.size(); ++l) {
    into.layers[l].weight += g.layers[l].weight;
    into.layers[l].bias += g.layers[l].bias;
  }
}

FeatureMap<double> columns(const FeatureMap<double>& f, int first, int count) {
  FeatureMap<double> out;
  out.height = f.height;
  out.width = f.width;
  out.data = f.data.middleCols(first, count);
  return out;
}

}  // namespace

LossGradient loss_and_gradient(const EncoderParams<double>& params, const TrainingItem& item, PathMode mode,
                               const WindowSpec& window, LossKind loss) {
  Forward f = forward(params, item, mode, window, true);
  const auto rec = reconstruction_loss(f.affinity, item.source, item.target, loss);
  const auto g = compute_affinity_backward(f.key, f.query, f.affinity, rec.d_affinity);

  LossGradient out;
  out.loss = rec.loss;
  const int fd = params.config.feature_dim;
  if (mode == PathMode::single_path) {
    out.params = encode_backward(params, f.tape_key_slice, g.key).params;
    accumulate(out.params, encode_backward(params, f.tape_query_slice, g.query).params);
  } else {
    out.params = encode_backward(params, f.tape_key_slice, columns(g.key, 0, fd)).params;
    accumulate(out.params, encode_backward(params, f.tape_query_slice, columns(g.query, 0, fd)).params);
    auto kp = encode_backward(params, f.tape_key_pl, columns(g.key, fd, fd));
    auto qp = encode_backward(params, f.tape_query_pl, columns(g.query, fd, fd));
    accumulate(out.params, kp.params);
    accumulate(out.params, qp.params);
    out.d_pl_j = std::move(kp.input);
    out.d_pl_j1 = std::move(qp.input);
  }
  return out;
}

double item_loss(const EncoderParams<double>& params, const TrainingItem& item, PathMode mode,
                 const WindowSpec& window, LossKind loss) {
  const Forward f = forward(params, item, mode, window, false);
  const auto recon = apply_affinity(f.affinity, item.source);
  const PixelMatrix<double> residual = recon.data - item.target.data;
  const double n = static_cast<double>(residual.size());
  return loss == LossKind::l1 ? residual.cwiseAbs().sum() / n : residual.squaredNorm() / n;
}

// ---- optimiser ---------------------------------------------------------

AdamW::AdamW(double learning_rate, double weight_decay, double beta1, double beta2, double epsilon)
    : lr_(learning_rate), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(epsilon) {}

void AdamW::step(Vector<double>& params, const Vector<double>& grad) {
  if (m_.size() != params.size()) {
    m_ = Vector<double>::Zero(params.size());
    v_ = Vector<double>::Zero(params.size());
  }
  ++t_;
  m_ = b1_ * m_ + (1.0 - b1_) * grad;
  v_ = b2_ * v_ + (1.0 - b2_) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(b1_, double(t_));
  const double c2 = 1.0 - std::pow(b2_, double(t_));
  params *= (1.0 - lr_ * wd_);
  params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

// ---- training loop -----------------------------------------------------

TrainResult train(const TrainConfig& cfg, EncoderConfig encoder, const InputTransform& transform,
                  std::span<const Volume> volumes, std::span<const MaskVolume> pls) {
  cfg.validate();
  if (volumes.empty()) throw ConfigError("training needs at least one volume");
  const PairSampler sampler = sample_pairs(volumes, pls, cfg.mode, cfg.seed);
  if (sampler.pairs_per_epoch() == 0) throw ConfigError("training data has no adjacent slice pairs");

  encoder.in_channels = transform.channels();
  std::vector<PreparedVolume> prepared;
  prepared.reserve(volumes.size());
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    cfg.window.validate(volumes[i].shape.height, volumes[i].shape.width);
    prepared.push_back(prepare_volume(volumes[i], cfg.mode == PathMode::dual_path ? &pls[i] : nullptr, transform));
  }

  TrainResult result;
  result.params = init_encoder<double>(encoder);
  Vector<double> flat = result.params.flatten();
  AdamW optimizer(cfg.learning_rate, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.epsilon);

  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = sampler.epoch(epoch);
    double epoch_sum = 0.0;
    Vector<double> grad = Vector<double>::Zero(flat.size());
    int in_batch = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
      const auto& pv = prepared[order[i].volume];
      const auto g = loss_and_gradient(result.params, pv.item(order[i].slice), cfg.mode, cfg.window, cfg.loss);
      if (!std::isfinite(g.loss))
        throw NumericError("non-finite loss at step " + std::to_string(step) + " (epoch " + std::to_string(epoch) +
                           ", pair " + pv.id + ":" + std::to_string(order[i].slice) + ")");
      grad += g.params.flatten();
      ++in_batch;
      epoch_sum += g.loss;
      result.log.push_back({step, epoch, pv.id + ":" + std::to_string(order[i].slice), g.loss});
      ++step;
      if (in_batch == cfg.batch_size || i + 1 == order.size()) {
        optimizer.step(flat, grad / double(in_batch));
        if (!flat.allFinite())
          throw NumericError("non-finite parameters after step " + std::to_string(step - 1));
        result.params.assign(flat);
        grad.setZero();
        in_batch = 0;
      }
    }
    result.epoch_mean_loss.push_back(epoch_sum / double(order.size()));
  }
  return result;
}

// ---- gradient check ----------------------------------------------------

namespace {

double relative_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

}  // namespace

namespace {

// Evaluates the loss and records which side of every piecewise-linear switch
// the evaluation landed on: hidden ReLU pre-activations and, for l1, residual signs.
struct Probe {
  double loss = 0.0;
  std::vector<bool> pattern;
};

Probe probe_loss(const EncoderParams<double>& params, const TrainingItem& item, const TrainConfig& cfg) {
  const Forward f = forward(params, item, cfg.mode, cfg.window, true);
  Probe p;
  auto add_tape = [&](const EncoderTape<double>& tape) {
    for (std::size_t l = 0; l + 1 < tape.pre_activations.size(); ++l)
      for (Index i = 0; i < tape.pre_activations[l].size(); ++i) p.pattern.push_back(tape.pre_activations[l].data()[i] > 0.0);
  };
  add_tape(f.tape_key_slice);
  add_tape(f.tape_query_slice);
  if (cfg.mode == PathMode::dual_path) {
    add_tape(f.tape_key_pl);
    add_tape(f.tape_query_pl);
  }
  const auto recon = apply_affinity(f.affinity, item.source);
  const PixelMatrix<double> residual = recon.data - item.target.data;
  const double n = static_cast<double>(residual.size());
  if (cfg.loss == LossKind::l1) {
    p.loss = residual.cwiseAbs().sum() / n;
    for (Index i = 0; i < residual.size(); ++i) p.pattern.push_back(residual.data()[i] > 0.0);
  } else {
    p.loss = residual.squaredNorm() / n;
  }
  return p;
}

constexpr int kMaxHalvings = 12;

// Central difference of coordinate `x` through `eval`. When x ± h switches a
// ReLU or an l1 residual sign relative to x, the difference straddles a kink,
// so h is halved until both probes stay on the side of x.
template <typename Eval>
double central_difference(double& x, double h, const std::vector<bool>& base, Eval&& eval,
                          GradientCheckReport& report) {
  const double keep = x;
  double numeric = 0.0;
  for (int attempt = 0; attempt <= kMaxHalvings; ++attempt, h *= 0.5) {
    x = keep + h;
    const Probe plus = eval();
    x = keep - h;
    const Probe minus = eval();
    x = keep;
    numeric = (plus.loss - minus.loss) / (2.0 * h);
    if (plus.pattern == base && minus.pattern == base) {
      if (attempt > 0) ++report.kink_retries;
      return numeric;
    }
  }
  ++report.unresolved_kinks;
  return numeric;
}

}  // namespace

GradientCheckReport gradient_check(const TrainConfig& cfg, const EncoderParams<double>& params,
                                   const TrainingItem& item, double h, double threshold, double floor) {
  GradientCheckReport report;
  const auto analytic = loss_and_gradient(params, item, cfg.mode, cfg.window, cfg.loss);
  const Vector<double> a = analytic.params.flatten();
  report.parameters = static_cast<std::size_t>(a.size());
  report.analytic_norm = a.norm();
  const std::vector<bool> base = probe_loss(params, item, cfg).pattern;

  EncoderParams<double> probe = params;
  Vector<double> flat = params.flatten();
  for (Index i = 0; i < flat.size(); ++i) {
    const double numeric = central_difference(
        flat[i], h, base,
        [&] {
          probe.assign(flat);
          return probe_loss(probe, item, cfg);
        },
        report);
    report.max_relative_error = std::max(report.max_relative_error, relative_error(a[i], numeric, floor));
  }

  if (cfg.mode == PathMode::dual_path) {
    report.pl_input_gradient_norm =
        std::sqrt(analytic.d_pl_j.data.squaredNorm() + analytic.d_pl_j1.data.squaredNorm());
    TrainingItem perturbed = item;
    for (int which = 0; which < 2; ++which) {
      auto& input = which == 0 ? perturbed.pl_j.data : perturbed.pl_j1.data;
      const auto& grad = which == 0 ? analytic.d_pl_j.data : analytic.d_pl_j1.data;
      for (Index i = 0; i < input.size(); ++i) {
        const double numeric = central_difference(
            input.data()[i], h, base, [&] { return probe_loss(params, perturbed, cfg); }, report);
        report.max_relative_error_pl =
            std::max(report.max_relative_error_pl, relative_error(grad.data()[i], numeric, floor));
      }
    }
  }
  report.passed = report.max_relative_error < threshold && report.max_relative_error_pl < threshold &&
                  report.unresolved_kinks == 0;
  return report;
}

}  // namespace sliceprop
