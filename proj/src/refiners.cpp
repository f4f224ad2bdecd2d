#include "sliceprop/errors.hpp"
#include "sliceprop/pseudolabel.hpp"
#include "sliceprop/training.hpp"

#include "im2col.hpp"

#include <array>
#include <cmath>
#include <deque>
#include <random>

namespace sliceprop {

MaskVolume IdentityRefiner::refine(const Volume&, const MaskVolume& pls) const {
  MaskVolume out = pls;
  out.kind = MaskKind::soft;
  return out;
}

// ---- morphology --------------------------------------------------------

namespace {

std::vector<std::uint8_t> largest_component(const std::vector<std::uint8_t>& in, const Shape3& s) {
  std::vector<int> label(in.size(), -1);
  std::vector<std::size_t> sizes;
  std::deque<std::size_t> queue;
  const std::size_t plane = s.slice_size();
  for (std::size_t seed = 0; seed < in.size(); ++seed) {
    if (!in[seed] || label[seed] >= 0) continue;
    const int id = static_cast<int>(sizes.size());
    std::size_t count = 0;
    label[seed] = id;
    queue.push_back(seed);
    while (!queue.empty()) {
      const std::size_t i = queue.front();
      queue.pop_front();
      ++count;
      const int z = int(i / plane), y = int((i % plane) / s.width), x = int(i % s.width);
      const std::array<std::array<int, 3>, 6> nbr{{{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}}};
      for (const auto& d : nbr) {
        const int nz = z + d[0], ny = y + d[1], nx = x + d[2];
        if (nz < 0 || ny < 0 || nx < 0 || nz >= s.depth || ny >= s.height || nx >= s.width) continue;
        const std::size_t j = (std::size_t(nz) * s.height + ny) * s.width + nx;
        if (in[j] && label[j] < 0) {
          label[j] = id;
          queue.push_back(j);
        }
      }
    }
    sizes.push_back(count);
  }
  std::vector<std::uint8_t> out(in.size(), 0);
  if (sizes.empty()) return out;
  // Ties go to the component found first in scan order.
  const int keep = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = label[i] == keep;
  return out;
}

// 3×3×3 cube; `dilate` = any in-volume neighbour set, otherwise all in-volume neighbours set.
std::vector<std::uint8_t> cube_filter(const std::vector<std::uint8_t>& in, const Shape3& s, bool dilate) {
  std::vector<std::uint8_t> out(in.size(), 0);
  for (int z = 0; z < s.depth; ++z)
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        bool any = false, all = true;
        for (int dz = -1; dz <= 1; ++dz)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int nz = z + dz, ny = y + dy, nx = x + dx;
              if (nz < 0 || ny < 0 || nx < 0 || nz >= s.depth || ny >= s.height || nx >= s.width) continue;
              const bool v = in[(std::size_t(nz) * s.height + ny) * s.width + nx];
              any |= v;
              all &= v;
            }
        out[(std::size_t(z) * s.height + y) * s.width + x] = dilate ? any : all;
      }
  return out;
}

}  // namespace

MaskVolume MorphologicalRefiner::refine(const Volume&, const MaskVolume& pls) const {
  std::vector<std::uint8_t> bin(pls.data.size());
  for (std::size_t i = 0; i < bin.size(); ++i) bin[i] = pls.data[i] >= 0.5f;
  const auto closed = cube_filter(cube_filter(largest_component(bin, pls.shape), pls.shape, true), pls.shape, false);
  MaskVolume out(pls.shape, MaskKind::binary, pls.id);
  out.spacing = pls.spacing;
  for (std::size_t i = 0; i < closed.size(); ++i) out.data[i] = closed[i] ? 1.0f : 0.0f;
  return out;
}

// ---- learned 3D refiner ------------------------------------------------

namespace {

constexpr int kKernel = 3;

// Stack of z-slices, each (H*W) x C.
struct Grid {
  int depth = 0, height = 0, width = 0;
  std::vector<PixelMatrix<double>> slices;
};

struct Conv3 {
  PixelMatrix<double> weight;  // row kz*(9*C) + (ky*3 + kx)*C + c
  Vector<double> bias;
};

PixelMatrix<double> patches(const Grid& in, int z) {
  const Index c = in.slices[0].cols();
  const Index per = Index(kKernel) * kKernel * c;
  PixelMatrix<double> cols = PixelMatrix<double>::Zero(Index(in.height) * in.width, 3 * per);
  for (int kz = 0; kz < 3; ++kz) {
    const int src = z + kz - 1;
    if (src < 0 || src >= in.depth) continue;
    cols.middleCols(kz * per, per) = detail::im2col(in.slices[src], in.height, in.width, kKernel);
  }
  return cols;
}

}  // namespace

struct LearnedRefiner::Net {
  std::vector<Conv3> layers;

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }
  Vector<double> flatten() const {
    Vector<double> f(size());
    Index at = 0;
    for (const auto& l : layers) {
      f.segment(at, l.weight.size()) = Eigen::Map<const Vector<double>>(l.weight.data(), l.weight.size());
      at += l.weight.size();
      f.segment(at, l.bias.size()) = l.bias;
      at += l.bias.size();
    }
    return f;
  }
  void assign(const Vector<double>& f) {
    Index at = 0;
    for (auto& l : layers) {
      Eigen::Map<Vector<double>>(l.weight.data(), l.weight.size()) = f.segment(at, l.weight.size());
      at += l.weight.size();
      l.bias = f.segment(at, l.bias.size());
      at += l.bias.size();
    }
  }

  // Returns logits; fills per-layer patches and pre-activations when `tape` is set.
  Grid forward(const Grid& input, std::vector<std::vector<PixelMatrix<double>>>* cols_tape,
               std::vector<Grid>* pre_tape) const {
    Grid act = input;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      Grid z{act.depth, act.height, act.width, {}};
      std::vector<PixelMatrix<double>> cols_l;
      for (int s = 0; s < act.depth; ++s) {
        PixelMatrix<double> cols = patches(act, s);
        PixelMatrix<double> out = cols * layers[l].weight;
        out.rowwise() += layers[l].bias.transpose();
        z.slices.push_back(std::move(out));
        if (cols_tape) cols_l.push_back(std::move(cols));
      }
      if (cols_tape) cols_tape->push_back(std::move(cols_l));
      const bool last = l + 1 == layers.size();
      act = z;
      if (!last)
        for (auto& s : act.slices) s = s.cwiseMax(0.0);
      if (pre_tape) pre_tape->push_back(std::move(z));
    }
    return act;
  }
};

LearnedRefiner::LearnedRefiner(LearnedRefinerConfig cfg) : cfg_(std::move(cfg)) {}
LearnedRefiner::~LearnedRefiner() = default;
LearnedRefiner::LearnedRefiner(LearnedRefiner&&) noexcept = default;
LearnedRefiner& LearnedRefiner::operator=(LearnedRefiner&&) noexcept = default;

bool LearnedRefiner::trained() const { return net_ != nullptr; }

namespace {

Grid make_input(const Volume& v, const MaskVolume& pls, int z0, int y0, int x0, int d, int h, int w,
                std::mt19937_64* corrupt_rng, double corruption) {
  const auto range = volume_range(v);
  const double span = range.hi > range.lo ? range.hi - range.lo : 1.0;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Grid g{d, h, w, {}};
  for (int z = 0; z < d; ++z) {
    PixelMatrix<double> s(Index(h) * w, 2);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const Index p = Index(y) * w + x;
        s(p, 0) = (v.at(z0 + z, y0 + y, x0 + x) - range.lo) / span;
        double pl = pls.at(z0 + z, y0 + y, x0 + x);
        if (corrupt_rng && u(*corrupt_rng) < corruption) pl = 1.0 - pl;
        s(p, 1) = pl;
      }
    g.slices.push_back(std::move(s));
  }
  return g;
}

}  // namespace

double LearnedRefiner::fit(std::span<const Volume> volumes, std::span<const MaskVolume> pls) {
  if (volumes.empty() || volumes.size() != pls.size())
    throw ConfigError("learned refiner needs one PL volume per training volume");
  for (std::size_t i = 0; i < volumes.size(); ++i) validate_pair(volumes[i], pls[i]);

  std::mt19937_64 rng(cfg_.seed);
  net_ = std::make_unique<Net>();
  std::vector<int> widths{2};
  widths.insert(widths.end(), cfg_.hidden_channels.begin(), cfg_.hidden_channels.end());
  widths.push_back(1);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const int fan_in = 27 * widths[l];
    std::uniform_real_distribution<double> wdist(-std::sqrt(6.0 / fan_in), std::sqrt(6.0 / fan_in));
    Conv3 c{PixelMatrix<double>(fan_in, widths[l + 1]), Vector<double>::Zero(widths[l + 1])};
    for (Index i = 0; i < c.weight.size(); ++i) c.weight.data()[i] = wdist(rng);
    net_->layers.push_back(std::move(c));
  }

  AdamW opt(cfg_.learning_rate, cfg_.weight_decay, 0.9, 0.999, 1e-8);
  Vector<double> flat = net_->flatten();
  std::vector<double> losses;
  std::uniform_int_distribution<std::size_t> pick_volume(0, volumes.size() - 1);
  for (int step = 0; step < cfg_.steps; ++step) {
    const std::size_t vi = pick_volume(rng);
    const Shape3& s = volumes[vi].shape;
    const int d = std::min(cfg_.crop, s.depth), h = std::min(cfg_.crop, s.height), w = std::min(cfg_.crop, s.width);
    const int z0 = std::uniform_int_distribution<int>(0, s.depth - d)(rng);
    const int y0 = std::uniform_int_distribution<int>(0, s.height - h)(rng);
    const int x0 = std::uniform_int_distribution<int>(0, s.width - w)(rng);
    const Grid input = make_input(volumes[vi], pls[vi], z0, y0, x0, d, h, w, &rng, cfg_.corruption);

    std::vector<std::vector<PixelMatrix<double>>> cols;
    std::vector<Grid> pre;
    const Grid logits = net_->forward(input, &cols, &pre);

    // Binary cross-entropy against the binarised PLs, averaged over voxels.
    const double n = double(d) * h * w;
    double loss = 0.0;
    std::vector<PixelMatrix<double>> dz(d);
    for (int z = 0; z < d; ++z) {
      dz[z].resize(logits.slices[z].rows(), 1);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const Index p = Index(y) * w + x;
          const double t = pls[vi].at(z0 + z, y0 + y, x0 + x) >= 0.5f ? 1.0 : 0.0;
          const double sc = logits.slices[z](p, 0);
          loss += std::max(sc, 0.0) - sc * t + std::log1p(std::exp(-std::abs(sc)));
          dz[z](p, 0) = (1.0 / (1.0 + std::exp(-sc)) - t) / n;
        }
    }
    losses.push_back(loss / n);

    std::vector<Conv3> grads(net_->layers.size());
    for (std::size_t l = net_->layers.size(); l-- > 0;) {
      const auto& layer = net_->layers[l];
      grads[l].weight = PixelMatrix<double>::Zero(layer.weight.rows(), layer.weight.cols());
      grads[l].bias = Vector<double>::Zero(layer.bias.size());
      const Index cin = layer.weight.rows() / 27;
      const Index per = 9 * cin;
      std::vector<PixelMatrix<double>> dx(d, PixelMatrix<double>::Zero(Index(h) * w, cin));
      for (int z = 0; z < d; ++z) {
        grads[l].weight.noalias() += cols[l][z].transpose() * dz[z];
        grads[l].bias += dz[z].colwise().sum().transpose();
        const PixelMatrix<double> dcols = dz[z] * layer.weight.transpose();
        for (int kz = 0; kz < 3; ++kz) {
          const int src = z + kz - 1;
          if (src < 0 || src >= d) continue;
          dx[src] += detail::col2im(PixelMatrix<double>(dcols.middleCols(kz * per, per)), h, w, kKernel, cin);
        }
      }
      if (l > 0)
        for (int z = 0; z < d; ++z)
          dz[z] = dx[z].cwiseProduct(PixelMatrix<double>((pre[l - 1].slices[z].array() > 0.0).cast<double>()));
    }
    Vector<double> g(flat.size());
    Index at = 0;
    for (const auto& gl : grads) {
      g.segment(at, gl.weight.size()) = Eigen::Map<const Vector<double>>(gl.weight.data(), gl.weight.size());
      at += gl.weight.size();
      g.segment(at, gl.bias.size()) = gl.bias;
      at += gl.bias.size();
    }
    opt.step(flat, g);
    if (!flat.allFinite()) throw NumericError("learned refiner diverged at step " + std::to_string(step));
    net_->assign(flat);
  }
  const std::size_t tail = std::max<std::size_t>(1, losses.size() / 10);
  double sum = 0.0;
  for (std::size_t i = losses.size() - tail; i < losses.size(); ++i) sum += losses[i];
  return sum / double(tail);
}

MaskVolume LearnedRefiner::refine(const Volume& volume, const MaskVolume& pls) const {
  if (!net_) throw Error("learned refiner used before fit()");
  validate_pair(volume, pls);
  const Shape3& s = volume.shape;
  const Grid input = make_input(volume, pls, 0, 0, 0, s.depth, s.height, s.width, nullptr, 0.0);
  const Grid logits = net_->forward(input, nullptr, nullptr);
  MaskVolume out(s, MaskKind::soft, pls.id);
  out.spacing = pls.spacing;
  for (int z = 0; z < s.depth; ++z)
    for (Index p = 0; p < logits.slices[z].rows(); ++p)
      out.data[std::size_t(z) * s.slice_size() + p] =
          static_cast<float>(1.0 / (1.0 + std::exp(-logits.slices[z](p, 0))));
  return out;
}

}  // namespace sliceprop
