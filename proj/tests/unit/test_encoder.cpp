#include "sliceprop/encoder.hpp"
#include "sliceprop/errors.hpp"

#include "../support/oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

using namespace sliceprop;

namespace {

EncoderConfig tiny_config(int in = 3, std::vector<int> hidden = {4}, int f = 3) {
  EncoderConfig cfg;
  cfg.in_channels = in;
  cfg.hidden_channels = std::move(hidden);
  cfg.feature_dim = f;
  cfg.seed = 7;
  return cfg;
}

// Loss L = sum(features ⊙ weights) for a fixed random weighting.
double weighted_sum(const EncoderParams<double>& p, const ChannelStack<double>& in, const PixelMatrix<double>& w) {
  return encode(p, in).data.cwiseProduct(w).sum();
}

double rel_err(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8}); }

}  // namespace

TEST_CASE("parameter count of the default network") {
  EncoderConfig cfg;
  cfg.in_channels = 9;
  // Enumerated: 9*16*9 + 16 + 16*16*9 + 16 + 16*16*9 + 16.
  CHECK(cfg.parameter_count() == 5952);
  const auto p = init_encoder<double>(cfg);
  CHECK(p.size() == 5952);
  std::size_t enumerated = 0;
  for (const auto& l : p.layers) enumerated += std::size_t(l.weight.rows() * l.weight.cols() + l.bias.size());
  CHECK(enumerated == 5952);
  REQUIRE(p.layers.size() == 3);
  CHECK(p.layers[0].weight.rows() == 81);
  CHECK(p.layers[2].weight.cols() == 16);
}

TEST_CASE("init is deterministic per seed, seed-sensitive, fan-in bounded and never zero") {
  EncoderConfig cfg;
  cfg.seed = 3;
  const auto a = init_encoder<double>(cfg);
  const auto b = init_encoder<double>(cfg);
  CHECK(std::memcmp(a.flatten().data(), b.flatten().data(), a.size() * sizeof(double)) == 0);
  cfg.seed = 4;
  const auto c = init_encoder<double>(cfg);
  CHECK(a.flatten() != c.flatten());
  for (const auto& l : a.layers) {
    const double bound = std::sqrt(6.0 / double(l.weight.rows()));
    CHECK(l.weight.cwiseAbs().maxCoeff() <= bound);
    CHECK(l.weight.cwiseAbs().maxCoeff() > 0.0);
    CHECK(l.bias.cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("encoder config invariants") {
  EncoderConfig cfg;
  cfg.feature_dim = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.feature_dim = 4;
  cfg.kernel_size = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.kernel_size = 3;
  cfg.hidden_channels = {8, 0};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("zero input with zero biases gives a zero feature map") {
  auto p = init_encoder<double>(EncoderConfig{});
  for (auto& l : p.layers) l.bias.setZero();
  const auto f = encode(p, ChannelStack<double>(16, 16, 9));
  CHECK(f.data.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("16x16x9 input gives a 16x16xF output") {
  std::mt19937_64 rng(1);
  const auto p = init_encoder<double>(EncoderConfig{});
  const auto f = encode(p, oracle::random_stack<double>(16, 16, 9, rng));
  CHECK(f.height == 16);
  CHECK(f.width == 16);
  CHECK(f.channels() == 16);
  const auto g = encode(p, oracle::random_stack<double>(11, 7, 9, rng));
  CHECK(g.height == 11);
  CHECK(g.width == 7);
}

TEST_CASE("channel mismatch is a shape error naming both counts") {
  const auto p = init_encoder<double>(EncoderConfig{});
  try {
    encode(p, ChannelStack<double>(8, 8, 5));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string what = e.what();
    CHECK(what.find('9') != std::string::npos);
    CHECK(what.find('5') != std::string::npos);
  }
}

TEST_CASE("final layer is linear: doubling its weights and bias doubles the output") {
  std::mt19937_64 rng(2);
  const auto p = init_encoder<double>(tiny_config());
  auto q = p;
  q.layers.back().weight *= 2.0;
  q.layers.back().bias *= 2.0;
  const auto in = oracle::random_stack<double>(8, 8, 3, rng);
  const auto a = encode(p, in);
  const auto b = encode(q, in);
  CHECK((b.data - 2.0 * a.data).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("encode is deterministic") {
  std::mt19937_64 rng(3);
  const auto p = init_encoder<double>(EncoderConfig{});
  const auto in = oracle::random_stack<double>(12, 12, 9, rng);
  const auto a = encode(p, in);
  const auto b = encode(p, in);
  CHECK(std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0);
}

TEST_CASE("zero upstream gradient gives zero parameter gradients") {
  std::mt19937_64 rng(4);
  const auto p = init_encoder<double>(tiny_config());
  const auto in = oracle::random_stack<double>(8, 8, 3, rng);
  const auto g = encode_backward(p, in, FeatureMap<double>(8, 8, 3));
  CHECK(g.params.flatten().cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.input.data.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gradient of sum of outputs w.r.t. the final bias is H*W per channel") {
  std::mt19937_64 rng(5);
  const auto p = init_encoder<double>(tiny_config());
  const auto in = oracle::random_stack<double>(8, 6, 3, rng);
  FeatureMap<double> ones(8, 6, 3);
  ones.data.setOnes();
  const auto g = encode_backward(p, in, ones);
  for (Index c = 0; c < 3; ++c) CHECK(g.params.layers.back().bias[c] == doctest::Approx(48.0).epsilon(1e-14));

  // cross-check one entry by central differences
  auto plus = p, minus = p;
  plus.layers.back().bias[1] += 1e-4;
  minus.layers.back().bias[1] -= 1e-4;
  const double fd = (encode(plus, in).data.sum() - encode(minus, in).data.sum()) / 2e-4;
  CHECK(fd == doctest::Approx(48.0).epsilon(1e-8));
}

TEST_CASE("encoder gradients match central finite differences") {
  std::mt19937_64 rng(6);
  for (bool normalise : {false, true}) {
    auto cfg = tiny_config(3, {4}, 3);
    cfg.l2_normalize = normalise;
    const auto p = init_encoder<double>(cfg);
    const auto in = oracle::random_stack<double>(8, 8, 3, rng);
    const auto w = oracle::random_stack<double>(8, 8, 3, rng).data;
    FeatureMap<double> up(8, 8, 3);
    up.data = w;
    const auto g = encode_backward(p, in, up);
    const Vector<double> analytic = g.params.flatten();
    Vector<double> flat = p.flatten();
    double worst = 0.0;
    auto q = p;
    for (Index i = 0; i < flat.size(); ++i) {
      const double keep = flat[i];
      flat[i] = keep + 1e-4;
      q.assign(flat);
      const double lp = weighted_sum(q, in, w);
      flat[i] = keep - 1e-4;
      q.assign(flat);
      const double lm = weighted_sum(q, in, w);
      flat[i] = keep;
      worst = std::max(worst, rel_err(analytic[i], (lp - lm) / 2e-4));
    }
    CHECK(worst < 1e-4);

    // input gradient
    double worst_in = 0.0;
    auto x = in;
    for (Index i = 0; i < x.data.size(); i += 5) {
      const double keep = x.data.data()[i];
      x.data.data()[i] = keep + 1e-4;
      const double lp = weighted_sum(p, x, w);
      x.data.data()[i] = keep - 1e-4;
      const double lm = weighted_sum(p, x, w);
      x.data.data()[i] = keep;
      worst_in = std::max(worst_in, rel_err(g.input.data.data()[i], (lp - lm) / 2e-4));
    }
    CHECK(worst_in < 1e-4);
  }
}

TEST_CASE("flatten and assign are inverse; wrong sizes are rejected") {
  const auto p = init_encoder<double>(EncoderConfig{});
  auto q = EncoderParams<double>::zeros_like(p);
  q.assign(p.flatten());
  CHECK(q.flatten() == p.flatten());
  CHECK_THROWS_AS(q.assign(Vector<double>::Zero(10)), ShapeError);
  CHECK(p.all_finite());
  q.layers[1].bias[0] = std::nan("");
  CHECK_FALSE(q.all_finite());
}

TEST_CASE("float encoder tracks the double encoder") {
  std::mt19937_64 rng(8);
  const auto p = init_encoder<double>(EncoderConfig{});
  const auto in = oracle::random_stack<double>(10, 10, 9, rng);
  const auto a = encode(p, in);
  const auto b = encode(p.cast<float>(), in.cast<float>());
  CHECK((b.data.cast<double>() - a.data).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("checkpoints round-trip bit-exactly and verify their digest") {
  const auto dir = oracle::scratch_dir("ckpt");
  auto cfg = tiny_config(5, {6, 4}, 3);
  cfg.l2_normalize = true;
  Checkpoint c{init_encoder<double>(cfg), R"({"transform":"geig"})"};
  save_checkpoint(c, dir / "model");
  const Checkpoint back = load_checkpoint(dir / "model");
  CHECK(back.params.config.in_channels == 5);
  CHECK(back.params.config.hidden_channels == std::vector<int>{6, 4});
  CHECK(back.params.config.l2_normalize);
  CHECK(back.params.config.seed == cfg.seed);
  CHECK(std::memcmp(back.params.flatten().data(), c.params.flatten().data(), c.params.size() * sizeof(double)) == 0);
  CHECK(back.meta_json.find("geig") != std::string::npos);

  // flip one payload byte
  const auto bin = dir / "model.bin";
  std::fstream f(bin, std::ios::in | std::ios::out | std::ios::binary);
  f.seekg(17);
  char ch;
  f.get(ch);
  f.seekp(17);
  f.put(char(ch ^ 0x10));
  f.close();
  CHECK_THROWS_AS(load_checkpoint(dir / "model"), FormatError);
}

TEST_CASE("encoder config json round-trips") {
  auto cfg = tiny_config(7, {3, 5, 2}, 4);
  cfg.kernel_size = 5;
  const auto back = encoder_config_from_json(encoder_config_json(cfg));
  CHECK(back.in_channels == 7);
  CHECK(back.hidden_channels == cfg.hidden_channels);
  CHECK(back.feature_dim == 4);
  CHECK(back.kernel_size == 5);
  CHECK(back.parameter_count() == cfg.parameter_count());
}
