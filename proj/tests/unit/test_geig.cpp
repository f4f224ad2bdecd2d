#include "sliceprop/errors.hpp"
#include "sliceprop/geig.hpp"

#include "../support/oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace sliceprop;

namespace {

Image<double> random_slice(int h, int w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  Image<double> s(h, w);
  for (Index i = 0; i < s.size(); ++i) s.data()[i] = u(rng);
  return s;
}

const std::vector<Direction> kAll{Direction::horizontal, Direction::vertical, Direction::diagonal_up,
                                  Direction::diagonal_down};

}  // namespace

TEST_CASE("second difference of x^2 is 2 in the interior") {
  Image<double> s(8, 10);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 10; ++x) s(y, x) = double(x) * x;
  const auto d = second_derivative(s, Direction::horizontal, 3);
  for (int y = 0; y < 8; ++y)
    for (int x = 1; x < 9; ++x) CHECK(d(y, x) == 2.0);
}

TEST_CASE("second difference of a linear ramp vanishes in the interior") {
  Image<double> s(9, 12);
  for (int y = 0; y < 9; ++y)
    for (int x = 0; x < 12; ++x) s(y, x) = 3.0 * x - 1.0;
  const auto d = second_derivative(s, Direction::horizontal, 5);
  for (int y = 0; y < 9; ++y)
    for (int x = 2; x < 10; ++x) CHECK(d(y, x) == 0.0);
}

TEST_CASE("second difference of a constant slice is zero everywhere") {
  const Image<double> s = Image<double>::Constant(8, 8, 4.25);
  for (Direction d : kAll)
    for (int scale : {3, 5, 7}) CHECK((second_derivative(s, d, scale) == 0.0).all());
}

TEST_CASE("second_derivative matches the loop oracle on random 8x8 slices") {
  std::mt19937_64 rng(17);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = random_slice(8, 8, rng);
    for (Direction d : kAll)
      for (int scale : {3, 5, 7, 9}) {
        const auto got = second_derivative(s, d, scale);
        const auto want = oracle::second_derivative(s, d, scale);
        worst = std::max(worst, (got - want).abs().maxCoeff());
      }
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("scale >= 2*min(H,W) is rejected") {
  const Image<double> s = Image<double>::Zero(8, 12);
  CHECK_THROWS_AS(second_derivative(s, Direction::horizontal, 17), ScaleTooLargeError);
  CHECK_NOTHROW(second_derivative(s, Direction::horizontal, 15));
  GeigConfig cfg;
  cfg.scales = {3, 17};
  CHECK_THROWS_AS(geig_transform(s, cfg), ScaleTooLargeError);
}

TEST_CASE("geig config invariants") {
  GeigConfig cfg;
  cfg.scales = {4};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.scales = {1};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.scales = {};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.scales = {3};
  cfg.directions = {};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("constant slice gives uniform 1/(d*s) derivative channels") {
  const Image<double> s = Image<double>::Constant(10, 9, -3.0);
  const GeigConfig cfg;
  const auto g = geig_transform(s, cfg);
  CHECK(g.channels() == 9);
  CHECK(g.height == 10);
  CHECK(g.width == 9);
  CHECK((g.data.col(0).array() == 0.0).all());
  for (int c = 1; c < 9; ++c)
    for (Index p = 0; p < g.pixels(); ++p) CHECK(g.data(p, c) == doctest::Approx(0.125).epsilon(1e-15));
}

TEST_CASE("a single direction and scale gives one channel identically 1") {
  std::mt19937_64 rng(5);
  GeigConfig cfg;
  cfg.directions = {Direction::vertical};
  cfg.scales = {3};
  cfg.include_intensity = false;
  const auto g = geig_transform(random_slice(8, 8, rng), cfg);
  REQUIRE(g.channels() == 1);
  CHECK((g.data.array() == 1.0).all());
}

TEST_CASE("derivative vector (2,0,...,0) softmaxes to e^2/(e^2+7) and 1/(e^2+7)") {
  // At p = (4, 4) only the horizontal scale-3 difference sees the two unit neighbours.
  Image<double> s = Image<double>::Zero(9, 9);
  s(4, 3) = 1.0;
  s(4, 5) = 1.0;
  const GeigConfig cfg;
  const auto g = geig_transform(s, cfg);
  const Index p = 4 * 9 + 4;
  // e^2/(e^2+7) and 1/(e^2+7), evaluated once with an independent scalar softmax.
  constexpr double kPeak = 0.5135191667978681;
  constexpr double kRest = 0.06949726188601883;
  CHECK(g.data(p, 1) == doctest::Approx(kPeak).epsilon(1e-14));
  for (int c = 2; c < 9; ++c) CHECK(g.data(p, c) == doctest::Approx(kRest).epsilon(1e-14));
}

TEST_CASE("derivative channels are positive and sum to one") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    Image<double> s = random_slice(12, 10, rng) * 50.0;
    const auto g = geig_transform(s, GeigConfig{});
    const auto deriv = g.data.rightCols(8);
    CHECK((deriv.array() > 0.0).all());
    CHECK((deriv.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-6);
  }
}

TEST_CASE("adding a constant leaves derivative channels unchanged exactly") {
  std::mt19937_64 rng(29);
  // Dyadic values keep the shifted slice exactly representable.
  std::uniform_int_distribution<int> u(-64, 64);
  Image<double> s(8, 8);
  for (Index i = 0; i < s.size(); ++i) s.data()[i] = u(rng) / 8.0;
  const Image<double> shifted = s + 12.5;
  const auto a = geig_transform(s, GeigConfig{});
  const auto b = geig_transform(shifted, GeigConfig{});
  CHECK((a.data.rightCols(8).array() == b.data.rightCols(8).array()).all());

  // With a fixed window only the intensity channel moves.
  const auto c = geig_transform(s, GeigConfig{}, IntensityRange{-20.0, 20.0});
  const auto d = geig_transform(shifted, GeigConfig{}, IntensityRange{-20.0, 20.0});
  CHECK((c.data.col(0).array() != d.data.col(0).array()).any());
  CHECK((c.data.rightCols(8).array() == d.data.rightCols(8).array()).all());
}

TEST_CASE("left-right mirroring mirrors the output and swaps the diagonals") {
  std::mt19937_64 rng(31);
  const auto s = random_slice(8, 11, rng);
  const Image<double> m = s.rowwise().reverse();
  GeigConfig cfg;
  const auto a = geig_transform(s, cfg);
  const auto b = geig_transform(m, cfg);
  // channel = 1 + direction*2 + scale; mirroring swaps diagonal_up (2) and diagonal_down (3).
  const int perm[9] = {0, 1, 2, 3, 4, 7, 8, 5, 6};
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 11; ++x)
      for (int c = 0; c < 9; ++c)
        CHECK(b.data(y * 11 + (10 - x), perm[c]) == doctest::Approx(a.data(y * 11 + x, c)).epsilon(1e-13));
}

TEST_CASE("intensity normalisation") {
  Image<double> s(2, 4);
  s << 1, 2, 3, 5, 5, 4, 3, 1;
  const auto n = normalize_intensity(s);
  CHECK(n.minCoeff() == 0.0);
  CHECK(n.maxCoeff() == 1.0);
  CHECK(n(0, 1) == doctest::Approx(0.25));
  const auto w = normalize_intensity(s, IntensityRange{0.0, 10.0});
  CHECK(w(0, 3) == doctest::Approx(0.5));
  CHECK((normalize_intensity(Image<double>(Image<double>::Constant(3, 3, 7.0))) == 0.0).all());
}

TEST_CASE("edge profile: constant slice gives uniform channels") {
  const auto e = edge_profile(Image<double>(Image<double>::Constant(8, 8, 2.0)), GeigConfig{}, 3);
  REQUIRE(e.channels() == 5);
  for (int c = 1; c < 5; ++c) CHECK((e.data.col(c).array() - 0.25).abs().maxCoeff() < 1e-15);
}

TEST_CASE("edge profile: raw horizontal difference of I=x is 2 at scale 3") {
  Image<double> s(8, 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) s(y, x) = x;
  const auto d = first_derivative(s, Direction::horizontal, 3);
  for (int y = 0; y < 8; ++y)
    for (int x = 1; x < 7; ++x) CHECK(d(y, x) == 2.0);
  CHECK(d(0, 0) == 0.0);  // reflect padding: I(1) - I(1)
}

TEST_CASE("edge profile and geig agree in channel count for one scale") {
  GeigConfig one;
  one.scales = {3};
  std::mt19937_64 rng(2);
  const auto s = random_slice(8, 8, rng);
  CHECK(edge_profile(s, one, 3).channels() == geig_transform(s, one).channels());
  CHECK(edge_profile(s, one, 3).channels() == 5);
}

TEST_CASE("input transform dispatches and reports its channel count") {
  std::mt19937_64 rng(3);
  const auto s = random_slice(9, 8, rng);
  InputTransform t;
  CHECK(t.channels() == 9);
  CHECK(t.apply<double>(s).channels() == 9);
  t.kind = InputKind::edge_profile;
  CHECK(t.channels() == 5);
  CHECK(t.apply<double>(s).channels() == 5);
  CHECK(parse_input_kind(to_string(InputKind::geig)) == InputKind::geig);
  CHECK_THROWS_AS(parse_input_kind("sobel"), ConfigError);
  for (Direction d : kAll) CHECK(parse_direction(to_string(d)) == d);
}

TEST_CASE("geig is deterministic and float agrees with double") {
  std::mt19937_64 rng(41);
  const auto s = random_slice(10, 10, rng);
  const auto a = geig_transform(s, GeigConfig{});
  const auto b = geig_transform(s, GeigConfig{});
  CHECK((a.data.array() == b.data.array()).all());
  const auto f = geig_transform<float>(s.cast<float>(), GeigConfig{});
  CHECK((f.data.cast<double>() - a.data).cwiseAbs().maxCoeff() < 1e-5);
}
