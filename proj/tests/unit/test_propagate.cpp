#include "sliceprop/errors.hpp"
#include "sliceprop/eval.hpp"
#include "sliceprop/propagate.hpp"

#include "../support/oracles.hpp"

#include <doctest.h>

#include <fstream>
#include <string>
#include <type_traits>

using namespace sliceprop;

namespace {

Phantom cylinder(Shape3 shape, double radius, std::uint64_t seed = 0) {
  PhantomSpec spec;
  spec.shape = shape;
  spec.background = 0.2;
  spec.background_noise_sigma = 0.05;
  spec.seed = seed;
  PhantomObject c;
  c.kind = ObjectKind::cylinder;
  c.center = {0, shape.height / 2.0, shape.width / 2.0};
  c.radii = {1, radius, radius};
  c.intensity = 0.6;
  c.z_start = 0;
  c.z_end = shape.depth;
  spec.objects = {c};
  return synth_volume(spec);
}

EncoderParams<double> small_model(const InputTransform& t, bool l2 = false) {
  EncoderConfig enc;
  enc.in_channels = t.channels();
  enc.hidden_channels = {6};
  enc.feature_dim = 4;
  enc.l2_normalize = l2;
  enc.seed = 11;
  return init_encoder<double>(enc);
}

PropagationConfig config(PropagationMode mode, int radius = 2) {
  PropagationConfig cfg;
  cfg.mode = mode;
  cfg.window = WindowSpec{radius};
  return cfg;
}

}  // namespace

// Propagation takes no pseudo-label argument at all.
static_assert(std::is_invocable_r_v<PropagationResult, decltype(&propagate_volume), const EncoderParams<double>&,
                                    const Volume&, int, const SliceMask&, const PropagationConfig&>);

TEST_CASE("annotated slice is reproduced exactly in both outputs") {
  const Phantom p = cylinder({7, 12, 12}, 3.0);
  for (PropagationMode mode :
       {PropagationMode::single_path, PropagationMode::dual_reuse_prev, PropagationMode::dual_zero_pl}) {
    const auto r = propagate_volume(small_model(InputTransform{}), p.volume, 3, p.mask.slice(3), config(mode));
    CHECK((r.binary.slice(3) == p.mask.slice(3)).all());
    CHECK((r.soft.slice(3) == p.mask.slice(3)).all());
    CHECK(r.soft.kind == MaskKind::soft);
    CHECK(r.binary.kind == MaskKind::binary);
    for (float v : r.soft.data) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
    for (float v : r.binary.data) CHECK((v == 0.0f || v == 1.0f));
  }
}

TEST_CASE("trace covers D-1 steps: forward chain then backward chain") {
  const Phantom p = cylinder({6, 10, 10}, 3.0);
  const auto r = propagate_volume(small_model(InputTransform{}), p.volume, 2, p.mask.slice(2),
                                  config(PropagationMode::dual_reuse_prev));
  CHECK(r.trace.seed.direction == "seed");
  CHECK(r.trace.seed.z == 2);
  CHECK(r.trace.seed.soft_mass == doctest::Approx(double(p.mask.slice_area(2))));
  REQUIRE(r.trace.steps.size() == 5);
  const int want_z[5] = {3, 4, 5, 1, 0};
  for (int i = 0; i < 5; ++i) {
    CHECK(r.trace.steps[i].z == want_z[i]);
    CHECK(r.trace.steps[i].direction == (i < 3 ? "forward" : "backward"));
    CHECK(r.trace.steps[i].max_value <= 1.0 + 1e-12);
  }
}

TEST_CASE("annotating the last slice runs the backward chain only") {
  const Phantom p = cylinder({5, 10, 10}, 3.0);
  const auto r = propagate_volume(small_model(InputTransform{}), p.volume, 4, p.mask.slice(4),
                                  config(PropagationMode::single_path));
  REQUIRE(r.trace.steps.size() == 4);
  for (const auto& s : r.trace.steps) CHECK(s.direction == "backward");
  const auto f = propagate_volume(small_model(InputTransform{}), p.volume, 0, p.mask.slice(0),
                                  config(PropagationMode::single_path));
  for (const auto& s : f.trace.steps) CHECK(s.direction == "forward");
}

TEST_CASE("the maximum soft value never grows along a chain") {
  // Each step is a convex combination per pixel.
  const Phantom p = cylinder({8, 12, 12}, 3.0, 2);
  const auto r = propagate_volume(small_model(InputTransform{}), p.volume, 4, p.mask.slice(4),
                                  config(PropagationMode::single_path));
  double prev = 1.0;
  for (const auto& s : r.trace.steps) {
    if (s.direction != "forward") break;
    CHECK(s.max_value <= prev + 1e-12);
    prev = s.max_value;
  }
}

TEST_CASE("copies of one slice keep the mask close to the annotation") {
  // Noise-free cylinder: the softmax spreads mass a little, so only a close match is required.
  PhantomSpec spec;
  spec.shape = {5, 12, 12};
  spec.background = 0.0;
  spec.seed = 1;
  PhantomObject c;
  c.kind = ObjectKind::cylinder;
  c.center = {0, 6, 6};
  c.radii = {1, 3.5, 3.5};
  c.intensity = 1.0;
  c.z_start = 0;
  c.z_end = 5;
  spec.objects = {c};
  const Phantom p = synth_volume(spec);
  const auto r = propagate_volume(small_model(InputTransform{}), p.volume, 2, p.mask.slice(2),
                                  config(PropagationMode::single_path, 1));
  for (int z = 0; z < 5; ++z) CHECK(dice(r.binary.slice(z), p.mask.slice(z)) > 0.8);
}

TEST_CASE("propagation is deterministic and the two dual modes differ") {
  const Phantom p = cylinder({6, 10, 10}, 3.0, 4);
  const auto m = small_model(InputTransform{});
  const auto a = propagate_volume(m, p.volume, 3, p.mask.slice(3), config(PropagationMode::dual_reuse_prev));
  const auto b = propagate_volume(m, p.volume, 3, p.mask.slice(3), config(PropagationMode::dual_reuse_prev));
  CHECK(a.soft.data == b.soft.data);
  const auto z = propagate_volume(m, p.volume, 3, p.mask.slice(3), config(PropagationMode::dual_zero_pl));
  CHECK(z.soft.data != a.soft.data);
}

TEST_CASE("invalid inputs are rejected") {
  const Phantom p = cylinder({4, 10, 10}, 3.0);
  const auto m = small_model(InputTransform{});
  const auto cfg = config(PropagationMode::single_path);
  CHECK_THROWS_AS(propagate_volume(m, p.volume, 4, p.mask.slice(0), cfg), ConfigError);
  CHECK_THROWS_AS(propagate_volume(m, p.volume, 0, SliceMask::Zero(10, 9), cfg), ShapeError);
  CHECK_THROWS_AS(propagate_volume(m, p.volume, 0, SliceMask::Zero(10, 10), cfg), EmptyMaskError);
  SliceMask half = SliceMask::Zero(10, 10);
  half(2, 2) = 0.5f;
  CHECK_THROWS_AS(propagate_volume(m, p.volume, 0, half, cfg), InvariantError);
  auto bad = cfg;
  bad.output_threshold = 1.0;
  CHECK_THROWS_AS(propagate_volume(m, p.volume, 0, p.mask.slice(0), bad), ConfigError);
  const auto wrong = small_model(InputTransform{.kind = InputKind::edge_profile});
  CHECK_THROWS_AS(propagate_volume(wrong, p.volume, 0, p.mask.slice(0), cfg), ShapeError);
}

TEST_CASE("propagation mode names round-trip") {
  for (PropagationMode mode :
       {PropagationMode::single_path, PropagationMode::dual_reuse_prev, PropagationMode::dual_zero_pl})
    CHECK(parse_propagation_mode(to_string(mode)) == mode);
  CHECK_THROWS_AS(parse_propagation_mode("dual"), ConfigError);
}

TEST_CASE("trace with ground truth gets Dice and a csv") {
  const Phantom p = cylinder({5, 10, 10}, 3.0);
  const auto tr = propagation_trace(small_model(InputTransform{}), p.volume, 2, p.mask.slice(2),
                                    config(PropagationMode::single_path), &p.mask);
  REQUIRE(tr.seed.dice.has_value());
  CHECK(*tr.seed.dice == 1.0);
  for (const auto& s : tr.steps) CHECK(s.dice.has_value());

  const auto dir = oracle::scratch_dir("trace");
  write_trace_csv(tr, dir / "trace.csv");
  std::ifstream in(dir / "trace.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "direction,z,soft_mass,max_value,dice");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 5);
}
