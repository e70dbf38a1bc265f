#include <cmath>
#include <limits>

#include "doctest.h"
#include "stylediff/encoder.hpp"
#include "stylediff/error.hpp"

using namespace stylediff;

namespace {

EncoderConfig small_config() {
  EncoderConfig cfg;
  cfg.feature_dim = 16;
  cfg.num_heads = 2;
  cfg.n_max = 4;
  cfg.horizon = 5;
  cfg.dt = 0.1;
  cfg.spatial_hidden = 8;
  return cfg;
}

// Three agents: slot 1 fails the confidence gate, slot 3 is padding.
Scenario small_scene() {
  Scenario s;
  s.route = {{0, 0}, {50, 0}, {100, 0}};
  Lane lane;
  lane.points = s.route;
  lane.speed_limit = 10.0;
  lane.width = 3.5;
  s.lanes = {lane};
  s.ego.position = {0, 0};
  s.ego.heading = 0.0;
  s.ego.speed = 8.0;
  AgentState a;
  a.position = {5, 2};
  a.velocity = {6, 0};
  a.confidence = 0.9;
  a.in_range = true;
  AgentState b;
  b.position = {-4, 7};
  b.velocity = {0, 5};
  b.confidence = 0.45;
  b.in_range = true;
  AgentState c;
  c.position = {12, -3};
  c.velocity = {4, 1};
  c.confidence = 0.8;
  c.in_range = true;
  s.agents = {a, b, c};
  s.kind = ScenarioKind::kStraight;
  s.seed = 1;
  s.recompute_derived();
  return s;
}

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_SUITE("encoder") {

TEST_CASE("pairwise distances on a 3-4-5 triangle") {
  const std::vector<Vec2> pos{{0, 0}, {3, 0}, {3, 4}};
  const std::vector<bool> in{true, true, true};
  const Tensor d = pairwise_distances(pos, in);
  REQUIRE(d.rows() == 3);
  REQUIRE(d.cols() == 3);
  for (int i = 0; i < 3; ++i) CHECK(d.at(i, i) == 0.0);
  CHECK(d.at(0, 1) == doctest::Approx(3.0));
  CHECK(d.at(0, 2) == doctest::Approx(5.0));
  CHECK(d.at(1, 2) == doctest::Approx(4.0));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(d.at(i, j) == d.at(j, i));

  const std::vector<bool> gated{true, false, true};
  const Tensor d2 = pairwise_distances(pos, gated);
  const double inf = std::numeric_limits<double>::infinity();
  CHECK(d2.at(1, 1) == inf);
  CHECK(d2.at(0, 1) == inf);
  CHECK(d2.at(1, 2) == inf);
  CHECK(d2.at(2, 1) == inf);
  CHECK(d2.at(0, 2) == doctest::Approx(5.0));
  CHECK(d2.at(0, 0) == 0.0);
}

TEST_CASE("pairwise distances input validation") {
  CHECK_THROWS_AS((void)pairwise_distances({{0, 0}}, {true, true}), InputError);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS((void)pairwise_distances({{nan, 0}}, {true}), InputError);
  // A non-finite position on an out-of-range agent never enters the geometry.
  const Tensor ok = pairwise_distances({{nan, 0}, {1, 1}}, {false, true});
  CHECK(ok.at(1, 1) == 0.0);
}

TEST_CASE("attention mask bias and gating") {
  const std::vector<Vec2> pos{{0, 0}, {3, 0}, {3, 4}};
  const Tensor d = pairwise_distances(pos, {true, true, true});
  const Tensor mask = build_attention_mask(d, 0.2, 2, {true, false, true});
  REQUIRE(mask.shape() == std::vector<int>{2, 3, 3});
  const auto m = [&](int h, int i, int j) {
    return mask[std::size_t((h * 3 + i) * 3 + j)];
  };

  // Both heads carry an identical copy.
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(m(0, i, j) == m(1, i, j));

  CHECK(m(0, 0, 0) == 0.0);
  CHECK(m(0, 0, 2) == doctest::Approx(-1.0));  // -0.2 * 5
  CHECK(m(0, 2, 0) == doctest::Approx(-1.0));
  // Rows and columns of the invalid slot are pushed out of the softmax.
  for (int j = 0; j < 3; ++j) {
    CHECK(m(0, 1, j) <= kMaskPenalty);
    CHECK(m(0, j, 1) <= kMaskPenalty);
  }
}

TEST_CASE("attention mask clamps infinite distances to the sentinel") {
  Tensor d(2, 2);
  d.at(0, 1) = std::numeric_limits<double>::infinity();
  d.at(1, 0) = std::numeric_limits<double>::infinity();
  const Tensor mask = build_attention_mask(d, 0.5, 1, {true, true});
  CHECK(mask[1] == -0.5 * kDistanceSentinel);  // entry (0, 0, 1)
  CHECK(std::isfinite(mask[1]));
}

TEST_CASE("attention mask argument validation") {
  Tensor d(2, 2);
  CHECK_THROWS_AS((void)build_attention_mask(d, 0.0, 1, {true, true}),
                  ConfigError);
  CHECK_THROWS_AS((void)build_attention_mask(d, 1.0001, 1, {true, true}),
                  ConfigError);
  CHECK_NOTHROW((void)build_attention_mask(d, 1.0, 1, {true, true}));
  CHECK_THROWS_AS((void)build_attention_mask(Tensor(2, 3), 0.5, 1,
                                             {true, true}),
                  InputError);
  CHECK_THROWS_AS((void)build_attention_mask(d, 0.5, 1, {true}), InputError);
  Tensor neg(2, 2);
  neg.at(0, 1) = -1.0;
  CHECK_THROWS_AS((void)build_attention_mask(neg, 0.5, 1, {true, true}),
                  InputError);
}

TEST_CASE("config validation") {
  EncoderConfig cfg = small_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.feature_dim = 15;  // not divisible by 2 heads
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.horizon = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.kappa_init = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.kappa_init = 1.2;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.dt = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.gamma_t = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.n_max = 8;
  cfg.horizon = 2000;  // 16000 tokens > default cap of 8192
  CHECK_THROWS_AS(cfg.validate(), ResourceError);
}

TEST_CASE("too many agents is rejected") {
  EncoderConfig cfg = small_config();
  cfg.n_max = 2;
  StyleEncoder enc(cfg);
  ParamStore store;
  Rng rng(7);
  enc.init_params(store, rng);
  CHECK_THROWS_AS((void)enc.encode(store, small_scene(), StyleTag::kNormal),
                  InputError);
}

TEST_CASE("token validity follows slot-major layout") {
  StyleEncoder enc(small_config());
  const Scenario s = small_scene();
  const auto tv = enc.token_validity(s);
  REQUIRE(tv.size() == 20);  // 5 steps x 4 slots
  for (int i = 0; i < 5; ++i) {
    CHECK(tv[std::size_t(i * 4 + 0)]);        // valid agent
    CHECK_FALSE(tv[std::size_t(i * 4 + 1)]);  // low confidence
    CHECK(tv[std::size_t(i * 4 + 2)]);        // valid agent
    CHECK_FALSE(tv[std::size_t(i * 4 + 3)]);  // padding slot
  }
}

TEST_CASE("affinity traces match their closed-form definitions") {
  const EncoderConfig cfg = small_config();
  StyleEncoder enc(cfg);
  ParamStore store;
  Rng rng(101);
  enc.init_params(store, rng);

  // Give the learned temporal prior a deterministic non-zero value so the
  // reference computation exercises it.
  Tensor& r_temporal = store.get("enc.r_temporal");
  for (int i = 0; i < r_temporal.rows(); ++i)
    for (int j = 0; j < r_temporal.cols(); ++j)
      r_temporal.at(i, j) = 0.03 * std::sin(5.0 * i + j);

  const Scenario scene = small_scene();
  Tape tape;
  EncodeTrace trace;
  const Var z = enc.encode_on_tape(tape, store, scene, StyleTag::kNormal,
                                   &trace);
  const Tensor& zv = tape.val(z);
  const int n = cfg.n_max, t = cfg.horizon, d = cfg.feature_dim;
  const int l = n * t;
  REQUIRE(zv.rows() == l);
  REQUIRE(zv.cols() == d);
  REQUIRE(trace.temporal_affinity.rows() == t);
  REQUIRE(trace.spatial_affinity.rows() == n);
  REQUIRE(trace.fused_prior.rows() == l);
  REQUIRE(trace.stage_c_weights.rows() == l);
  REQUIRE(trace.time_descriptors.rows() == t);
  REQUIRE(trace.time_descriptors.cols() == d);
  REQUIRE(trace.pair_features.rows() == n * n);
  REQUIRE(trace.pair_features.cols() == 3 * d);

  SUBCASE("temporal affinity is a Gaussian kernel plus learned prior") {
    const Tensor& v = trace.time_descriptors;
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < t; ++j) {
        double sq = 0.0;
        for (int c = 0; c < d; ++c) {
          const double diff = v.at(i, c) - v.at(j, c);
          sq += diff * diff;
        }
        const double expect = std::exp(-cfg.gamma_t * sq + r_temporal.at(i, j));
        CHECK(trace.temporal_affinity.at(i, j) ==
              doctest::Approx(expect).epsilon(1e-8));
      }
  }

  SUBCASE("spatial affinity is a sigmoid gate over projected pair features") {
    const Tensor& pairs = trace.pair_features;
    const Tensor& w = store.get("enc.spatial.w");
    REQUIRE(w.rows() == 3 * d);
    REQUIRE(w.cols() == d);
    for (int row = 0; row < n * n; ++row) {
      double mean = 0.0;
      for (int c = 0; c < d; ++c) {
        double acc = 0.0;
        for (int k = 0; k < 3 * d; ++k) acc += pairs.at(row, k) * w.at(k, c);
        mean += acc;
      }
      mean /= d;
      CHECK(trace.spatial_affinity.at(row / n, row % n) ==
            doctest::Approx(sigmoid_ref(mean)).epsilon(1e-9));
    }
  }

  SUBCASE("fused prior is the Kronecker product of the two affinities") {
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < t; ++j)
        for (int m = 0; m < n; ++m)
          for (int k = 0; k < n; ++k) {
            const double expect = trace.temporal_affinity.at(i, j) *
                                  trace.spatial_affinity.at(m, k);
            CHECK(trace.fused_prior.at(i * n + m, j * n + k) ==
                  doctest::Approx(expect).epsilon(1e-12));
          }
    CHECK(trace.fused_prior.max_abs() > 0.0);
  }

  SUBCASE("modulated attention rows renormalize and respect the gate") {
    const auto tv = enc.token_validity(scene);
    for (int r = 0; r < l; ++r) {
      double sum = 0.0;
      for (int c = 0; c < l; ++c) {
        const double wrc = trace.stage_c_weights.at(r, c);
        CHECK(wrc >= 0.0);
        sum += wrc;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
    // Valid queries must place (numerically) no mass on invalid tokens.
    for (int r = 0; r < l; ++r) {
      if (!tv[std::size_t(r)]) continue;
      for (int c = 0; c < l; ++c)
        if (!tv[std::size_t(c)])
          CHECK(trace.stage_c_weights.at(r, c) < 1e-6);
    }
  }
}

TEST_CASE("invalid agents cannot influence the encoding") {
  const EncoderConfig cfg = small_config();
  StyleEncoder enc(cfg);
  ParamStore store;
  Rng rng(55);
  enc.init_params(store, rng);

  const Scenario base = small_scene();
  const Tensor z0 = enc.encode(store, base, StyleTag::kNormal).z;

  Scenario moved = base;
  moved.agents[1].position = {45, -30};
  moved.agents[1].velocity = {9, 9};
  moved.agents[1].confidence = 0.1;  // still below the gate
  moved.recompute_derived();
  const Tensor z1 = enc.encode(store, moved, StyleTag::kNormal).z;
  CHECK(max_abs_diff(z0, z1) == 0.0);

  // Gating by perception range behaves identically to low confidence.
  Scenario ranged = base;
  ranged.agents[1].confidence = 0.9;
  ranged.agents[1].in_range = false;
  ranged.recompute_derived();
  const Tensor z2 = enc.encode(store, ranged, StyleTag::kNormal).z;
  CHECK(max_abs_diff(z0, z2) == 0.0);

  // Making the agent visible has to change the output.
  Scenario visible = base;
  visible.agents[1].confidence = 0.95;
  visible.recompute_derived();
  const Tensor z3 = enc.encode(store, visible, StyleTag::kNormal).z;
  CHECK(max_abs_diff(z0, z3) > 1e-6);
}

TEST_CASE("style tag and distance bias both steer the output") {
  const EncoderConfig cfg = small_config();
  StyleEncoder enc(cfg);
  ParamStore store;
  Rng rng(77);
  enc.init_params(store, rng);
  const Scenario scene = small_scene();

  const Tensor za = enc.encode(store, scene, StyleTag::kAggressive).z;
  const Tensor zc = enc.encode(store, scene, StyleTag::kConservative).z;
  CHECK(max_abs_diff(za, zc) > 1e-6);

  EncoderConfig flat = cfg;
  flat.zero_distance_bias = true;
  StyleEncoder enc_flat(flat);
  const Tensor zn = enc.encode(store, scene, StyleTag::kNormal).z;
  const Tensor zf = enc_flat.encode(store, scene, StyleTag::kNormal).z;
  CHECK(max_abs_diff(zn, zf) > 1e-8);
}

TEST_CASE("value encode matches the taped encode") {
  const EncoderConfig cfg = small_config();
  StyleEncoder enc(cfg);
  ParamStore store;
  Rng rng(31);
  enc.init_params(store, rng);
  const Scenario scene = small_scene();

  Tape tape;
  const Var z = enc.encode_on_tape(tape, store, scene, StyleTag::kNormal);
  const StyleFeatures sf = enc.encode(store, scene, StyleTag::kNormal);
  CHECK(max_abs_diff(tape.val(z), sf.z) == 0.0);
  CHECK(sf.n_max == cfg.n_max);
  CHECK(sf.horizon == cfg.horizon);
  CHECK(sf.feature_dim == cfg.feature_dim);
  CHECK(sf.token_valid == enc.token_validity(scene));
}

TEST_CASE("an empty road still produces finite context tokens") {
  const EncoderConfig cfg = small_config();
  StyleEncoder enc(cfg);
  ParamStore store;
  Rng rng(13);
  enc.init_params(store, rng);
  Scenario scene = small_scene();
  scene.agents.clear();
  scene.recompute_derived();

  const StyleFeatures sf = enc.encode(store, scene, StyleTag::kNormal);
  CHECK(sf.z.all_finite());
  CHECK(sf.z.max_abs() > 0.0);  // global tokens inject scene context
  for (bool v : sf.token_valid) CHECK_FALSE(v);
}

TEST_CASE("encoding is deterministic for fixed parameters") {
  const EncoderConfig cfg = small_config();
  StyleEncoder enc(cfg);
  ParamStore store;
  Rng rng(99);
  enc.init_params(store, rng);
  const Scenario scene = small_scene();
  const Tensor z1 = enc.encode(store, scene, StyleTag::kNormal).z;
  const Tensor z2 = enc.encode(store, scene, StyleTag::kNormal).z;
  CHECK(max_abs_diff(z1, z2) == 0.0);
}

}  // TEST_SUITE
