#include <cmath>
#include <vector>

#include "doctest.h"
#include "stylediff/diffusion.hpp"
#include "stylediff/error.hpp"

using namespace stylediff;

namespace {

PlannerConfig tiny_planner_config() {
  PlannerConfig cfg;
  cfg.encoder.feature_dim = 16;
  cfg.encoder.num_heads = 2;
  cfg.encoder.n_max = 3;
  cfg.encoder.horizon = 8;
  cfg.encoder.dt = 0.1;
  cfg.encoder.spatial_hidden = 8;
  cfg.denoiser.width = 16;
  cfg.denoiser.hidden = 16;
  cfg.denoiser.blocks = 2;
  cfg.denoiser.token_hidden = 8;
  cfg.denoiser.horizon = 8;
  cfg.schedule.steps = 30;
  cfg.schedule.beta_end = 0.2;
  cfg.dt = 0.1;
  return cfg;
}

Scenario tiny_scene(std::uint64_t seed) {
  GeneratorParams gp;
  gp.agent_count = 3;
  return generate_scenario(ScenarioKind::kStraight, seed, gp);
}

Tensor random_tensor(int r, int c, Rng& rng, double scale = 1.0) {
  Tensor t(r, c);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
  return t;
}

}  // namespace

TEST_SUITE("diffusion") {

TEST_CASE("linear beta schedule and posterior variance") {
  ScheduleConfig cfg;  // 1000 steps, 1e-4 -> 0.02
  const NoiseSchedule ns = NoiseSchedule::build(cfg);
  REQUIRE(ns.steps == 1000);
  REQUIRE(ns.beta.size() == 1001);

  CHECK(ns.beta[1] == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(ns.beta[1000] == doctest::Approx(0.02).epsilon(1e-15));
  // Linear interpolation over (t - 1) / (steps - 1).
  const double expect_mid = 1e-4 + (0.02 - 1e-4) * 499.0 / 999.0;
  CHECK(ns.beta[500] == doctest::Approx(expect_mid).epsilon(1e-12));

  CHECK(ns.alpha_bar[0] == 1.0);  // sentinel used by the posterior
  CHECK(ns.sigma2[1] == 0.0);     // exact: the last reverse step adds no noise
  for (int t = 1; t <= 1000; ++t) {
    CHECK(ns.alpha[t] == doctest::Approx(1.0 - ns.beta[t]).epsilon(1e-15));
    CHECK(ns.alpha_bar[t] > 0.0);
    CHECK(ns.alpha_bar[t] < 1.0);
    CHECK(ns.alpha_bar[t] < ns.alpha_bar[t - 1]);
    if (t >= 2) {
      CHECK(ns.beta[t] > ns.beta[t - 1]);
      const double expect =
          (1.0 - ns.alpha_bar[t - 1]) / (1.0 - ns.alpha_bar[t]) * ns.beta[t];
      CHECK(ns.sigma2[t] == doctest::Approx(expect).epsilon(1e-12));
      CHECK(ns.sigma2[t] < ns.beta[t]);  // posterior shrinks the step variance
    }
  }
  CHECK(ns.sqrt_alpha_bar(700) ==
        doctest::Approx(std::sqrt(ns.alpha_bar[700])).epsilon(1e-15));
  CHECK(ns.sqrt_one_minus_alpha_bar(700) ==
        doctest::Approx(std::sqrt(1.0 - ns.alpha_bar[700])).epsilon(1e-15));
}

TEST_CASE("terminal signal decay classification") {
  CHECK(NoiseSchedule::build(ScheduleConfig{}).terminal_noise_dominated());

  ScheduleConfig toy;
  toy.steps = 100;
  toy.beta_end = 0.2;
  CHECK(NoiseSchedule::build(toy).terminal_noise_dominated());

  ScheduleConfig stubby;
  stubby.steps = 10;
  stubby.beta_end = 0.002;
  CHECK_FALSE(NoiseSchedule::build(stubby).terminal_noise_dominated());
}

TEST_CASE("schedule bounds are validated") {
  ScheduleConfig cfg;
  cfg.steps = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ScheduleConfig{};
  cfg.beta_start = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ScheduleConfig{};
  cfg.beta_end = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ScheduleConfig{};
  cfg.beta_start = 0.03;
  cfg.beta_end = 0.02;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  const NoiseSchedule ns = NoiseSchedule::build(ScheduleConfig{});
  CHECK_THROWS_AS(ns.check_step(0), InputError);
  CHECK_THROWS_AS(ns.check_step(1001), InputError);
  CHECK_NOTHROW(ns.check_step(1));
  CHECK_NOTHROW(ns.check_step(1000));
}

TEST_CASE("forward corruption matches the closed form") {
  const NoiseSchedule ns = NoiseSchedule::build(ScheduleConfig{});
  Rng rng(31);
  const Tensor x0 = random_tensor(5, 2, rng, 3.0);
  const Tensor eps = random_tensor(5, 2, rng);
  const int t = 412;
  const Tensor xt = forward_noise(x0, t, eps, ns);
  const double sab = std::sqrt(ns.alpha_bar[t]);
  const double somab = std::sqrt(1.0 - ns.alpha_bar[t]);
  for (std::size_t i = 0; i < x0.numel(); ++i)
    CHECK(xt[i] == doctest::Approx(sab * x0[i] + somab * eps[i]).epsilon(1e-15));

  CHECK_THROWS_AS((void)forward_noise(x0, 0, eps, ns), InputError);
  CHECK_THROWS_AS((void)forward_noise(x0, t, random_tensor(4, 2, rng), ns),
                  InputError);
}

TEST_CASE("reverse step matches the posterior mean and variance") {
  const NoiseSchedule ns = NoiseSchedule::build(ScheduleConfig{});
  Rng rng(32);
  const Tensor x = random_tensor(6, 2, rng);
  const Tensor eps_hat = random_tensor(6, 2, rng);
  const Tensor noise = random_tensor(6, 2, rng);

  const int t = 137;
  const Tensor out = denoise_step(x, t, eps_hat, noise, ns);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(ns.alpha[t]);
  const double coef = ns.beta[t] / std::sqrt(1.0 - ns.alpha_bar[t]);
  const double sigma = std::sqrt(ns.sigma2[t]);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double mean = inv_sqrt_alpha * (x[i] - coef * eps_hat[i]);
    CHECK(out[i] == doctest::Approx(mean + sigma * noise[i]).epsilon(1e-12));
  }

  // The final step is deterministic: any noise argument gives the same x0.
  const Tensor a = denoise_step(x, 1, eps_hat, noise, ns);
  const Tensor b = denoise_step(x, 1, eps_hat, random_tensor(6, 2, rng), ns);
  CHECK(max_abs_diff(a, b) == 0.0);

  Tensor bad = x;
  bad[0] = std::nan("");
  CHECK_THROWS_AS((void)denoise_step(bad, t, eps_hat, noise, ns),
                  NumericalError);
}

TEST_CASE("noise prediction loss is the mean squared error") {
  Tensor a(2, 2), b(2, 2);
  a[0] = 1.0; a[1] = 2.0; a[2] = 3.0; a[3] = 4.0;
  b[0] = 0.0; b[1] = 4.0; b[2] = 3.0; b[3] = 2.0;
  // residuals 1, -2, 0, 2 -> mean of squares = 9/4
  CHECK(noise_prediction_loss(a, b) == doctest::Approx(2.25).epsilon(1e-15));
  CHECK(noise_prediction_loss(a, a) == 0.0);
  CHECK_THROWS_AS((void)noise_prediction_loss(a, Tensor(3, 2)), InputError);
}

TEST_CASE("iterated corruption agrees with the closed form in distribution") {
  ScheduleConfig cfg;
  cfg.steps = 20;
  cfg.beta_end = 0.2;
  const NoiseSchedule ns = NoiseSchedule::build(cfg);
  const double x0 = 0.7;
  const int n = 20000;

  Rng rng(9001);
  double sum_it = 0.0, sumsq_it = 0.0;
  double sum_cf = 0.0, sumsq_cf = 0.0;
  for (int i = 0; i < n; ++i) {
    double x = x0;
    for (int t = 1; t <= cfg.steps; ++t)
      x = std::sqrt(1.0 - ns.beta[t]) * x + std::sqrt(ns.beta[t]) * rng.normal();
    sum_it += x;
    sumsq_it += x * x;

    const double y = std::sqrt(ns.alpha_bar[cfg.steps]) * x0 +
                     std::sqrt(1.0 - ns.alpha_bar[cfg.steps]) * rng.normal();
    sum_cf += y;
    sumsq_cf += y * y;
  }
  const double mean_it = sum_it / n, mean_cf = sum_cf / n;
  const double var_it = sumsq_it / n - mean_it * mean_it;
  const double var_cf = sumsq_cf / n - mean_cf * mean_cf;

  const double expect_mean = std::sqrt(ns.alpha_bar[cfg.steps]) * x0;
  const double expect_var = 1.0 - ns.alpha_bar[cfg.steps];
  const double se_mean = std::sqrt(expect_var / n);
  const double se_var = expect_var * std::sqrt(2.0 / (n - 1));

  CHECK(std::abs(mean_it - expect_mean) < 3.0 * se_mean);
  CHECK(std::abs(mean_cf - expect_mean) < 3.0 * se_mean);
  CHECK(std::abs(var_it - expect_var) < 3.0 * se_var);
  CHECK(std::abs(var_cf - expect_var) < 3.0 * se_var);
}

TEST_CASE("denoiser forward is deterministic and condition-sensitive") {
  DenoiserConfig cfg;
  cfg.width = 16;
  cfg.hidden = 16;
  cfg.blocks = 2;
  cfg.token_hidden = 8;
  cfg.horizon = 8;
  const int cond_dim = 16;
  Denoiser den(cfg, cond_dim);
  ParamStore store;
  Rng rng(71);
  den.init_params(store, rng);

  Rng data_rng(72);
  const Tensor x = random_tensor(8, 2, data_rng);
  const Tensor z1 = random_tensor(6, cond_dim, data_rng);
  const Tensor z2 = random_tensor(6, cond_dim, data_rng);

  const Tensor e1 = den.forward(store, x, 10, 30, z1);
  REQUIRE(e1.rows() == 8);
  REQUIRE(e1.cols() == 2);
  CHECK(e1.all_finite());
  CHECK(max_abs_diff(e1, den.forward(store, x, 10, 30, z1)) == 0.0);
  CHECK(max_abs_diff(e1, den.forward(store, x, 10, 30, z2)) > 1e-9);
  CHECK(max_abs_diff(e1, den.forward(store, x, 25, 30, z1)) > 1e-9);

  // Taped and value paths agree.
  Tape tape;
  const Var xv = tape.constant(x);
  const Var zv = tape.constant(z1);
  const Var out = den.forward_on_tape(tape, store, xv, 10, 30, zv);
  CHECK(max_abs_diff(tape.val(out), e1) == 0.0);
}

TEST_CASE("trajectory normalization round trips") {
  NormStats ns;
  ns.mean_x = 12.0;
  ns.mean_y = -3.0;
  ns.std_x = 7.5;
  ns.std_y = 0.9;
  Rng rng(81);
  const Tensor metric = random_tensor(9, 2, rng, 20.0);
  const Tensor unit = normalize_traj(metric, ns);
  for (int k = 0; k < 9; ++k) {
    CHECK(unit.at(k, 0) ==
          doctest::Approx((metric.at(k, 0) - 12.0) / 7.5).epsilon(1e-15));
    CHECK(unit.at(k, 1) ==
          doctest::Approx((metric.at(k, 1) + 3.0) / 0.9).epsilon(1e-15));
  }
  CHECK(max_abs_diff(denormalize_traj(unit, ns), metric) < 1e-12);

  NormStats bad;
  bad.std_x = 0.0;
  CHECK_THROWS_AS((void)normalize_traj(metric, bad), ConfigError);
}

TEST_CASE("planner config cross-checks its parts") {
  PlannerConfig cfg = tiny_planner_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.denoiser.horizon = 9;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_planner_config();
  cfg.encoder.dt = 0.2;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_planner_config();
  cfg.dt = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("sampling is deterministic per seed and style") {
  Planner planner(tiny_planner_config());
  planner.init_params(1234);
  const Scenario scene = tiny_scene(5);

  SampleRequest req;
  req.style = StyleTag::kNormal;
  req.num_samples = 2;
  req.seed = 99;

  const SampleResult r1 = planner.sample(scene, req);
  const SampleResult r2 = planner.sample(scene, req);
  REQUIRE(r1.trajectories.size() == 2);
  REQUIRE(r2.trajectories.size() == 2);
  for (int s = 0; s < 2; ++s) {
    CHECK(r1.trajectories[std::size_t(s)].rows() == 8);
    CHECK(r1.trajectories[std::size_t(s)].all_finite());
    CHECK(max_abs_diff(r1.trajectories[std::size_t(s)],
                       r2.trajectories[std::size_t(s)]) == 0.0);
  }
  CHECK(max_abs_diff(r1.trajectories[0], r1.trajectories[1]) > 1e-9);

  SampleRequest other = req;
  other.seed = 100;
  const SampleResult r3 = planner.sample(scene, other);
  CHECK(max_abs_diff(r1.trajectories[0], r3.trajectories[0]) > 1e-9);

  // A fresh planner initialized with the same seed reproduces everything.
  Planner clone(tiny_planner_config());
  clone.init_params(1234);
  const SampleResult r4 = clone.sample(scene, req);
  CHECK(max_abs_diff(r1.trajectories[0], r4.trajectories[0]) == 0.0);
}

TEST_CASE("guidance telemetry covers every step of the reverse chain") {
  Planner planner(tiny_planner_config());
  planner.init_params(4321);
  const Scenario scene = tiny_scene(6);

  SampleRequest req;
  req.seed = 7;
  req.use_guidance = true;
  const SampleResult res = planner.sample(scene, req);
  REQUIRE(res.telemetry.size() == 1);
  const auto& rows = res.telemetry[0];
  REQUIRE(int(rows.size()) == planner.schedule().steps);
  const GuidanceConfig& gcfg = planner.config().guidance;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const int expect_t = planner.schedule().steps - int(i);
    CHECK(rows[i].t == expect_t);
    CHECK(rows[i].lambda ==
          doctest::Approx(
              lambda_schedule(expect_t, planner.schedule().steps, gcfg)));
    CHECK(rows[i].w_collision >= 0.0);
    CHECK(rows[i].w_speed >= 0.0);
    CHECK(std::isfinite(rows[i].e_collision));
    CHECK(std::isfinite(rows[i].e_speed));
  }

  SampleRequest off = req;
  off.use_guidance = false;
  const SampleResult res_off = planner.sample(scene, off);
  CHECK(res_off.telemetry[0].empty());
}

TEST_CASE("zero guidance strength reproduces the unguided chain bitwise") {
  Planner planner(tiny_planner_config());
  planner.init_params(2024);
  const Scenario scene = tiny_scene(9);

  SampleRequest off;
  off.seed = 42;
  off.use_guidance = false;

  SampleRequest zero = off;
  zero.use_guidance = true;
  GuidanceConfig flat;
  flat.lambda_base = 0.0;
  flat.lambda_slope = 0.0;
  zero.guidance_override = flat;

  const SampleResult a = planner.sample(scene, off);
  const SampleResult b = planner.sample(scene, zero);
  CHECK(max_abs_diff(a.trajectories[0], b.trajectories[0]) == 0.0);
}

TEST_CASE("training loss is finite and trainable on a tiny model") {
  PlannerConfig cfg = tiny_planner_config();
  Planner planner(cfg);
  planner.init_params(11);
  const Scenario scene = tiny_scene(13);

  // A plausible normalized target: straight line at cruise speed.
  Tensor x0(8, 2);
  for (int k = 0; k < 8; ++k) {
    x0.at(k, 0) = 0.1 * (k + 1) * 8.0;
    x0.at(k, 1) = 0.0;
  }
  const Tensor x0n = normalize_traj(x0, planner.norm_stats());

  std::vector<TrainItem> batch;
  TrainItem item;
  item.scene = &scene;
  item.style = StyleTag::kNormal;
  item.x0_norm = x0n;
  batch.push_back(item);
  item.style = StyleTag::kAggressive;
  batch.push_back(item);

  Rng rng(17);
  const BatchResult first = training_loss(planner, batch, rng);
  CHECK(std::isfinite(first.loss));
  CHECK(first.loss > 0.0);
  CHECK(!first.grads.empty());
  bool has_enc = false, has_den = false;
  for (const auto& [name, g] : first.grads) {
    CHECK(g.all_finite());
    has_enc = has_enc || name.rfind("enc.", 0) == 0;
    has_den = has_den || name.rfind("den.", 0) == 0;
  }
  CHECK(has_enc);
  CHECK(has_den);

  AdamOptimizer adam;
  double last = first.loss;
  Rng step_rng(18);
  double best = first.loss;
  for (int step = 0; step < 30; ++step) {
    const BatchResult r = training_loss(planner, batch, step_rng);
    adam.step(planner.params(), r.grads);
    last = r.loss;
    best = std::min(best, r.loss);
  }
  CHECK(std::isfinite(last));
  CHECK(best < first.loss);
}

TEST_CASE("gradient accumulation merges by name") {
  std::map<std::string, Tensor> dst, src;
  Tensor a(1, 2);
  a[0] = 1.0;
  a[1] = 2.0;
  dst["p"] = a;
  Tensor b(1, 2);
  b[0] = 0.5;
  b[1] = -1.0;
  src["p"] = b;
  Tensor c(2, 1);
  c[0] = 3.0;
  src["q"] = c;
  accumulate_grads(dst, src);
  CHECK(dst["p"][0] == doctest::Approx(1.5));
  CHECK(dst["p"][1] == doctest::Approx(1.0));
  REQUIRE(dst.count("q") == 1);
  CHECK(dst["q"][0] == doctest::Approx(3.0));
}

}  // TEST_SUITE
