#include "stylediff/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "stylediff/error.hpp"

namespace stylediff {

// ---------------------------------------------------------------------------
// Schedule

void ScheduleConfig::validate() const {
  if (steps < 1) throw ConfigError("schedule steps must be >= 1");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
    throw ConfigError("schedule requires 0 < beta_start <= beta_end < 1");
}

NoiseSchedule NoiseSchedule::build(const ScheduleConfig& cfg) {
  cfg.validate();
  NoiseSchedule ns;
  ns.steps = cfg.steps;
  ns.beta.assign(static_cast<std::size_t>(cfg.steps) + 1, 0.0);
  ns.alpha.assign(static_cast<std::size_t>(cfg.steps) + 1, 1.0);
  ns.alpha_bar.assign(static_cast<std::size_t>(cfg.steps) + 1, 1.0);
  ns.sigma2.assign(static_cast<std::size_t>(cfg.steps) + 1, 0.0);
  for (int t = 1; t <= cfg.steps; ++t) {
    const double frac =
        cfg.steps == 1 ? 0.0 : static_cast<double>(t - 1) / (cfg.steps - 1);
    ns.beta[static_cast<std::size_t>(t)] =
        cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac;
    ns.alpha[static_cast<std::size_t>(t)] = 1.0 - ns.beta[static_cast<std::size_t>(t)];
    ns.alpha_bar[static_cast<std::size_t>(t)] =
        ns.alpha_bar[static_cast<std::size_t>(t) - 1] *
        ns.alpha[static_cast<std::size_t>(t)];
    ns.sigma2[static_cast<std::size_t>(t)] =
        (1.0 - ns.alpha_bar[static_cast<std::size_t>(t) - 1]) /
        (1.0 - ns.alpha_bar[static_cast<std::size_t>(t)]) *
        ns.beta[static_cast<std::size_t>(t)];
  }
  for (int t = 1; t <= cfg.steps; ++t) {
    if (!(ns.alpha_bar[static_cast<std::size_t>(t)] > 0.0) ||
        ns.alpha_bar[static_cast<std::size_t>(t)] >=
            ns.alpha_bar[static_cast<std::size_t>(t) - 1])
      throw NumericalError("alpha_bar must decrease strictly within (0, 1)");
  }
  return ns;
}

void NoiseSchedule::check_step(int t) const {
  if (t < 1 || t > steps)
    throw InputError("diffusion step " + std::to_string(t) +
                     " outside [1, " + std::to_string(steps) + "]");
}

double NoiseSchedule::sqrt_alpha_bar(int t) const {
  check_step(t);
  return std::sqrt(alpha_bar[static_cast<std::size_t>(t)]);
}

double NoiseSchedule::sqrt_one_minus_alpha_bar(int t) const {
  check_step(t);
  return std::sqrt(1.0 - alpha_bar[static_cast<std::size_t>(t)]);
}

bool NoiseSchedule::terminal_noise_dominated() const {
  return steps >= 1 &&
         std::sqrt(alpha_bar[static_cast<std::size_t>(steps)]) < 0.05;
}

Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps,
                     const NoiseSchedule& ns) {
  ns.check_step(t);
  if (!x0.same_shape(eps))
    throw InputError("forward_noise: x0/eps shape mismatch");
  const double a = ns.sqrt_alpha_bar(t);
  const double b = ns.sqrt_one_minus_alpha_bar(t);
  Tensor out = x0;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * out[i] + b * eps[i];
  return out;
}

Tensor denoise_step(const Tensor& x_t, int t, const Tensor& eps_hat,
                    const Tensor& noise, const NoiseSchedule& ns) {
  ns.check_step(t);
  if (!x_t.same_shape(eps_hat) || !x_t.same_shape(noise))
    throw InputError("denoise_step: shape mismatch");
  const double alpha = ns.alpha[static_cast<std::size_t>(t)];
  const double coeff = ns.beta[static_cast<std::size_t>(t)] /
                       ns.sqrt_one_minus_alpha_bar(t);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
  const double sigma = std::sqrt(ns.sigma2[static_cast<std::size_t>(t)]);
  Tensor out = x_t;
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = inv_sqrt_alpha * (out[i] - coeff * eps_hat[i]) + sigma * noise[i];
  if (!out.all_finite())
    throw NumericalError("denoise_step produced non-finite values at step " +
                         std::to_string(t));
  return out;
}

double noise_prediction_loss(const Tensor& eps_hat, const Tensor& eps) {
  if (!eps_hat.same_shape(eps))
    throw InputError("noise_prediction_loss: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < eps.numel(); ++i) {
    const double d = eps_hat[i] - eps[i];
    s += d * d;
  }
  return s / static_cast<double>(eps.numel());
}

// ---------------------------------------------------------------------------
// Denoiser

void DenoiserConfig::validate() const {
  if (width <= 0 || hidden <= 0 || token_hidden <= 0)
    throw ConfigError("denoiser widths must be positive");
  if (blocks < 1) throw ConfigError("denoiser needs at least one block");
  if (horizon < 2) throw ConfigError("denoiser horizon must be >= 2");
}

namespace {

Tensor sinusoid_row(double pos, int dim) {
  Tensor e(1, dim);
  for (int d = 0; d < dim; ++d) {
    const double freq = std::pow(10000.0, -2.0 * (d / 2) / static_cast<double>(dim));
    e[static_cast<std::size_t>(d)] =
        (d % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
  }
  return e;
}

Tensor trajectory_positional_encoding(int horizon, int dim) {
  Tensor pe(horizon, dim);
  for (int k = 0; k < horizon; ++k) {
    const Tensor row = sinusoid_row(static_cast<double>(k), dim);
    for (int d = 0; d < dim; ++d) pe.at(k, d) = row[static_cast<std::size_t>(d)];
  }
  return pe;
}

}  // namespace

Denoiser::Denoiser(DenoiserConfig cfg, int cond_dim)
    : cfg_(cfg), cond_dim_(cond_dim) {
  cfg_.validate();
  if (cond_dim_ <= 0) throw ConfigError("denoiser cond_dim must be positive");
}

void Denoiser::init_params(ParamStore& store, Rng& rng) const {
  Rng r = rng.split("denoiser-init");
  const int w = cfg_.width;
  auto mat = [&r](int in, int out) {
    return Tensor::randn(in, out, r, 1.0 / std::sqrt(static_cast<double>(in)));
  };
  auto small = [&r](int in, int out) { return Tensor::randn(in, out, r, 0.02); };
  auto zeros = [](int in, int out) { return Tensor(in, out); };
  auto ones = [](int n) { return Tensor::full(1, n, 1.0); };

  store.add("den.in.w", mat(2, w));
  store.add("den.in.b", zeros(1, w));
  store.add("den.time.mlp1.w", mat(w, w));
  store.add("den.time.mlp1.b", zeros(1, w));
  store.add("den.time.mlp2.w", mat(w, w));
  store.add("den.time.mlp2.b", zeros(1, w));
  store.add("den.ctx.wq", mat(w, cond_dim_));
  store.add("den.ctx.bq", zeros(1, cond_dim_));
  store.add("den.ctx.wo", mat(cond_dim_, w));
  store.add("den.ctx.bo", zeros(1, w));
  for (int k = 0; k < cfg_.blocks; ++k) {
    const std::string b = "den.blk" + std::to_string(k) + ".";
    store.add(b + "mod1.w", small(w, 2 * w));
    store.add(b + "mod1.b", zeros(1, 2 * w));
    store.add(b + "ln1.g", ones(w));
    store.add(b + "ln1.b", zeros(1, w));
    store.add(b + "ch1.w", mat(w, cfg_.hidden));
    store.add(b + "ch1.b", zeros(1, cfg_.hidden));
    store.add(b + "ch2.w", mat(cfg_.hidden, w));
    store.add(b + "ch2.b", zeros(1, w));
    store.add(b + "mod2.w", small(w, 2 * w));
    store.add(b + "mod2.b", zeros(1, 2 * w));
    store.add(b + "ln2.g", ones(w));
    store.add(b + "ln2.b", zeros(1, w));
    store.add(b + "tok1.w", mat(cfg_.horizon, cfg_.token_hidden));
    store.add(b + "tok1.b", zeros(1, cfg_.token_hidden));
    store.add(b + "tok2.w", mat(cfg_.token_hidden, cfg_.horizon));
    store.add(b + "tok2.b", zeros(1, cfg_.horizon));
  }
  store.add("den.final.ln.g", ones(w));
  store.add("den.final.ln.b", zeros(1, w));
  store.add("den.final.mod.w", small(w, 2 * w));
  store.add("den.final.mod.b", zeros(1, 2 * w));
  store.add("den.out.w", small(w, 2));
  store.add("den.out.b", zeros(1, 2));
}

Var Denoiser::forward_on_tape(Tape& tape, const ParamStore& store, Var x_t,
                              int t, int total_steps, Var z) const {
  if (t < 1 || t > total_steps)
    throw InputError("denoiser step t outside [1, total_steps]");
  const Tensor& xv = tape.val(x_t);
  if (xv.rank() != 2 || xv.rows() != cfg_.horizon || xv.cols() != 2)
    throw InputError("denoiser expects a horizon x 2 trajectory, got " +
                     xv.shape_str());
  const Tensor& zv = tape.val(z);
  if (zv.rank() != 2 || zv.cols() != cond_dim_)
    throw InputError("denoiser conditioning must be L x cond_dim, got " +
                     zv.shape_str());
  const int w = cfg_.width;
  auto p = [&](const std::string& name) { return tape.param(name, store.get(name)); };

  Var h = tape.linear(x_t, p("den.in.w"), p("den.in.b"));
  h = tape.add_const(h, trajectory_positional_encoding(cfg_.horizon, w));

  Var temb = tape.constant(sinusoid_row(static_cast<double>(t), w));
  temb = tape.linear(temb, p("den.time.mlp1.w"), p("den.time.mlp1.b"));
  temb = tape.gelu(temb);
  temb = tape.linear(temb, p("den.time.mlp2.w"), p("den.time.mlp2.b"));

  // Attention pooling of the conditioning tokens with a step-dependent query.
  Var q = tape.linear(temb, p("den.ctx.wq"), p("den.ctx.bq"));  // 1 x cond
  Var scores = tape.scale(tape.matmul(z, tape.transpose(q)),
                          1.0 / std::sqrt(static_cast<double>(cond_dim_)));
  Var attn = tape.row_softmax(tape.transpose(scores));  // 1 x L
  Var pooled = tape.matmul(attn, z);                    // 1 x cond
  Var ctx = tape.linear(pooled, p("den.ctx.wo"), p("den.ctx.bo"));
  Var cond = tape.add(temb, ctx);  // 1 x w

  for (int k = 0; k < cfg_.blocks; ++k) {
    const std::string b = "den.blk" + std::to_string(k) + ".";
    Var mod1 = tape.linear(cond, p(b + "mod1.w"), p(b + "mod1.b"));
    Var u = tape.layer_norm(h, p(b + "ln1.g"), p(b + "ln1.b"));
    u = tape.scale_shift(u, tape.slice_cols(mod1, 0, w),
                         tape.slice_cols(mod1, w, 2 * w));
    u = tape.linear(u, p(b + "ch1.w"), p(b + "ch1.b"));
    u = tape.gelu(u);
    u = tape.linear(u, p(b + "ch2.w"), p(b + "ch2.b"));
    h = tape.add(h, u);

    Var mod2 = tape.linear(cond, p(b + "mod2.w"), p(b + "mod2.b"));
    Var v = tape.layer_norm(h, p(b + "ln2.g"), p(b + "ln2.b"));
    v = tape.scale_shift(v, tape.slice_cols(mod2, 0, w),
                         tape.slice_cols(mod2, w, 2 * w));
    Var vt = tape.transpose(v);  // w x horizon
    vt = tape.linear(vt, p(b + "tok1.w"), p(b + "tok1.b"));
    vt = tape.gelu(vt);
    vt = tape.linear(vt, p(b + "tok2.w"), p(b + "tok2.b"));
    h = tape.add(h, tape.transpose(vt));
  }

  Var o = tape.layer_norm(h, p("den.final.ln.g"), p("den.final.ln.b"));
  Var modf = tape.linear(cond, p("den.final.mod.w"), p("den.final.mod.b"));
  o = tape.scale_shift(o, tape.slice_cols(modf, 0, w),
                       tape.slice_cols(modf, w, 2 * w));
  return tape.linear(o, p("den.out.w"), p("den.out.b"));
}

Tensor Denoiser::forward(const ParamStore& store, const Tensor& x_t, int t,
                         int total_steps, const Tensor& z) const {
  Tape tape;
  Var out = forward_on_tape(tape, store, tape.constant(x_t), t, total_steps,
                            tape.constant(z));
  return tape.val(out);
}

// ---------------------------------------------------------------------------
// Normalization

void NormStats::validate() const {
  if (!(std_x > 0.0) || !(std_y > 0.0) || !std::isfinite(mean_x) ||
      !std::isfinite(mean_y) || !std::isfinite(std_x) || !std::isfinite(std_y))
    throw ConfigError("normalization stats must be finite with positive std");
}

Tensor normalize_traj(const Tensor& metric, const NormStats& ns) {
  ns.validate();
  if (metric.rank() != 2 || metric.cols() != 2)
    throw InputError("trajectory must be K x 2");
  Tensor out = metric;
  for (int k = 0; k < out.rows(); ++k) {
    out.at(k, 0) = (out.at(k, 0) - ns.mean_x) / ns.std_x;
    out.at(k, 1) = (out.at(k, 1) - ns.mean_y) / ns.std_y;
  }
  return out;
}

Tensor denormalize_traj(const Tensor& unit, const NormStats& ns) {
  ns.validate();
  if (unit.rank() != 2 || unit.cols() != 2)
    throw InputError("trajectory must be K x 2");
  Tensor out = unit;
  for (int k = 0; k < out.rows(); ++k) {
    out.at(k, 0) = out.at(k, 0) * ns.std_x + ns.mean_x;
    out.at(k, 1) = out.at(k, 1) * ns.std_y + ns.mean_y;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Planner

void PlannerConfig::validate() const {
  encoder.validate();
  denoiser.validate();
  schedule.validate();
  guidance.validate();
  if (!(dt > 0.0)) throw ConfigError("planner dt must be > 0");
  if (encoder.horizon != denoiser.horizon)
    throw ConfigError("encoder and denoiser horizons must match");
  if (encoder.dt != dt)
    throw ConfigError("encoder dt must match the planner dt");
}

Planner::Planner(PlannerConfig cfg)
    : cfg_(std::move(cfg)),
      encoder_((cfg_.validate(), cfg_.encoder)),
      denoiser_(cfg_.denoiser, cfg_.encoder.feature_dim),
      sched_(NoiseSchedule::build(cfg_.schedule)) {}

void Planner::init_params(std::uint64_t seed) {
  if (params_.count() != 0)
    throw ConfigError("planner parameters are already initialized");
  Rng rng(seed);
  encoder_.init_params(params_, rng);
  denoiser_.init_params(params_, rng);
}

StyleFeatures Planner::encode_scene(const Scenario& scene, StyleTag style,
                                    bool zero_distance_bias) const {
  if (!zero_distance_bias) return encoder_.encode(params_, scene, style);
  EncoderConfig ablated = cfg_.encoder;
  ablated.zero_distance_bias = true;
  return StyleEncoder(ablated).encode(params_, scene, style);
}

SampleResult Planner::sample(const Scenario& scene,
                             const SampleRequest& req) const {
  if (req.num_samples < 1) throw InputError("num_samples must be >= 1");
  if (params_.count() == 0)
    throw ConfigError("planner parameters are not initialized");
  const int horizon = cfg_.denoiser.horizon;
  const int total = sched_.steps;

  const StyleFeatures sf =
      encode_scene(scene, req.style, req.zero_distance_bias);

  const GuidanceConfig gcfg =
      req.guidance_override ? *req.guidance_override : cfg_.guidance;
  const StyleProfile profile = StyleProfile::for_tag(req.style);
  GuidanceContext ctx;
  if (req.use_guidance)
    ctx = GuidanceContext::build(scene, profile, gcfg, horizon, cfg_.dt);

  SampleResult result;
  const Rng root = Rng(req.seed).split("sample");
  for (int b = 0; b < req.num_samples; ++b) {
    Rng rng = root.split(static_cast<std::uint64_t>(b));
    Tensor x = Tensor::randn(horizon, 2, rng);
    std::vector<TelemetryRow> telemetry;
    for (int t = total; t >= 1; --t) {
      Tensor eps_hat = denoiser_.forward(params_, x, t, total, sf.z);
      if (!eps_hat.all_finite())
        throw NumericalError("noise prediction is non-finite at step " +
                             std::to_string(t));
      if (req.use_guidance) {
        const double lambda = lambda_schedule(t, total, gcfg);
        if (lambda > 0.0) {
          // Decode the clean-trajectory estimate and take the energy gradient
          // in metric space.  The gradient chains back through the
          // de-normalization only; the decode is treated as a detached
          // estimate of the trajectory, since dragging its 1/sqrt(alpha_bar)
          // factor along re-amplifies early-step noise by orders of magnitude
          // and flattens the lambda(t) * beta_t schedule into whatever the
          // stability clip allows.
          const double sab = sched_.sqrt_alpha_bar(t);
          const double somab = sched_.sqrt_one_minus_alpha_bar(t);
          Tensor x0_hat = x;
          for (std::size_t i = 0; i < x0_hat.numel(); ++i)
            x0_hat[i] = (x0_hat[i] - somab * eps_hat[i]) / sab;
          const Tensor metric = denormalize_traj(x0_hat, norm_);
          const GuidanceEval ev = evaluate_guidance(metric, ctx, t, total);
          Tensor grad_xt = ev.grad;
          for (int k = 0; k < grad_xt.rows(); ++k) {
            grad_xt.at(k, 0) *= norm_.std_x;
            grad_xt.at(k, 1) *= norm_.std_y;
          }
          if (gcfg.gradient_clip > 0.0) {
            const double n = grad_xt.l2_norm();
            if (n > gcfg.gradient_clip) grad_xt *= gcfg.gradient_clip / n;
          }
          eps_hat = guided_noise(eps_hat, grad_xt, lambda, somab);
          telemetry.push_back({t, lambda, ev.w_collision, ev.w_speed,
                               ev.e_collision, ev.e_speed});
        }
      }
      Tensor noise(horizon, 2);
      if (t > 1) noise = Tensor::randn(horizon, 2, rng);
      x = denoise_step(x, t, eps_hat, noise, sched_);
    }
    result.trajectories.push_back(denormalize_traj(x, norm_));
    result.telemetry.push_back(std::move(telemetry));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Training

void accumulate_grads(std::map<std::string, Tensor>& dst,
                      const std::map<std::string, Tensor>& src) {
  for (const auto& [name, g] : src) {
    auto it = dst.find(name);
    if (it == dst.end())
      dst.emplace(name, g);
    else
      it->second += g;
  }
}

BatchResult training_loss(const Planner& planner,
                          const std::vector<TrainItem>& batch, Rng& rng) {
  if (batch.empty()) throw InputError("training batch is empty");
  const int horizon = planner.config().denoiser.horizon;
  for (const TrainItem& item : batch) {
    if (item.scene == nullptr) throw InputError("training item without a scene");
    if (item.x0_norm.rank() != 2 || item.x0_norm.rows() != horizon ||
        item.x0_norm.cols() != 2)
      throw InputError("training trajectory must be horizon x 2");
  }
  const NoiseSchedule& sched = planner.schedule();
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  // Group items by (scene, style) in first-appearance order so each distinct
  // condition is encoded exactly once.
  struct Group {
    const Scenario* scene;
    StyleTag style;
    std::vector<std::size_t> items;
  };
  std::vector<Group> groups;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    bool found = false;
    for (Group& g : groups)
      if (g.scene == batch[i].scene && g.style == batch[i].style) {
        g.items.push_back(i);
        found = true;
        break;
      }
    if (!found) groups.push_back({batch[i].scene, batch[i].style, {i}});
  }

  BatchResult result;
  for (const Group& group : groups) {
    Tape enc_tape;
    Var z_var = planner.encoder().encode_on_tape(enc_tape, planner.params(),
                                                 *group.scene, group.style);
    const Tensor z_val = enc_tape.val(z_var);
    Tensor grad_z(z_val.shape());

    for (std::size_t idx : group.items) {
      const TrainItem& item = batch[idx];
      const int t = rng.uniform_int(sched.steps) + 1;
      Tensor eps = Tensor::randn(horizon, 2, rng);
      const Tensor x_t = forward_noise(item.x0_norm, t, eps, sched);

      Tape tape;
      Var z_leaf = tape.leaf(z_val);
      Var pred = planner.denoiser().forward_on_tape(
          tape, planner.params(), tape.constant(x_t), t, sched.steps, z_leaf);
      Var loss = tape.mse(pred, tape.constant(std::move(eps)));
      result.loss += tape.val(loss)[0] * inv_b;
      tape.backward_seed(loss, Tensor::from_scalar(inv_b));
      accumulate_grads(result.grads, tape.param_grads());
      grad_z += tape.grad(z_leaf);
    }

    enc_tape.backward_seed(z_var, grad_z);
    accumulate_grads(result.grads, enc_tape.param_grads());
  }
  if (!std::isfinite(result.loss))
    throw NumericalError("training loss is non-finite");
  return result;
}

}  // namespace stylediff
