#include "stylediff/encoder.hpp"

#include <cmath>
#include <limits>

#include "stylediff/error.hpp"

namespace stylediff {

void EncoderConfig::validate() const {
  if (feature_dim <= 0 || num_heads <= 0 || feature_dim % num_heads != 0)
    throw ConfigError("feature_dim must be positive and divisible by num_heads");
  if (n_max <= 0 || n_max > 100) throw ConfigError("n_max must be in [1, 100]");
  if (horizon < 2) throw ConfigError("horizon must be >= 2");
  if (!(dt > 0.0)) throw ConfigError("encoder dt must be > 0");
  if (!(kappa_init > 0.0) || kappa_init > 1.0)
    throw ConfigError("kappa_init must be in (0, 1]");
  if (!(gamma_t > 0.0)) throw ConfigError("gamma_t must be > 0");
  if (spatial_hidden <= 0) throw ConfigError("spatial_hidden must be > 0");
  if (fusion_cap <= 0) throw ConfigError("fusion_cap must be > 0");
  if (static_cast<long>(n_max) * horizon > fusion_cap)
    throw ResourceError(
        "n_max * horizon = " + std::to_string(static_cast<long>(n_max) * horizon) +
        " exceeds the fused attention cap of " + std::to_string(fusion_cap));
}

Tensor pairwise_distances(const std::vector<Vec2>& positions,
                          const std::vector<bool>& in_range) {
  if (positions.size() != in_range.size())
    throw InputError("pairwise_distances: positions/in_range size mismatch");
  const int n = static_cast<int>(positions.size());
  for (int i = 0; i < n; ++i)
    if (in_range[static_cast<std::size_t>(i)] &&
        (!std::isfinite(positions[static_cast<std::size_t>(i)].x) ||
         !std::isfinite(positions[static_cast<std::size_t>(i)].y)))
      throw InputError("pairwise_distances: non-finite in-range position");
  const double inf = std::numeric_limits<double>::infinity();
  Tensor d(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (!in_range[static_cast<std::size_t>(i)] ||
          !in_range[static_cast<std::size_t>(j)]) {
        d.at(i, j) = inf;
      } else {
        d.at(i, j) = (positions[static_cast<std::size_t>(i)] -
                      positions[static_cast<std::size_t>(j)])
                         .norm();
      }
    }
  return d;
}

Tensor build_attention_mask(const Tensor& distances, double kappa, int heads,
                            const std::vector<bool>& valid) {
  if (distances.rank() != 2 || distances.rows() != distances.cols())
    throw InputError("build_attention_mask: distances must be square");
  const int n = distances.rows();
  if (static_cast<int>(valid.size()) != n)
    throw InputError("build_attention_mask: valid mask size mismatch");
  if (!(kappa > 0.0) || kappa > 1.0)
    throw ConfigError("build_attention_mask: kappa must be in (0, 1]");
  if (heads < 1) throw ConfigError("build_attention_mask: heads must be >= 1");
  Tensor base(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double d = distances.at(i, j);
      if (std::isnan(d) || d < 0.0)
        throw InputError("build_attention_mask: bad distance entry");
      double m = -kappa * std::min(d, kDistanceSentinel);
      if (!valid[static_cast<std::size_t>(i)] ||
          !valid[static_cast<std::size_t>(j)])
        m += kMaskPenalty;
      base.at(i, j) = m;
    }
  Tensor out(std::vector<int>{heads, n, n});
  for (int h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < base.numel(); ++i)
      out[static_cast<std::size_t>(h) * base.numel() + i] = base[i];
  return out;
}

// ---------------------------------------------------------------------------

namespace {

constexpr int kTokenFeat = 6;  // px, py, vx, vy, confidence, presence
constexpr int kEgoFeat = 5;
constexpr int kLightFeat = 2;
constexpr double kPosNorm = 100.0;  // meters
constexpr double kVelNorm = 30.0;   // m/s

Tensor time_positional_encoding(int horizon, int n_max, int dim) {
  Tensor pe(n_max * horizon, dim);
  for (int i = 0; i < horizon; ++i)
    for (int m = 0; m < n_max; ++m)
      for (int d = 0; d < dim; ++d) {
        const double freq =
            std::pow(10000.0, -2.0 * (d / 2) / static_cast<double>(dim));
        const double arg = i * freq;
        pe.at(i * n_max + m, d) = (d % 2 == 0) ? std::sin(arg) : std::cos(arg);
      }
  return pe;
}

double light_phase_code(LightPhase p) {
  switch (p) {
    case LightPhase::kRed: return 0.0;
    case LightPhase::kYellow: return 0.5;
    case LightPhase::kGreen: return 1.0;
  }
  return 1.0;
}

}  // namespace

StyleEncoder::StyleEncoder(EncoderConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void StyleEncoder::init_params(ParamStore& store, Rng& rng) const {
  Rng r = rng.split("encoder-init");
  const int d = cfg_.feature_dim;
  const int t = cfg_.horizon;
  const int hid = cfg_.spatial_hidden;
  auto w = [&r](int in, int out) {
    return Tensor::randn(in, out, r, 1.0 / std::sqrt(static_cast<double>(in)));
  };
  auto zeros = [](int in, int out) { return Tensor(in, out); };
  auto ones = [](int n) { return Tensor::full(1, n, 1.0); };

  store.add("enc.token.w", w(kTokenFeat, d));
  store.add("enc.token.b", zeros(1, d));
  store.add("enc.style_emb", Tensor::randn(kNumStyles, d, r, 0.02));
  store.add("enc.ego.w", w(kEgoFeat, d));
  store.add("enc.ego.b", zeros(1, d));
  store.add("enc.light.w", w(kLightFeat, d));
  store.add("enc.light.b", zeros(1, d));
  store.add("enc.kappa", Tensor::from_scalar(cfg_.kappa_init));
  store.add("enc.ln_a.g", ones(d));
  store.add("enc.ln_a.b", zeros(1, d));
  for (const char* nm : {"wq", "wk", "wv", "wo"})
    store.add(std::string("enc.attn_a.") + nm, w(d, d));
  for (const char* nm : {"bq", "bk", "bv", "bo"})
    store.add(std::string("enc.attn_a.") + nm, zeros(1, d));
  store.add("enc.ln_time.g", ones(d));
  store.add("enc.ln_time.b", zeros(1, d));
  store.add("enc.r_temporal", zeros(t, t));
  store.add("enc.ln_agent.g", ones(d));
  store.add("enc.ln_agent.b", zeros(1, d));
  store.add("enc.spatial.w", w(3 * d, d));
  store.add("enc.spatial.mlp1.w", w(2, hid));
  store.add("enc.spatial.mlp1.b", zeros(1, hid));
  store.add("enc.spatial.mlp2.w", w(hid, d));
  store.add("enc.spatial.mlp2.b", zeros(1, d));
  store.add("enc.ln_c.g", ones(d));
  store.add("enc.ln_c.b", zeros(1, d));
  for (const char* nm : {"wq", "wk", "wv", "wo"})
    store.add(std::string("enc.attn_c.") + nm, w(d, d));
  for (const char* nm : {"bq", "bk", "bv", "bo"})
    store.add(std::string("enc.attn_c.") + nm, zeros(1, d));
  store.add("enc.ln_out.g", ones(d));
  store.add("enc.ln_out.b", zeros(1, d));
}

std::vector<bool> StyleEncoder::token_validity(const Scenario& scene) const {
  const auto agent_valid = validity_mask(scene);
  std::vector<bool> tv(static_cast<std::size_t>(cfg_.n_max) * cfg_.horizon,
                       false);
  for (int i = 0; i < cfg_.horizon; ++i)
    for (int m = 0; m < cfg_.n_max; ++m)
      tv[static_cast<std::size_t>(i) * cfg_.n_max + m] =
          m < static_cast<int>(agent_valid.size()) &&
          agent_valid[static_cast<std::size_t>(m)];
  return tv;
}

Var StyleEncoder::encode_on_tape(Tape& tape, const ParamStore& store,
                                 const Scenario& scene, StyleTag style,
                                 EncodeTrace* trace) const {
  cfg_.validate();
  const int n = cfg_.n_max;
  const int t = cfg_.horizon;
  const int d = cfg_.feature_dim;
  const int heads = cfg_.num_heads;
  const int dh = d / heads;
  const int l = n * t;
  if (static_cast<int>(scene.agents.size()) > n)
    throw InputError("scene has " + std::to_string(scene.agents.size()) +
                     " agents but the encoder allows n_max = " +
                     std::to_string(n));

  // Gate invalid agents to "absent": zero features, origin position, and
  // out-of-range status for the internal distance geometry.
  const auto agent_valid = validity_mask(scene);
  std::vector<bool> valid(static_cast<std::size_t>(n), false);
  std::vector<Vec2> gpos(static_cast<std::size_t>(n));
  std::vector<Vec2> gvel(static_cast<std::size_t>(n));
  std::vector<double> gconf(static_cast<std::size_t>(n), 0.0);
  for (std::size_t m = 0; m < scene.agents.size(); ++m) {
    if (!agent_valid[m]) continue;
    valid[m] = true;
    gpos[m] = scene.agents[m].position;
    gvel[m] = scene.agents[m].velocity;
    gconf[m] = scene.agents[m].confidence;
  }
  int valid_count = 0;
  for (bool v : valid) valid_count += v ? 1 : 0;
  // Density over the gated set only; the scene-level figure counts agents the
  // gate removed, which would leak their positions into the output.
  int near_count = 0;
  for (int m = 0; m < n; ++m)
    if (valid[static_cast<std::size_t>(m)] &&
        (gpos[static_cast<std::size_t>(m)] - scene.ego.position).norm() <= 50.0)
      ++near_count;
  const double gated_density = static_cast<double>(near_count) / 0.5;

  // Distance geometry for the agent-level attention bias.
  const Tensor dist = pairwise_distances(gpos, valid);
  Tensor dist_eff(n, n);
  Tensor vmask(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      dist_eff.at(i, j) = std::min(dist.at(i, j), kDistanceSentinel);
      vmask.at(i, j) = (valid[static_cast<std::size_t>(i)] &&
                        valid[static_cast<std::size_t>(j)])
                           ? 0.0
                           : kMaskPenalty;
    }

  // Raw token features at constant-velocity extrapolated positions.
  Tensor feat(l, kTokenFeat);
  for (int i = 0; i < t; ++i)
    for (int m = 0; m < n; ++m) {
      if (!valid[static_cast<std::size_t>(m)]) continue;
      const double tau = (i + 1) * cfg_.dt;
      const Vec2 p = gpos[static_cast<std::size_t>(m)] +
                     gvel[static_cast<std::size_t>(m)] * tau;
      const int row = i * n + m;
      feat.at(row, 0) = p.x / kPosNorm;
      feat.at(row, 1) = p.y / kPosNorm;
      feat.at(row, 2) = gvel[static_cast<std::size_t>(m)].x / kVelNorm;
      feat.at(row, 3) = gvel[static_cast<std::size_t>(m)].y / kVelNorm;
      feat.at(row, 4) = gconf[static_cast<std::size_t>(m)];
      feat.at(row, 5) = 1.0;
    }

  // Global token features.
  double curv_ahead = 0.0;
  if (scene.route.size() >= 2 &&
      scene.curvature_profile.size() == scene.route.size()) {
    const auto cum = geom::cumulative_lengths(scene.route);
    const double s0 = geom::project_s(scene.route, scene.ego.position);
    for (std::size_t k = 0; k < scene.route.size(); ++k)
      if (cum[k] >= s0 && cum[k] <= s0 + 40.0)
        curv_ahead = std::max(curv_ahead, std::abs(scene.curvature_profile[k]));
  }
  const double v_limit =
      scene.lanes.empty() ? 10.0 : scene.lanes.front().speed_limit;
  Tensor ego_feat(1, kEgoFeat);
  ego_feat[0] = scene.ego.speed / kVelNorm;
  ego_feat[1] = v_limit / kVelNorm;
  ego_feat[2] = gated_density / 10.0;
  ego_feat[3] = curv_ahead * 10.0;
  ego_feat[4] = static_cast<double>(valid_count) / 10.0;
  Tensor light_feat(1, kLightFeat);
  if (scene.traffic_lights.empty()) {
    light_feat[0] = 1.0;  // no light behaves like a distant green
    light_feat[1] = 2.0;
  } else {
    const TrafficLight& tl = scene.traffic_lights.front();
    light_feat[0] = light_phase_code(tl.phase);
    light_feat[1] = (tl.position - scene.ego.position).norm() / kPosNorm;
  }

  auto p = [&](const std::string& name) { return tape.param(name, store.get(name)); };

  // Token embedding + time positional encoding + style embedding.
  Var tok = tape.linear(tape.constant(feat), p("enc.token.w"), p("enc.token.b"));
  tok = tape.add_const(tok, time_positional_encoding(t, n, d));
  const int style_idx = static_cast<int>(style);
  Var style_row = tape.slice_rows(p("enc.style_emb"), style_idx, style_idx + 1);
  tok = tape.add_rowvec(tok, style_row);
  Var ego_tok =
      tape.linear(tape.constant(ego_feat), p("enc.ego.w"), p("enc.ego.b"));
  Var light_tok =
      tape.linear(tape.constant(light_feat), p("enc.light.w"), p("enc.light.b"));

  // --- Stage A: per-time-step agent attention with the distance bias -----
  Var all_tokens = tape.concat_rows({tok, ego_tok, light_tok});
  Var ln_a = tape.layer_norm(all_tokens, p("enc.ln_a.g"), p("enc.ln_a.b"));
  Var qf = tape.linear(ln_a, p("enc.attn_a.wq"), p("enc.attn_a.bq"));
  Var kf = tape.linear(ln_a, p("enc.attn_a.wk"), p("enc.attn_a.bk"));
  Var vf = tape.linear(ln_a, p("enc.attn_a.wv"), p("enc.attn_a.bv"));
  Var bias_a = tape.distance_bias(
      p("enc.kappa"), cfg_.zero_distance_bias ? Tensor(n, n) : dist_eff, vmask);
  // Global key columns carry no distance bias.
  Var bias_ext = tape.concat_cols({bias_a, tape.constant(Tensor(n, 2))});
  Var kg = tape.slice_rows(kf, l, l + 2);
  Var vg = tape.slice_rows(vf, l, l + 2);
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<Var> time_blocks;
  time_blocks.reserve(static_cast<std::size_t>(t));
  for (int i = 0; i < t; ++i) {
    Var qi = tape.slice_rows(qf, i * n, (i + 1) * n);
    Var ki = tape.concat_rows({tape.slice_rows(kf, i * n, (i + 1) * n), kg});
    Var vi = tape.concat_rows({tape.slice_rows(vf, i * n, (i + 1) * n), vg});
    std::vector<Var> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      Var qih = tape.slice_cols(qi, h * dh, (h + 1) * dh);
      Var kih = tape.slice_cols(ki, h * dh, (h + 1) * dh);
      Var vih = tape.slice_cols(vi, h * dh, (h + 1) * dh);
      Var scores =
          tape.scale(tape.matmul(qih, tape.transpose(kih)), inv_sqrt_dh);
      scores = tape.add(scores, bias_ext);  // same bias on every head
      Var attn = tape.row_softmax(scores);
      head_outs.push_back(tape.matmul(attn, vih));
    }
    time_blocks.push_back(tape.concat_cols(head_outs));
  }
  Var stage_a = tape.concat_rows(time_blocks);
  Var tok1 = tape.add(
      tok, tape.linear(stage_a, p("enc.attn_a.wo"), p("enc.attn_a.bo")));

  // --- Temporal affinity over per-time pooled descriptors ----------------
  Tape::PoolGroups time_groups(static_cast<std::size_t>(t));
  for (int i = 0; i < t; ++i)
    for (int m = 0; m < n; ++m)
      if (valid[static_cast<std::size_t>(m)])
        time_groups[static_cast<std::size_t>(i)].push_back(
            {i * n + m, 1.0 / valid_count});
  Var v_time = tape.add_rowvec(tape.pool_rows(tok1, time_groups), ego_tok);
  v_time = tape.layer_norm(v_time, p("enc.ln_time.g"), p("enc.ln_time.b"));
  v_time = tape.scale(v_time, 1.0 / std::sqrt(static_cast<double>(d)));
  Var a_temporal = tape.exp_op(
      tape.add(tape.scale(tape.pairwise_sqdist(v_time), -cfg_.gamma_t),
               p("enc.r_temporal")));

  // --- Spatial affinity over per-agent pooled descriptors ----------------
  Tape::PoolGroups agent_groups(static_cast<std::size_t>(n));
  for (int m = 0; m < n; ++m)
    for (int i = 0; i < t; ++i)
      agent_groups[static_cast<std::size_t>(m)].push_back(
          {i * n + m, 1.0 / t});
  Var v_agent = tape.layer_norm(tape.pool_rows(tok1, agent_groups),
                                p("enc.ln_agent.g"), p("enc.ln_agent.b"));
  Tensor rel_pos(n * n, 2);
  std::vector<int> map_m(static_cast<std::size_t>(n) * n);
  std::vector<int> map_n(static_cast<std::size_t>(n) * n);
  for (int m = 0; m < n; ++m)
    for (int j = 0; j < n; ++j) {
      const int row = m * n + j;
      const Vec2 rel = gpos[static_cast<std::size_t>(m)] -
                       gpos[static_cast<std::size_t>(j)];
      rel_pos.at(row, 0) = rel.x / kPosNorm;
      rel_pos.at(row, 1) = rel.y / kPosNorm;
      map_m[static_cast<std::size_t>(row)] = m;
      map_n[static_cast<std::size_t>(row)] = j;
    }
  Var rel_emb = tape.linear(
      tape.gelu(tape.linear(tape.constant(rel_pos), p("enc.spatial.mlp1.w"),
                            p("enc.spatial.mlp1.b"))),
      p("enc.spatial.mlp2.w"), p("enc.spatial.mlp2.b"));
  Var pairs = tape.concat_cols({tape.replicate_rows(v_agent, map_m),
                                tape.replicate_rows(v_agent, map_n), rel_emb});
  // The pair score projects through W_s and collapses to a scalar by channel
  // mean before the sigmoid.
  Var a_spatial = tape.reshape(
      tape.sigmoid(tape.mean_cols(tape.matmul(pairs, p("enc.spatial.w")))),
      {n, n});

  // --- Fused prior --------------------------------------------------------
  Var fused = tape.kron(a_temporal, a_spatial);  // L x L, strictly positive

  // --- Stage C: full-grid attention modulated by the fused prior ---------
  const auto tok_valid = token_validity(scene);
  Tensor cmask(l, l);
  for (int i = 0; i < l; ++i)
    for (int j = 0; j < l; ++j)
      if (!tok_valid[static_cast<std::size_t>(i)] ||
          !tok_valid[static_cast<std::size_t>(j)])
        cmask.at(i, j) = kMaskPenalty;
  Var ln_c = tape.layer_norm(tok1, p("enc.ln_c.g"), p("enc.ln_c.b"));
  Var qc = tape.linear(ln_c, p("enc.attn_c.wq"), p("enc.attn_c.bq"));
  Var kc = tape.linear(ln_c, p("enc.attn_c.wk"), p("enc.attn_c.bk"));
  Var vc = tape.linear(ln_c, p("enc.attn_c.wv"), p("enc.attn_c.bv"));
  std::vector<Var> c_heads;
  c_heads.reserve(static_cast<std::size_t>(heads));
  Tensor c_weight_avg(l, l);
  for (int h = 0; h < heads; ++h) {
    Var qch = tape.slice_cols(qc, h * dh, (h + 1) * dh);
    Var kch = tape.slice_cols(kc, h * dh, (h + 1) * dh);
    Var vch = tape.slice_cols(vc, h * dh, (h + 1) * dh);
    Var scores =
        tape.scale(tape.matmul(qch, tape.transpose(kch)), inv_sqrt_dh);
    scores = tape.add_const(scores, cmask);
    Var attn = tape.row_softmax(scores);
    Var weighted = tape.renorm_rows(tape.mul(attn, fused));
    if (trace) {
      Tensor w = tape.val(weighted);
      w *= 1.0 / heads;
      c_weight_avg += w;
    }
    c_heads.push_back(tape.matmul(weighted, vch));
  }
  Var stage_c = tape.linear(tape.concat_cols(c_heads), p("enc.attn_c.wo"),
                            p("enc.attn_c.bo"));
  Var z = tape.layer_norm(tape.add(tok1, stage_c), p("enc.ln_out.g"),
                          p("enc.ln_out.b"));

  if (trace) {
    trace->temporal_affinity = tape.val(a_temporal);
    trace->spatial_affinity = tape.val(a_spatial);
    trace->fused_prior = tape.val(fused);
    trace->stage_c_weights = std::move(c_weight_avg);
    trace->time_descriptors = tape.val(v_time);
    trace->pair_features = tape.val(pairs);
  }
  return z;
}

StyleFeatures StyleEncoder::encode(const ParamStore& store,
                                   const Scenario& scene,
                                   StyleTag style) const {
  Tape tape;
  Var z = encode_on_tape(tape, store, scene, style);
  StyleFeatures sf;
  sf.z = tape.val(z);
  if (!sf.z.all_finite())
    throw NumericalError("style features contain non-finite values");
  sf.token_valid = token_validity(scene);
  sf.n_max = cfg_.n_max;
  sf.horizon = cfg_.horizon;
  sf.feature_dim = cfg_.feature_dim;
  return sf;
}

}  // namespace stylediff
