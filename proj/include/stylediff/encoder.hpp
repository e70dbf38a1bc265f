#pragma once

#include <vector>

#include "stylediff/autodiff.hpp"
#include "stylediff/guidance.hpp"
#include "stylediff/scenario.hpp"

namespace stylediff {

// Out-of-range pair distances are reported as +infinity in the distance
// matrix; before entering the attention bias they are clamped to this large
// finite sentinel so arithmetic stays NaN-free.
inline constexpr double kDistanceSentinel = 1e9;
// Additive mask value that removes a row/column from attention.
inline constexpr double kMaskPenalty = -1e9;

struct EncoderConfig {
  int feature_dim = 128;  // token width D; divisible by num_heads
  int num_heads = 8;      // H
  int n_max = 8;          // agent slots per time step
  int horizon = 50;       // predicted time steps
  double dt = 0.1;        // seconds per predicted step
  double kappa_init = 0.1;   // distance-bias slope, constrained to (0, 1]
  double gamma_t = 0.05;     // temporal affinity bandwidth
  long fusion_cap = 8192;    // upper bound on n_max * horizon
  int spatial_hidden = 32;   // relative-position MLP width
  bool zero_distance_bias = false;  // ablation: drop the -kappa * d term

  void validate() const;  // throws ConfigError / ResourceError
};

struct StyleFeatures {
  Tensor z;  // (n_max * horizon) x feature_dim
  std::vector<bool> token_valid;  // padding and invalid agents are false
  int n_max = 0;
  int horizon = 0;
  int feature_dim = 0;
};

// Pairwise Euclidean distances between agent positions.  Any pair touching an
// out-of-range agent (including its diagonal) is +infinity; the diagonal of
// in-range agents is exactly zero.  Output is N x N and symmetric.
Tensor pairwise_distances(const std::vector<Vec2>& positions,
                          const std::vector<bool>& in_range);

// Additive attention bias: -kappa * min(d, sentinel), replicated over all
// heads, with rows and columns of invalid agents pushed to <= kMaskPenalty.
// kappa must lie in (0, 1].  Output shape is {heads, N, N}.
Tensor build_attention_mask(const Tensor& distances, double kappa, int heads,
                            const std::vector<bool>& valid);

// Optional introspection of the fused attention pipeline.
struct EncodeTrace {
  Tensor temporal_affinity;  // horizon x horizon
  Tensor spatial_affinity;   // n_max x n_max
  Tensor fused_prior;        // L x L Kronecker product
  Tensor stage_c_weights;    // L x L, head-averaged, after renormalization
  // Inputs of the two affinities, for definition-level reference checks.
  Tensor time_descriptors;   // horizon x D, the vectors the temporal kernel sees
  Tensor pair_features;      // (n_max^2) x 3D, rows scored by the spatial gate
};

// Scene-and-style encoder.  Produces one conditioning token per (time step,
// agent slot) pair; two global tokens (ego state, traffic light) participate
// in attention so every output token carries scene-level context even when
// all agent slots are empty.
//
// Agents that fail the validity test (confidence below threshold or out of
// perception range) are treated as absent: their features and positions are
// gated to zero before any computation, which makes the output exactly
// invariant to their content.
class StyleEncoder {
 public:
  explicit StyleEncoder(EncoderConfig cfg);

  const EncoderConfig& config() const { return cfg_; }

  // Registers every "enc.*" parameter in the store.
  void init_params(ParamStore& store, Rng& rng) const;

  // Differentiable encode; parameters are read from `store` through the tape.
  Var encode_on_tape(Tape& tape, const ParamStore& store,
                     const Scenario& scene, StyleTag style,
                     EncodeTrace* trace = nullptr) const;

  // Value-only encode.
  StyleFeatures encode(const ParamStore& store, const Scenario& scene,
                       StyleTag style) const;

  // Validity of each of the n_max * horizon output tokens.
  std::vector<bool> token_validity(const Scenario& scene) const;

 private:
  EncoderConfig cfg_;
};

}  // namespace stylediff
