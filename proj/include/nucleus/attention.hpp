#pragma once

#include <vector>

#include "nucleus/tensor.hpp"

namespace nucleus {

struct AttentionConfig {
  enum class Mode { neighborhood, full };
  int heads = 4;
  int radius = 3;  // patch units
  Mode mode = Mode::neighborhood;
};

/// Spatial attention over one frame of an Hp x Wp token grid. Neighborhood
/// mode restricts each query to keys within Chebyshev radius r (clamped at
/// the borders, no padding keys) and adds a learned relative-position bias
/// per head; full mode is standard global attention with no position bias.
struct SpatialAttention {
  AttentionConfig cfg;
  int dim = 0;
  Tensor wq, wk, wv, wo;  // [D, D]
  Tensor bias;            // [heads, (2r+1)^2], neighborhood mode only

  static SpatialAttention init(int dim, const AttentionConfig& cfg, Rng& rng);
  /// tokens: [N, D] with N = hp*wp.
  Tensor forward(const Tensor& tokens, int hp, int wp) const;
  std::vector<Tensor*> parameters();
};

/// Full attention across the F history frames at each fixed spatial site,
/// with additive learned frame embeddings (zero-initialized).
struct TemporalAttention {
  int dim = 0;
  int heads = 0;
  int max_frames = 0;
  Tensor wq, wk, wv, wo;
  Tensor frame_embed;  // [max_frames, D]

  static TemporalAttention init(int dim, int heads, int max_frames, Rng& rng);
  /// tokens: [F, S, D] with F <= max_frames.
  Tensor forward(const Tensor& tokens) const;
  std::vector<Tensor*> parameters();
};

struct AttentionCost {
  double score_flops = 0.0;       // QK^T plus weights x V
  double projection_flops = 0.0;  // the four linear maps
  double flops = 0.0;
  double peak_score_values = 0.0;  // resident attention scores
};

/// Closed-form cost model for one spatial attention layer (Table-style
/// scaling analysis; neighborhood windows are counted unclamped).
AttentionCost attention_cost(int hp, int wp, int dim, int heads, int radius,
                             AttentionConfig::Mode mode);

}  // namespace nucleus
