#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nucleus/tensor.hpp"

namespace nucleus {

struct MoeConfig {
  int experts = 8;
  int top_k = 2;
  int expert_hidden = 0;
  float alpha = 0.01f;      // load-balance weight
  bool renormalize = true;  // renormalize top-k combine weights (ablation flag)
};

/// Two-layer MLP, D -> hidden -> D with a smooth nonlinearity.
struct Expert {
  Tensor w1, b1, w2, b2;
  static Expert init(int dim, int hidden, Rng& rng);
  Tensor forward(const Tensor& x) const;
  std::vector<Tensor*> parameters();
};

struct ExpertPool {
  MoeConfig cfg;
  int dim = 0;
  std::vector<Expert> experts;  // no shared parameters
  Tensor router_w;              // [D, E]

  static ExpertPool init(int dim, const MoeConfig& cfg, Rng& rng);
  std::vector<Tensor*> parameters();
};

/// Routing outcome for one batch of tokens. probs/combine stay on the tape
/// (gradients flow through them); selections and aggregates are plain values.
struct RoutingRecord {
  Tensor probs;    // [T, E] softmax of router logits
  Tensor combine;  // [T, k] combine weights (renormalized unless disabled)
  std::vector<int> selected;            // [T*k], token-major expert ids
  std::vector<float> dispatch_fraction; // f_e, from hard assignments
  std::vector<float> mean_prob;         // p-bar_e

  int tokens = 0;
  int experts = 0;
  int top_k = 0;
  // token -> (frame, i, j) provenance for occupancy maps; set by callers
  // that route grid tokens
  int frames = 1, hp = 0, wp = 0;

  /// Sub-record holding only the tokens of one frame (requires provenance).
  RoutingRecord for_frame(int frame) const;
};

/// Softmax routing with deterministic top-k (ties break toward the smaller
/// expert index).
RoutingRecord route(const Tensor& tokens, const ExpertPool& pool);

/// Routing with externally pinned expert selections: probabilities and
/// combine weights are recomputed from the tokens (so gradients still flow
/// through the router) but the top-k choice is frozen. This is what a
/// finite-difference check needs — top-k is not differentiated through.
RoutingRecord route_frozen(const Tensor& tokens, const ExpertPool& pool,
                           const std::vector<int>& selected);

/// out(x) = sum_j w_j(x) * Expert_{g_j(x)}(x). Gradients flow through the
/// combine weights (hence the router) and through selected experts only.
Tensor moe_forward(const Tensor& tokens, const ExpertPool& pool, const RoutingRecord& rec);

/// alpha * E * sum_e f_e * pbar_e; f_e is non-differentiable (hard counts),
/// the gradient flows via pbar_e.
Tensor load_balance_loss(const RoutingRecord& rec, const MoeConfig& cfg);

/// Per-expert binary occupancy mask over the patch grid for one frame of a
/// record: mask[e][i*wp+j] = 1 iff token (i,j) dispatched to expert e.
std::vector<std::vector<std::uint8_t>> occupancy_map(const RoutingRecord& rec, int frame = -1);

/// CSV dump (token, frame, i, j, expert_0..k-1, weight_0..k-1) per row.
void write_routing_csv(const RoutingRecord& rec, const std::string& path);

}  // namespace nucleus
