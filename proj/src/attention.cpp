#include "nucleus/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace nucleus {

namespace {

void check_heads(int dim, int heads, const char* who) {
  if (heads <= 0 || dim % heads != 0) {
    throw std::invalid_argument(std::string(who) + ": heads must divide dim (" +
                                std::to_string(heads) + " vs " + std::to_string(dim) + ")");
  }
}

// [N, D] -> [heads, N, head_dim]
Tensor split_heads(const Tensor& x, int heads) {
  const int n = x.dim(0), d = x.dim(1);
  return permute(reshape(x, {n, heads, d / heads}), {1, 0, 2});
}

// [heads, N, head_dim] -> [N, D]
Tensor merge_heads(const Tensor& x) {
  const int heads = x.dim(0), n = x.dim(1), hd = x.dim(2);
  return reshape(permute(x, {1, 0, 2}), {n, heads * hd});
}

}  // namespace

SpatialAttention SpatialAttention::init(int dim, const AttentionConfig& cfg, Rng& rng) {
  check_heads(dim, cfg.heads, "SpatialAttention");
  if (cfg.radius < 0) throw std::invalid_argument("SpatialAttention: radius must be >= 0");
  SpatialAttention a;
  a.cfg = cfg;
  a.dim = dim;
  const float std = 1.0f / std::sqrt(static_cast<float>(dim));
  a.wq = randn({dim, dim}, rng, std).set_requires_grad();
  a.wk = randn({dim, dim}, rng, std).set_requires_grad();
  a.wv = randn({dim, dim}, rng, std).set_requires_grad();
  a.wo = randn({dim, dim}, rng, std).set_requires_grad();
  if (cfg.mode == AttentionConfig::Mode::neighborhood) {
    const int win = 2 * cfg.radius + 1;
    a.bias = Tensor::zeros({cfg.heads, win * win});
    a.bias.set_requires_grad();
  }
  return a;
}

Tensor SpatialAttention::forward(const Tensor& tokens, int hp, int wp) const {
  if (tokens.ndim() != 2 || tokens.dim(0) != hp * wp || tokens.dim(1) != dim) {
    throw TensorError("spatial_attention", "expected [" + std::to_string(hp * wp) + "," +
                                               std::to_string(dim) + "] tokens, got " +
                                               shape_str(tokens.shape()));
  }
  const float scale = 1.0f / std::sqrt(static_cast<float>(dim / cfg.heads));
  Tensor q = split_heads(matmul(tokens, wq), cfg.heads);
  Tensor k = split_heads(matmul(tokens, wk), cfg.heads);
  Tensor v = split_heads(matmul(tokens, wv), cfg.heads);
  Tensor core = cfg.mode == AttentionConfig::Mode::neighborhood
                    ? neighborhood_attention_core(q, k, v, bias, hp, wp, cfg.radius, scale)
                    : attention_core(q, k, v, scale);
  return matmul(merge_heads(core), wo);
}

std::vector<Tensor*> SpatialAttention::parameters() {
  std::vector<Tensor*> p{&wq, &wk, &wv, &wo};
  if (bias.defined()) p.push_back(&bias);
  return p;
}

TemporalAttention TemporalAttention::init(int dim, int heads, int max_frames, Rng& rng) {
  check_heads(dim, heads, "TemporalAttention");
  TemporalAttention a;
  a.dim = dim;
  a.heads = heads;
  a.max_frames = max_frames;
  const float std = 1.0f / std::sqrt(static_cast<float>(dim));
  a.wq = randn({dim, dim}, rng, std).set_requires_grad();
  a.wk = randn({dim, dim}, rng, std).set_requires_grad();
  a.wv = randn({dim, dim}, rng, std).set_requires_grad();
  a.wo = randn({dim, dim}, rng, std).set_requires_grad();
  a.frame_embed = Tensor::zeros({max_frames, dim});
  a.frame_embed.set_requires_grad();
  return a;
}

Tensor TemporalAttention::forward(const Tensor& tokens) const {
  if (tokens.ndim() != 3 || tokens.dim(2) != dim) {
    throw TensorError("temporal_attention",
                      "expected [F,S,D] tokens, got " + shape_str(tokens.shape()));
  }
  const int f = tokens.dim(0), s = tokens.dim(1);
  if (f > max_frames) {
    throw TensorError("temporal_attention", "history length " + std::to_string(f) +
                                                " exceeds max_frames " +
                                                std::to_string(max_frames));
  }
  std::vector<int> frame_idx(static_cast<std::size_t>(f));
  for (int i = 0; i < f; ++i) frame_idx[static_cast<std::size_t>(i)] = i;
  Tensor embeds = reshape(gather_rows(frame_embed, frame_idx), {f, 1, dim});
  Tensor x = add(tokens, embeds);

  Tensor flat = reshape(x, {f * s, dim});
  const int hd = dim / heads;
  // [F,S,heads,hd] -> [S,heads,F,hd] batches one sequence per (site, head)
  auto to_seq = [&](const Tensor& proj) {
    return reshape(permute(reshape(proj, {f, s, heads, hd}), {1, 2, 0, 3}), {s * heads, f, hd});
  };
  Tensor q = to_seq(matmul(flat, wq));
  Tensor k = to_seq(matmul(flat, wk));
  Tensor v = to_seq(matmul(flat, wv));
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  Tensor core = attention_core(q, k, v, scale);
  Tensor back = reshape(permute(reshape(core, {s, heads, f, hd}), {2, 0, 1, 3}), {f * s, dim});
  return reshape(matmul(back, wo), {f, s, dim});
}

std::vector<Tensor*> TemporalAttention::parameters() {
  return {&wq, &wk, &wv, &wo, &frame_embed};
}

AttentionCost attention_cost(int hp, int wp, int dim, int heads, int radius,
                             AttentionConfig::Mode mode) {
  if (hp <= 0 || wp <= 0 || dim <= 0 || heads <= 0 || dim % heads != 0 || radius < 0) {
    throw std::invalid_argument("attention_cost: invalid configuration");
  }
  const double n = static_cast<double>(hp) * wp;
  const double d = dim;
  AttentionCost c;
  if (mode == AttentionConfig::Mode::full) {
    c.score_flops = 4.0 * n * n * d;  // 2*N^2*D for QK^T, 2*N^2*D for A*V
    c.peak_score_values = n * n;
  } else {
    const double win = static_cast<double>(2 * radius + 1) * (2 * radius + 1);
    c.score_flops = 4.0 * n * win * d;
    c.peak_score_values = n * win;
  }
  c.projection_flops = 8.0 * n * d * d;  // four maps at 2*N*D^2 each
  c.flops = c.score_flops + c.projection_flops;
  return c;
}

}  // namespace nucleus
