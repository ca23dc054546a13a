#include "nucleus/moe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace nucleus {

Expert Expert::init(int dim, int hidden, Rng& rng) {
  Expert e;
  const float s1 = 1.0f / std::sqrt(static_cast<float>(dim));
  const float s2 = 1.0f / std::sqrt(static_cast<float>(hidden));
  e.w1 = randn({dim, hidden}, rng, s1).set_requires_grad();
  e.b1 = Tensor::zeros({hidden});
  e.b1.set_requires_grad();
  e.w2 = randn({hidden, dim}, rng, s2).set_requires_grad();
  e.b2 = Tensor::zeros({dim});
  e.b2.set_requires_grad();
  return e;
}

Tensor Expert::forward(const Tensor& x) const {
  return add(matmul(gelu(add(matmul(x, w1), b1)), w2), b2);
}

std::vector<Tensor*> Expert::parameters() { return {&w1, &b1, &w2, &b2}; }

ExpertPool ExpertPool::init(int dim, const MoeConfig& cfg, Rng& rng) {
  if (cfg.top_k < 1 || cfg.top_k > cfg.experts) {
    throw std::invalid_argument("ExpertPool: need 1 <= top_k <= experts");
  }
  if (cfg.expert_hidden <= 0) {
    throw std::invalid_argument("ExpertPool: expert_hidden must be positive");
  }
  ExpertPool p;
  p.cfg = cfg;
  p.dim = dim;
  for (int e = 0; e < cfg.experts; ++e) p.experts.push_back(Expert::init(dim, cfg.expert_hidden, rng));
  p.router_w = randn({dim, cfg.experts}, rng, 0.02f).set_requires_grad();
  return p;
}

std::vector<Tensor*> ExpertPool::parameters() {
  std::vector<Tensor*> out{&router_w};
  for (auto& e : experts) {
    for (Tensor* t : e.parameters()) out.push_back(t);
  }
  return out;
}

namespace {

RoutingRecord finish_record(const Tensor& probs, std::vector<int> selected, int t_count,
                            const MoeConfig& cfg) {
  RoutingRecord rec;
  rec.tokens = t_count;
  rec.experts = cfg.experts;
  rec.top_k = cfg.top_k;
  rec.probs = probs;
  rec.selected = std::move(selected);

  const int k = cfg.top_k;
  std::vector<int> combine_idx(static_cast<std::size_t>(t_count) * k);
  std::vector<int> counts(static_cast<std::size_t>(cfg.experts), 0);
  for (int t = 0; t < t_count; ++t) {
    for (int j = 0; j < k; ++j) {
      const int e = rec.selected[static_cast<std::size_t>(t) * k + j];
      combine_idx[static_cast<std::size_t>(t) * k + j] = t * cfg.experts + e;
      ++counts[e];
    }
  }
  Tensor picked = gather_elems(rec.probs, combine_idx, {t_count, k});
  if (cfg.renormalize) {
    Tensor norm = reshape(sum(picked, 1), {t_count, 1});
    rec.combine = divide(picked, norm);
  } else {
    rec.combine = picked;
  }

  const auto pv = rec.probs.values();
  rec.dispatch_fraction.resize(static_cast<std::size_t>(cfg.experts));
  rec.mean_prob.resize(static_cast<std::size_t>(cfg.experts));
  for (int e = 0; e < cfg.experts; ++e) {
    rec.dispatch_fraction[e] =
        static_cast<float>(counts[e]) / (static_cast<float>(t_count) * k);
    double acc = 0.0;
    for (int t = 0; t < t_count; ++t) acc += pv[static_cast<std::size_t>(t) * cfg.experts + e];
    rec.mean_prob[e] = static_cast<float>(acc / t_count);
  }
  return rec;
}

}  // namespace

RoutingRecord route(const Tensor& tokens, const ExpertPool& pool) {
  if (tokens.ndim() != 2 || tokens.dim(1) != pool.dim) {
    throw TensorError("route", "expected [T," + std::to_string(pool.dim) + "] tokens, got " +
                                   shape_str(tokens.shape()));
  }
  const int t_count = tokens.dim(0);
  const int e_count = pool.cfg.experts;
  const int k = pool.cfg.top_k;

  Tensor probs = softmax(matmul(tokens, pool.router_w), 1);
  std::vector<int> selected(static_cast<std::size_t>(t_count) * k);
  std::vector<int> order(static_cast<std::size_t>(e_count));
  const auto pv = probs.values();
  for (int t = 0; t < t_count; ++t) {
    std::iota(order.begin(), order.end(), 0);
    const float* row = pv.data() + static_cast<std::size_t>(t) * e_count;
    // ties break toward the smaller expert index
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return row[a] > row[b]; });
    for (int j = 0; j < k; ++j) selected[static_cast<std::size_t>(t) * k + j] = order[j];
  }
  return finish_record(probs, std::move(selected), t_count, pool.cfg);
}

RoutingRecord route_frozen(const Tensor& tokens, const ExpertPool& pool,
                           const std::vector<int>& selected) {
  const int t_count = tokens.dim(0);
  if (selected.size() != static_cast<std::size_t>(t_count) * pool.cfg.top_k) {
    throw TensorError("route_frozen", "selection size does not match tokens * top_k");
  }
  Tensor probs = softmax(matmul(tokens, pool.router_w), 1);
  return finish_record(probs, selected, t_count, pool.cfg);
}

Tensor moe_forward(const Tensor& tokens, const ExpertPool& pool, const RoutingRecord& rec) {
  if (rec.tokens != tokens.dim(0) || rec.experts != pool.cfg.experts) {
    throw TensorError("moe_forward", "routing record does not match tokens/pool");
  }
  const int t_count = rec.tokens;
  const int k = rec.top_k;
  Tensor out = Tensor::zeros({t_count, pool.dim});
  for (int e = 0; e < pool.cfg.experts; ++e) {
    std::vector<int> token_idx;
    std::vector<int> slot_idx;  // flat index into the [T,k] combine weights
    for (int t = 0; t < t_count; ++t) {
      for (int j = 0; j < k; ++j) {
        if (rec.selected[static_cast<std::size_t>(t) * k + j] == e) {
          token_idx.push_back(t);
          slot_idx.push_back(t * k + j);
        }
      }
    }
    if (token_idx.empty()) continue;
    Tensor xe = gather_rows(tokens, token_idx);
    Tensor ye = pool.experts[static_cast<std::size_t>(e)].forward(xe);
    Tensor we = gather_elems(rec.combine, slot_idx, {static_cast<int>(slot_idx.size()), 1});
    out = add(out, scatter_add_rows(mul(ye, we), token_idx, t_count));
  }
  return out;
}

Tensor load_balance_loss(const RoutingRecord& rec, const MoeConfig& cfg) {
  if (static_cast<int>(rec.dispatch_fraction.size()) != cfg.experts) {
    throw TensorError("load_balance_loss", "record does not match config");
  }
  Tensor f({cfg.experts}, std::vector<float>(rec.dispatch_fraction));
  Tensor pbar = mean(rec.probs, 0);  // differentiable path to the router
  return mul(sum(mul(pbar, f)), cfg.alpha * static_cast<float>(cfg.experts));
}

RoutingRecord RoutingRecord::for_frame(int frame) const {
  if (hp <= 0 || wp <= 0) throw std::invalid_argument("RoutingRecord: no grid provenance");
  const int s = hp * wp;
  if (frame < 0 || frame >= frames) throw std::invalid_argument("RoutingRecord: bad frame");
  RoutingRecord sub;
  sub.tokens = s;
  sub.experts = experts;
  sub.top_k = top_k;
  sub.frames = 1;
  sub.hp = hp;
  sub.wp = wp;
  std::vector<int> rows(static_cast<std::size_t>(s));
  std::iota(rows.begin(), rows.end(), frame * s);
  {
    NoGradGuard ng;  // sub-records are for reporting, not training
    sub.probs = gather_rows(probs, rows);
    std::vector<int> slots(static_cast<std::size_t>(s) * top_k);
    for (int t = 0; t < s; ++t)
      for (int j = 0; j < top_k; ++j)
        slots[static_cast<std::size_t>(t) * top_k + j] = (frame * s + t) * top_k + j;
    sub.combine = gather_elems(combine, slots, {s, top_k});
    sub.selected.resize(slots.size());
    for (std::size_t i = 0; i < slots.size(); ++i) sub.selected[i] = selected[slots[i]];
  }
  std::vector<int> counts(static_cast<std::size_t>(experts), 0);
  for (int id : sub.selected) ++counts[id];
  sub.dispatch_fraction.resize(static_cast<std::size_t>(experts));
  sub.mean_prob.resize(static_cast<std::size_t>(experts));
  const auto pv = sub.probs.values();
  for (int e = 0; e < experts; ++e) {
    sub.dispatch_fraction[e] = static_cast<float>(counts[e]) / (static_cast<float>(s) * top_k);
    double acc = 0.0;
    for (int t = 0; t < s; ++t) acc += pv[static_cast<std::size_t>(t) * experts + e];
    sub.mean_prob[e] = static_cast<float>(acc / s);
  }
  return sub;
}

std::vector<std::vector<std::uint8_t>> occupancy_map(const RoutingRecord& rec, int frame) {
  if (rec.hp <= 0 || rec.wp <= 0) {
    throw std::invalid_argument("occupancy_map: record carries no grid provenance");
  }
  RoutingRecord sub = rec.frames > 1
                          ? rec.for_frame(frame < 0 ? rec.frames - 1 : frame)
                          : rec;
  const int s = rec.hp * rec.wp;
  std::vector<std::vector<std::uint8_t>> masks(
      static_cast<std::size_t>(rec.experts),
      std::vector<std::uint8_t>(static_cast<std::size_t>(s), 0));
  for (int t = 0; t < s; ++t) {
    for (int j = 0; j < sub.top_k; ++j) {
      masks[sub.selected[static_cast<std::size_t>(t) * sub.top_k + j]][t] = 1;
    }
  }
  return masks;
}

void write_routing_csv(const RoutingRecord& rec, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open routing csv: " + path);
  out << "token,frame,i,j";
  for (int j = 0; j < rec.top_k; ++j) out << ",expert_" << j;
  for (int j = 0; j < rec.top_k; ++j) out << ",weight_" << j;
  out << "\n";
  const int s = rec.hp > 0 ? rec.hp * rec.wp : rec.tokens;
  const auto cv = rec.combine.values();
  for (int t = 0; t < rec.tokens; ++t) {
    const int frame = rec.hp > 0 ? t / s : 0;
    const int cell = rec.hp > 0 ? t % s : t;
    const int i = rec.hp > 0 ? cell / rec.wp : 0;
    const int j = rec.hp > 0 ? cell % rec.wp : cell;
    out << t << "," << frame << "," << i << "," << j;
    for (int q = 0; q < rec.top_k; ++q) {
      out << "," << rec.selected[static_cast<std::size_t>(t) * rec.top_k + q];
    }
    for (int q = 0; q < rec.top_k; ++q) {
      out << "," << cv[static_cast<std::size_t>(t) * rec.top_k + q];
    }
    out << "\n";
  }
}

}  // namespace nucleus
