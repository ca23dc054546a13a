#include "nucleus/levelset.hpp"

#include <cmath>
#include <stdexcept>

namespace nucleus {

namespace {

Tensor elem_max(const Tensor& u, const Tensor& v) {
  // max(u,v) = 0.5*(u + v + |u - v|)
  return mul(add(add(u, v), abs(sub(u, v))), 0.5f);
}

Tensor pos_part(const Tensor& x) { return mul(add(x, abs(x)), 0.5f); }
Tensor neg_part(const Tensor& x) { return mul(sub(x, abs(x)), 0.5f); }

struct GridIndices {
  std::vector<int> left, right, up, down;
  Tensor mask_l, mask_r, mask_t, mask_b;
};

GridIndices make_grid_indices(int h, int w) {
  GridIndices g;
  const std::size_t n = static_cast<std::size_t>(h) * w;
  g.left.resize(n);
  g.right.resize(n);
  g.up.resize(n);
  g.down.resize(n);
  std::vector<float> ml(n, 0.0f), mr(n, 0.0f), mt(n, 0.0f), mb(n, 0.0f);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const std::size_t t = static_cast<std::size_t>(i) * w + j;
      g.left[t] = i * w + std::max(j - 1, 0);
      g.right[t] = i * w + std::min(j + 1, w - 1);
      g.up[t] = std::max(i - 1, 0) * w + j;
      g.down[t] = std::min(i + 1, h - 1) * w + j;
      if (j == 0) ml[t] = 1.0f;
      if (j == w - 1) mr[t] = 1.0f;
      if (i == 0) mt[t] = 1.0f;
      if (i == h - 1) mb[t] = 1.0f;
    }
  }
  g.mask_l = Tensor({h, w}, std::move(ml));
  g.mask_r = Tensor({h, w}, std::move(mr));
  g.mask_t = Tensor({h, w}, std::move(mt));
  g.mask_b = Tensor({h, w}, std::move(mb));
  return g;
}

// mask * a + (1 - mask) * b
Tensor select(const Tensor& mask, const Tensor& a, const Tensor& b) {
  return add(mul(mask, a), mul(sub(Tensor::full(mask.shape(), 1.0f), mask), b));
}

}  // namespace

Tensor smoothed_sign(const Tensor& phi0, float eps) {
  if (!(eps > 0.0f)) throw std::invalid_argument("smoothed_sign: eps must be positive");
  return divide(phi0, sqrt(add(mul(phi0, phi0), eps * eps)));
}

Tensor upwind_grad_norm(const Tensor& phi, const Tensor& sign_field, float dx) {
  if (phi.ndim() != 2 || phi.shape() != sign_field.shape()) {
    throw TensorError("upwind_grad_norm", "phi and sign field must share a 2-D shape, got " +
                                              shape_str(phi.shape()) + " vs " +
                                              shape_str(sign_field.shape()));
  }
  const int h = phi.dim(0), w = phi.dim(1);
  if (h < 2 || w < 2) throw TensorError("upwind_grad_norm", "grid must be at least 2x2");
  GridIndices g = make_grid_indices(h, w);
  const float inv_dx = 1.0f / dx;
  const Shape s = phi.shape();
  Tensor flat = reshape(phi, {h * w});

  auto shifted = [&](const std::vector<int>& idx) {
    return reshape(gather_elems(flat, idx, {h * w}), s);
  };
  Tensor a = mul(sub(phi, shifted(g.left)), inv_dx);   // D-x
  Tensor b = mul(sub(shifted(g.right), phi), inv_dx);  // D+x
  Tensor c = mul(sub(phi, shifted(g.up)), inv_dx);     // D-y
  Tensor d = mul(sub(shifted(g.down), phi), inv_dx);   // D+y
  // Boundary rows/cols use the available one-sided difference for both.
  Tensor ax = select(g.mask_l, b, a);
  Tensor bx = select(g.mask_r, a, b);
  Tensor cy = select(g.mask_t, d, c);
  Tensor dy = select(g.mask_b, c, d);

  auto godunov_pos = [](const Tensor& back, const Tensor& fwd) {
    return elem_max(mul(pos_part(back), pos_part(back)), mul(neg_part(fwd), neg_part(fwd)));
  };
  auto godunov_neg = [](const Tensor& back, const Tensor& fwd) {
    return elem_max(mul(neg_part(back), neg_part(back)), mul(pos_part(fwd), pos_part(fwd)));
  };

  // Branch masks follow the sign field; they are constants w.r.t. phi.
  std::vector<float> pos(sign_field.numel()), neg(sign_field.numel());
  for (std::size_t i = 0; i < sign_field.numel(); ++i) {
    pos[i] = sign_field.values()[i] > 0.0f ? 1.0f : 0.0f;
    neg[i] = sign_field.values()[i] < 0.0f ? 1.0f : 0.0f;
  }
  Tensor pos_mask(s, std::move(pos));
  Tensor neg_mask(s, std::move(neg));

  Tensor gx = add(mul(pos_mask, godunov_pos(ax, bx)), mul(neg_mask, godunov_neg(ax, bx)));
  Tensor gy = add(mul(pos_mask, godunov_pos(cy, dy)), mul(neg_mask, godunov_neg(cy, dy)));
  return sqrt(add(add(gx, gy), 1e-12f));
}

Tensor sussman_reinit(const Tensor& phi0, const ReinitConfig& cfg, float dx) {
  if (cfg.iterations < 0) throw std::invalid_argument("sussman_reinit: iterations must be >= 0");
  const double dtau = cfg.dtau > 0.0 ? cfg.dtau : 0.5 * dx;
  if (dtau > 0.5 * dx * (1.0 + 1e-9)) {
    throw std::invalid_argument("sussman_reinit: CFL violation, need dtau <= 0.5*dx (dtau=" +
                                std::to_string(dtau) + ", dx=" + std::to_string(dx) + ")");
  }
  const float eps = static_cast<float>(cfg.eps > 0.0 ? cfg.eps : dx);
  Tensor sign0 = smoothed_sign(phi0, eps);

  Tensor band_mask;
  if (cfg.band_freeze > 0.0) {
    std::vector<float> m(phi0.numel());
    const float half = static_cast<float>(cfg.band_freeze * dx);
    for (std::size_t i = 0; i < phi0.numel(); ++i) {
      m[i] = std::fabs(phi0.values()[i]) < half ? 1.0f : 0.0f;
    }
    band_mask = Tensor(phi0.shape(), std::move(m));
  }

  Tensor phi = add(phi0, 0.0f);  // keeps phi0 itself untouched on the tape
  for (int k = 0; k < cfg.iterations; ++k) {
    Tensor grad_norm = upwind_grad_norm(phi, sign0, dx);
    phi = sub(phi, mul(mul(sign0, sub(grad_norm, 1.0f)), static_cast<float>(dtau)));
    if (band_mask.defined()) phi = select(band_mask, phi0, phi);
  }
  return phi;
}

Field sussman_reinit(const Field& phi0, const ReinitConfig& cfg, double dx) {
  NoGradGuard ng;
  return tensor_to_field(sussman_reinit(field_to_tensor(phi0), cfg, static_cast<float>(dx)));
}

EikonalResidual eikonal_residual(const Field& phi, double dx) {
  const int h = static_cast<int>(phi.rows());
  const int w = static_cast<int>(phi.cols());
  EikonalResidual r;
  r.map.resize(h, w);
  double total = 0.0;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      double gx, gy;
      if (j == 0) gx = (phi(i, 1) - phi(i, 0)) / dx;
      else if (j == w - 1) gx = (phi(i, w - 1) - phi(i, w - 2)) / dx;
      else gx = (phi(i, j + 1) - phi(i, j - 1)) / (2.0 * dx);
      if (i == 0) gy = (phi(1, j) - phi(0, j)) / dx;
      else if (i == h - 1) gy = (phi(h - 1, j) - phi(h - 2, j)) / dx;
      else gy = (phi(i + 1, j) - phi(i - 1, j)) / (2.0 * dx);
      const double res = std::fabs(std::sqrt(gx * gx + gy * gy) - 1.0);
      r.map(i, j) = static_cast<float>(res);
      total += res;
      r.max = std::max(r.max, res);
    }
  }
  r.mean = total / (static_cast<double>(h) * w);
  return r;
}

}  // namespace nucleus
