#pragma once

#include "nucleus/field.hpp"
#include "nucleus/tensor.hpp"

namespace nucleus {

struct ReinitConfig {
  int iterations = 5;
  double dtau = 0.0;         // 0 -> 0.5 * dx
  double eps = 0.0;          // 0 -> dx (smoothed-sign width)
  double band_freeze = 0.0;  // half-width in cells; 0 disables freezing
};

/// phi0 / sqrt(phi0^2 + eps^2), valued in (-1, 1), zero on the interface.
Tensor smoothed_sign(const Tensor& phi0, float eps);

/// Godunov upwind gradient magnitude on a [H,W] grid. The branch (upwind
/// direction) is selected by the sign of sign_field; boundary rows/cols use
/// the available one-sided difference for both directions. Built from
/// differentiable primitives; the branch selection itself is not
/// differentiated (like argmax).
Tensor upwind_grad_norm(const Tensor& phi, const Tensor& sign_field, float dx);

/// Iterates phi <- phi - dtau * S(phi0) * (|grad phi| - 1) with the sign
/// frozen from phi0, preserving the zero level set. Cells with
/// |phi0| < band_freeze * dx are restored to phi0 after every iteration.
Tensor sussman_reinit(const Tensor& phi0, const ReinitConfig& cfg, float dx);

/// Field-level convenience for rollout correction; no tape is recorded.
Field sussman_reinit(const Field& phi0, const ReinitConfig& cfg, double dx);

struct EikonalResidual {
  Field map;  // | |grad phi| - 1 | per cell, central differences
  double mean = 0.0;
  double max = 0.0;
};

EikonalResidual eikonal_residual(const Field& phi, double dx);

}  // namespace nucleus
