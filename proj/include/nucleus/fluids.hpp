#pragma once

#include <array>
#include <stdexcept>
#include <string>

namespace nucleus {

/// Per-fluid properties at saturation (SI units, temperatures in Celsius).
struct ThermophysicalProperties {
  std::string name;
  double t_sat = 0.0;   // °C
  double rho_l = 0.0;   // kg/m^3
  double rho_v = 0.0;   // kg/m^3
  double mu_l = 0.0;    // N s/m^2
  double mu_v = 0.0;    // N s/m^2
  double cp_l = 0.0;    // J/(kg K)
  double cp_v = 0.0;    // J/(kg K)
  double k_l = 0.0;     // W/(m K)
  double k_v = 0.0;     // W/(m K)
  double h_lv = 0.0;    // J/kg
  double sigma = 0.0;   // N/m

  void validate() const;
};

/// Derived scales and dimensionless groups. Ratios are vapor over liquid,
/// which is what the tabulated values actually are.
struct NondimParams {
  double l_c = 0.0;  // m
  double u_c = 0.0;  // m/s
  double t_c = 0.0;  // s
  double rho_ratio = 0.0;
  double mu_ratio = 0.0;
  double k_ratio = 0.0;
  double cp_ratio = 0.0;
  double re = 0.0;
  double we = 0.0;  // ~1 by construction of l_c; computed, not hard-coded
  double pr = 0.0;
  double st = 0.0;
};

struct BoilingCondition {
  double t_bulk = 0.0;     // °C
  double t_wall = 0.0;     // °C
  double gravity = 9.81;   // m/s^2
  bool subcooled = false;  // t_bulk < t_sat
  int nucleation_sites = 4;

  void validate(const ThermophysicalProperties& props) const;
};

struct FluidParams {
  ThermophysicalProperties props;
  NondimParams nondim;
  BoilingCondition condition;
  double t_sat_nondim = 0.0;  // (T_sat - T_bulk) / (T_wall - T_bulk)
};

class FluidError : public std::runtime_error {
 public:
  explicit FluidError(const std::string& what) : std::runtime_error(what) {}
};

NondimParams derive_nondimensional(const ThermophysicalProperties& props,
                                   const BoilingCondition& cond);

double nondim_saturation_temp(double t_sat, double t_bulk, double t_wall);

FluidParams make_fluid_params(const ThermophysicalProperties& props,
                              const BoilingCondition& cond);

constexpr int kConditioningDim = 12;

/// Raw FiLM conditioning entries, fixed order:
///   [Re, Pr, St, k_ratio, rho_ratio, mu_ratio, cp_ratio, gravity,
///    T_bulk_n, T_wall_n, T_sat_nondim, subcooled]
/// T_bulk_n / T_wall_n are (T - T_sat)/T_sat_K with T_sat_K in Kelvin, which
/// keeps LN2 and FC-72 on commensurate scales. Standardization (log for Re
/// and Pr, then per-entry affine) happens against constants stored in the
/// model config, not here.
std::array<float, kConditioningDim> conditioning_vector(const FluidParams& p);

/// Applies the stored standardization: v -> (pre(v) - shift) * inv_scale,
/// where pre = log for the Re and Pr entries and identity elsewhere.
std::array<float, kConditioningDim> standardize_conditioning(
    const std::array<float, kConditioningDim>& raw,
    const std::array<float, kConditioningDim>& shift,
    const std::array<float, kConditioningDim>& inv_scale);

/// Loads one fluid from a JSON properties file keyed by fluid name.
ThermophysicalProperties load_fluid_properties(const std::string& path,
                                               const std::string& fluid_name);

}  // namespace nucleus
