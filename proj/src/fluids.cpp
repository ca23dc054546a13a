#include "nucleus/fluids.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>

namespace nucleus {

namespace {
using json = nlohmann::json;
}

void ThermophysicalProperties::validate() const {
  const struct {
    const char* name;
    double v;
  } fields[] = {{"rho_l", rho_l}, {"rho_v", rho_v}, {"mu_l", mu_l},   {"mu_v", mu_v},
                {"cp_l", cp_l},   {"cp_v", cp_v},   {"k_l", k_l},     {"k_v", k_v},
                {"h_lv", h_lv},   {"sigma", sigma}};
  for (const auto& f : fields) {
    if (!(f.v > 0.0)) {
      throw FluidError("fluid '" + name + "': property " + f.name + " must be positive");
    }
  }
  if (rho_l <= rho_v) {
    throw FluidError("fluid '" + name + "': non-buoyant configuration (rho_l <= rho_v)");
  }
}

void BoilingCondition::validate(const ThermophysicalProperties& props) const {
  if (!(gravity > 0.0)) throw FluidError("gravity must be positive");
  if (!(t_wall > props.t_sat)) {
    throw FluidError("nucleate regime requires T_wall > T_sat (" + std::to_string(t_wall) +
                     " vs " + std::to_string(props.t_sat) + ")");
  }
  if (subcooled != (t_bulk < props.t_sat)) {
    throw FluidError("subcooled flag inconsistent with T_bulk vs T_sat");
  }
}

NondimParams derive_nondimensional(const ThermophysicalProperties& props,
                                   const BoilingCondition& cond) {
  props.validate();
  cond.validate(props);
  const double g = cond.gravity;
  NondimParams n;
  n.l_c = std::sqrt(props.sigma / ((props.rho_l - props.rho_v) * g));
  n.u_c = std::sqrt(g * n.l_c);
  n.t_c = n.l_c / n.u_c;
  n.rho_ratio = props.rho_v / props.rho_l;
  n.mu_ratio = props.mu_v / props.mu_l;
  n.k_ratio = props.k_v / props.k_l;
  n.cp_ratio = props.cp_v / props.cp_l;
  n.re = props.rho_l * n.u_c * n.l_c / props.mu_l;
  n.we = props.rho_l * n.u_c * n.u_c * n.l_c / props.sigma;
  n.pr = props.mu_l * props.cp_l / props.k_l;
  n.st = props.cp_l * (cond.t_wall - cond.t_bulk) / props.h_lv;
  return n;
}

double nondim_saturation_temp(double t_sat, double t_bulk, double t_wall) {
  if (t_wall == t_bulk) {
    throw FluidError("nondim saturation temperature undefined for T_wall == T_bulk");
  }
  return (t_sat - t_bulk) / (t_wall - t_bulk);
}

FluidParams make_fluid_params(const ThermophysicalProperties& props,
                              const BoilingCondition& cond) {
  FluidParams p;
  p.props = props;
  p.condition = cond;
  p.nondim = derive_nondimensional(props, cond);
  p.t_sat_nondim = nondim_saturation_temp(props.t_sat, cond.t_bulk, cond.t_wall);
  return p;
}

std::array<float, kConditioningDim> conditioning_vector(const FluidParams& p) {
  const double t_sat_k = p.props.t_sat + 273.15;
  std::array<float, kConditioningDim> v{};
  v[0] = static_cast<float>(p.nondim.re);
  v[1] = static_cast<float>(p.nondim.pr);
  v[2] = static_cast<float>(p.nondim.st);
  v[3] = static_cast<float>(p.nondim.k_ratio);
  v[4] = static_cast<float>(p.nondim.rho_ratio);
  v[5] = static_cast<float>(p.nondim.mu_ratio);
  v[6] = static_cast<float>(p.nondim.cp_ratio);
  v[7] = static_cast<float>(p.condition.gravity);
  v[8] = static_cast<float>((p.condition.t_bulk - p.props.t_sat) / t_sat_k);
  v[9] = static_cast<float>((p.condition.t_wall - p.props.t_sat) / t_sat_k);
  v[10] = static_cast<float>(p.t_sat_nondim);
  v[11] = p.condition.subcooled ? 1.0f : 0.0f;
  return v;
}

std::array<float, kConditioningDim> standardize_conditioning(
    const std::array<float, kConditioningDim>& raw,
    const std::array<float, kConditioningDim>& shift,
    const std::array<float, kConditioningDim>& inv_scale) {
  std::array<float, kConditioningDim> out{};
  for (int i = 0; i < kConditioningDim; ++i) {
    // Re and Pr span orders of magnitude across fluids; compress first.
    const float pre = (i == 0 || i == 1) ? std::log(raw[i]) : raw[i];
    out[i] = (pre - shift[i]) * inv_scale[i];
  }
  return out;
}

ThermophysicalProperties load_fluid_properties(const std::string& path,
                                               const std::string& fluid_name) {
  std::ifstream in(path);
  if (!in) throw FluidError("cannot open fluid properties file: " + path);
  json j;
  in >> j;
  if (!j.contains(fluid_name)) {
    throw FluidError("fluid '" + fluid_name + "' not found in " + path);
  }
  const json& f = j.at(fluid_name);
  ThermophysicalProperties p;
  p.name = fluid_name;
  p.t_sat = f.at("T_sat_C").get<double>();
  p.rho_l = f.at("rho_l").get<double>();
  p.rho_v = f.at("rho_v").get<double>();
  p.mu_l = f.at("mu_l").get<double>();
  p.mu_v = f.at("mu_v").get<double>();
  p.cp_l = f.at("cp_l").get<double>();
  p.cp_v = f.at("cp_v").get<double>();
  p.k_l = f.at("k_l").get<double>();
  p.k_v = f.at("k_v").get<double>();
  p.h_lv = f.at("h_lv").get<double>();
  p.sigma = f.at("sigma").get<double>();
  p.validate();
  return p;
}

}  // namespace nucleus
