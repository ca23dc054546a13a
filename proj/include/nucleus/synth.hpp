#pragma once

#include <string>
#include <vector>

#include "nucleus/dataset.hpp"

namespace nucleus {

/// Desk-scale stand-in for the upstream boiling solver: disk bubbles
/// nucleate on heater sites, grow, detach, rise buoyantly and (when
/// subcooled) condense away. phi is the exact signed distance to the disk
/// union, so the generated SDF carries the Eikonal property by construction.
struct SynthConfig {
  int h = 32;
  int w = 32;
  int steps = 48;
  double dt = 1.0;
  double dx = 1.0;
  double rise_speed = 0.35;      // cells per step after detachment
  double growth_rate = 0.12;     // radius growth while attached, cells/step
  double shrink_rate = 0.05;     // subcooled condensation, cells/step
  double detach_radius = 2.6;    // cells
  double seed_radius = 1.3;      // nucleation radius, cells
  int max_nucleation_delay = 8;  // steps between detach and re-nucleation
  double boundary_layer = 2.2;   // heater thermal boundary layer, cells
  FluidParams params;
};

struct DiskRecord {
  double cx = 0.0, cy = 0.0, radius = 0.0;
  int id = 0;
  bool attached = true;
};

SynthConfig load_synth_config(const std::string& path);

/// Deterministic given (cfg, seed). disk_log, when provided, receives the
/// per-step disk records the fields were rasterized from.
Trajectory synth_generate(const SynthConfig& cfg, std::uint64_t seed,
                          std::vector<std::vector<DiskRecord>>* disk_log = nullptr);

}  // namespace nucleus
