#include "nucleus/synth.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>

namespace nucleus {

namespace {

struct Bubble {
  double cx, cy, radius;
  int id;
  bool attached;
};

struct Site {
  double x;
  int next_nucleation;  // step index
};

// Rising bubbles push liquid upward in their neighborhood; image blobs
// across the side walls damp the normal component there.
void add_rise_blob(Field& ux, Field& uy, const Bubble& b, double speed, int w) {
  const double span = std::max(1.6 * b.radius, 2.0);
  auto blob = [&](double cx, double sign) {
    const int h = static_cast<int>(uy.rows());
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        const double dxr = j - cx;
        const double dyr = i - b.cy;
        const double q2 = (dxr * dxr + dyr * dyr) / (span * span);
        if (q2 > 9.0) continue;
        const double g = std::exp(-q2);
        uy(i, j) += static_cast<float>(sign * speed * g);
        // weak swirl in the wake, antisymmetric about the bubble axis
        ux(i, j) += static_cast<float>(sign * 0.4 * speed * g * dxr * dyr / (span * span));
      }
    }
  };
  blob(b.cx, 1.0);
  blob(-1.0 - b.cx, -1.0);             // image across x = -0.5
  blob(2.0 * (w - 0.5) - b.cx, -1.0);  // image across x = w-0.5
}

}  // namespace

SynthConfig load_synth_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open generator config: " + path);
  nlohmann::json j;
  in >> j;
  SynthConfig cfg;
  cfg.h = j.at("H").get<int>();
  cfg.w = j.at("W").get<int>();
  cfg.steps = j.at("steps").get<int>();
  cfg.dt = j.value("dt", cfg.dt);
  cfg.dx = j.value("dx", cfg.dx);
  cfg.rise_speed = j.value("rise_speed", cfg.rise_speed);
  cfg.growth_rate = j.value("growth_rate", cfg.growth_rate);
  cfg.shrink_rate = j.value("shrink_rate", cfg.shrink_rate);
  cfg.detach_radius = j.value("detach_radius", cfg.detach_radius);
  cfg.seed_radius = j.value("seed_radius", cfg.seed_radius);
  cfg.max_nucleation_delay = j.value("max_nucleation_delay", cfg.max_nucleation_delay);
  cfg.boundary_layer = j.value("boundary_layer", cfg.boundary_layer);

  const std::string fluid = j.at("fluid").get<std::string>();
  const std::string props_path = j.at("fluids_file").get<std::string>();
  BoilingCondition cond;
  cond.t_bulk = j.at("T_bulk_C").get<double>();
  cond.t_wall = j.at("T_wall_C").get<double>();
  cond.gravity = j.value("gravity", 9.81);
  cond.nucleation_sites = j.at("nucleation_sites").get<int>();
  auto props = load_fluid_properties(props_path, fluid);
  cond.subcooled = cond.t_bulk < props.t_sat;
  cfg.params = make_fluid_params(props, cond);
  return cfg;
}

Trajectory synth_generate(const SynthConfig& cfg, std::uint64_t seed,
                          std::vector<std::vector<DiskRecord>>* disk_log) {
  const int sites_n = cfg.params.condition.nucleation_sites;
  const bool subcooled = cfg.params.condition.subcooled;
  if (sites_n <= 0) {
    throw std::invalid_argument(
        "synth_generate: degenerate config, need at least one nucleation site" +
        std::string(subcooled ? " (subcooled shrink enabled)" : ""));
  }
  if (cfg.h < 8 || cfg.w < 8) throw std::invalid_argument("synth_generate: grid too small");

  Rng rng(seed);
  std::vector<Site> sites(static_cast<std::size_t>(sites_n));
  for (int s = 0; s < sites_n; ++s) {
    sites[s].x = (s + 0.5) * cfg.w / sites_n - 0.5;
    // site 0 fires immediately so every frame has an interface
    sites[s].next_nucleation = s == 0 ? 0 : rng.uniform_int(cfg.max_nucleation_delay + 1);
  }

  std::vector<Bubble> bubbles;
  int next_id = 0;
  const double t_bulk = cfg.params.condition.t_bulk;
  const double t_wall = cfg.params.condition.t_wall;
  const double t_sat = cfg.params.props.t_sat;
  const int h = cfg.h, w = cfg.w;

  Trajectory tr;
  tr.dt = cfg.dt;
  tr.dx = cfg.dx;
  tr.params = cfg.params;
  tr.fluid_name = cfg.params.props.name;
  tr.seed = seed;
  tr.states.reserve(static_cast<std::size_t>(cfg.steps));
  if (disk_log) disk_log->clear();

  for (int step = 0; step < cfg.steps; ++step) {
    // advance
    for (auto& b : bubbles) {
      if (b.attached) {
        b.radius += cfg.growth_rate;
        b.cy = (h - 0.5) - b.radius;  // tangent to the heater wall
        if (b.radius >= cfg.detach_radius) {
          b.attached = false;
          // the site can host a new bubble after a seeded delay
          for (auto& s : sites) {
            if (std::fabs(s.x - b.cx) < 1e-9) {
              s.next_nucleation = step + 1 + rng.uniform_int(cfg.max_nucleation_delay + 1);
            }
          }
        }
      } else {
        b.cy -= cfg.rise_speed;  // row index decreases: the bubble rises
        if (subcooled) b.radius -= cfg.shrink_rate;
      }
    }
    // removal: condensed away or fully above the top boundary
    std::erase_if(bubbles, [](const Bubble& b) { return b.radius < 0.7 || b.cy + b.radius < 0.0; });
    // nucleation
    for (auto& s : sites) {
      if (step < s.next_nucleation) continue;
      bool occupied = false;
      for (const auto& b : bubbles) {
        if (b.attached && std::fabs(b.cx - s.x) < 1e-9) occupied = true;
      }
      if (!occupied) {
        bubbles.push_back({s.x, (h - 0.5) - cfg.seed_radius, cfg.seed_radius, next_id++, true});
        s.next_nucleation = cfg.steps + 1;  // reset on detach
      }
    }

    // rasterize
    FieldState st = FieldState::zeros(h, w);
    // phi: exact signed distance to the disk union (positive inside vapor).
    // With no bubbles in frame a virtual disk below the heater keeps phi a
    // valid liquid-everywhere SDF.
    std::vector<Bubble> draw = bubbles;
    if (draw.empty()) {
      draw.push_back({w / 2.0, h + 6.0, 4.0, -1, false});
    }
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        double best = -1e30;
        for (const auto& b : draw) {
          const double d = b.radius - std::hypot(j - b.cx, i - b.cy);
          best = std::max(best, d);
        }
        st.phi(i, j) = static_cast<float>(best);
      }
    }
    // T: bulk + heater boundary layer, relaxed to T_sat inside vapor
    for (int i = 0; i < h; ++i) {
      const double dist_heater = (h - 1) - i;
      const double t_liq = t_bulk + (t_wall - t_bulk) * std::exp(-dist_heater / cfg.boundary_layer);
      for (int j = 0; j < w; ++j) {
        const double s = 1.0 / (1.0 + std::exp(-st.phi(i, j) / 0.75));  // 1 inside vapor
        st.t(i, j) = static_cast<float>(t_liq + (t_sat - t_liq) * s);
      }
    }
    // velocity: superposed rise fields of detached bubbles, plus a weak
    // plume above attached ones
    for (const auto& b : bubbles) {
      add_rise_blob(st.ux, st.uy, b, b.attached ? 0.3 * cfg.rise_speed : cfg.rise_speed, w);
    }

    st.validate();
    tr.states.push_back(std::move(st));
    if (disk_log) {
      std::vector<DiskRecord> recs;
      for (const auto& b : bubbles) recs.push_back({b.cx, b.cy, b.radius, b.id, b.attached});
      disk_log->push_back(std::move(recs));
    }
  }
  return tr;
}

}  // namespace nucleus
