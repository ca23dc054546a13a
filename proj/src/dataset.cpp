#include "nucleus/dataset.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "NUCL-1 payloads are little-endian; big-endian hosts need byte swaps");

namespace nucleus {

namespace {

using json = nlohmann::ordered_json;

constexpr char kMagic[4] = {'N', 'U', 'C', 'L'};
constexpr std::uint32_t kVersion = 1;

json props_to_json(const ThermophysicalProperties& p) {
  return json{{"name", p.name}, {"T_sat_C", p.t_sat}, {"rho_l", p.rho_l}, {"rho_v", p.rho_v},
              {"mu_l", p.mu_l}, {"mu_v", p.mu_v},     {"cp_l", p.cp_l},   {"cp_v", p.cp_v},
              {"k_l", p.k_l},   {"k_v", p.k_v},       {"h_lv", p.h_lv},   {"sigma", p.sigma}};
}

ThermophysicalProperties props_from_json(const json& j) {
  ThermophysicalProperties p;
  p.name = j.at("name").get<std::string>();
  p.t_sat = j.at("T_sat_C").get<double>();
  p.rho_l = j.at("rho_l").get<double>();
  p.rho_v = j.at("rho_v").get<double>();
  p.mu_l = j.at("mu_l").get<double>();
  p.mu_v = j.at("mu_v").get<double>();
  p.cp_l = j.at("cp_l").get<double>();
  p.cp_v = j.at("cp_v").get<double>();
  p.k_l = j.at("k_l").get<double>();
  p.k_v = j.at("k_v").get<double>();
  p.h_lv = j.at("h_lv").get<double>();
  p.sigma = j.at("sigma").get<double>();
  return p;
}

json condition_to_json(const BoilingCondition& c) {
  return json{{"T_bulk_C", c.t_bulk},
              {"T_wall_C", c.t_wall},
              {"gravity", c.gravity},
              {"subcooled", c.subcooled},
              {"nucleation_sites", c.nucleation_sites}};
}

BoilingCondition condition_from_json(const json& j) {
  BoilingCondition c;
  c.t_bulk = j.at("T_bulk_C").get<double>();
  c.t_wall = j.at("T_wall_C").get<double>();
  c.gravity = j.at("gravity").get<double>();
  c.subcooled = j.at("subcooled").get<bool>();
  c.nucleation_sites = j.at("nucleation_sites").get<int>();
  return c;
}

}  // namespace

json fluid_params_to_json(const FluidParams& p);
FluidParams fluid_params_from_json(const json& j);

json fluid_params_to_json(const FluidParams& p) {
  return json{{"props", props_to_json(p.props)},
              {"condition", condition_to_json(p.condition)},
              {"T_sat_nondim", p.t_sat_nondim}};
}

FluidParams fluid_params_from_json(const json& j) {
  // Nondim values are recomputed rather than stored: the FluidParams
  // invariant is that they match derive_nondimensional exactly.
  return make_fluid_params(props_from_json(j.at("props")),
                           condition_from_json(j.at("condition")));
}

FieldState FieldState::zeros(int h, int w) {
  FieldState s;
  s.t = Field::Zero(h, w);
  s.ux = Field::Zero(h, w);
  s.uy = Field::Zero(h, w);
  s.phi = Field::Zero(h, w);
  return s;
}

void FieldState::validate() const {
  const Field* fields[] = {&t, &ux, &uy, &phi};
  for (const Field* f : fields) {
    if (f->rows() != t.rows() || f->cols() != t.cols()) {
      throw std::invalid_argument("FieldState fields have inconsistent extents");
    }
    if (!f->isFinite().all()) {
      throw std::invalid_argument("FieldState contains non-finite values");
    }
  }
}

void Trajectory::validate() const {
  if (states.size() < 2) throw std::invalid_argument("Trajectory needs at least 2 states");
  for (const auto& s : states) {
    s.validate();
    if (s.height() != height() || s.width() != width()) {
      throw std::invalid_argument("Trajectory states disagree on extents");
    }
  }
}

namespace {

void write_field(std::ofstream& out, const Field& f) {
  out.write(reinterpret_cast<const char*>(f.data()),
            static_cast<std::streamsize>(sizeof(float) * f.size()));
}

}  // namespace

void write_trajectory(const Trajectory& tr, const std::string& path) {
  tr.validate();
  json meta;
  meta["H"] = tr.height();
  meta["W"] = tr.width();
  meta["steps"] = tr.steps();
  meta["dt"] = tr.dt;
  meta["dx"] = tr.dx;
  meta["fields"] = json::array({"T", "Ux", "Uy", "phi"});
  meta["fluid"] = tr.fluid_name;
  meta["params"] = fluid_params_to_json(tr.params);
  meta["seed"] = tr.seed;
  const std::string meta_str = meta.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open for writing: " + path);
  out.write(kMagic, 4);
  const std::uint32_t version = kVersion;
  out.write(reinterpret_cast<const char*>(&version), 4);
  const std::uint64_t meta_len = meta_str.size();
  out.write(reinterpret_cast<const char*>(&meta_len), 8);
  out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
  for (const auto& s : tr.states) {
    write_field(out, s.t);
    write_field(out, s.ux);
    write_field(out, s.uy);
    write_field(out, s.phi);
  }
  if (!out) throw FormatError("write failed: " + path);
}

Trajectory read_trajectory(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open: " + path);
  in.seekg(0, std::ios::end);
  const std::uint64_t file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0);

  char magic[4] = {};
  if (file_size < 16) {
    throw TruncatedFileError(path + ": header needs 16 bytes, file has " +
                             std::to_string(file_size));
  }
  in.read(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw BadMagicError(path + ": bad magic '" + std::string(magic, 4) + "', expected 'NUCL'");
  }
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  if (version != kVersion) {
    throw UnsupportedVersionError(path + ": unsupported version " + std::to_string(version));
  }
  std::uint64_t meta_len = 0;
  in.read(reinterpret_cast<char*>(&meta_len), 8);
  if (16 + meta_len > file_size) {
    throw TruncatedFileError(path + ": metadata declares " + std::to_string(meta_len) +
                             " bytes, only " + std::to_string(file_size - 16) + " available");
  }
  std::string meta_str(meta_len, '\0');
  in.read(meta_str.data(), static_cast<std::streamsize>(meta_len));

  json meta;
  try {
    meta = json::parse(meta_str);
  } catch (const json::exception& e) {
    throw MetadataMismatchError(path + ": metadata is not valid JSON: " + e.what());
  }

  Trajectory tr;
  int h = 0, w = 0, steps = 0;
  try {
    h = meta.at("H").get<int>();
    w = meta.at("W").get<int>();
    steps = meta.at("steps").get<int>();
    tr.dt = meta.at("dt").get<double>();
    tr.dx = meta.at("dx").get<double>();
    tr.fluid_name = meta.at("fluid").get<std::string>();
    tr.params = fluid_params_from_json(meta.at("params"));
    tr.seed = meta.at("seed").get<std::uint64_t>();
    const auto fields = meta.at("fields").get<std::vector<std::string>>();
    if (fields != std::vector<std::string>{"T", "Ux", "Uy", "phi"}) {
      throw MetadataMismatchError(path + ": unexpected field order in metadata");
    }
  } catch (const json::exception& e) {
    throw MetadataMismatchError(path + ": metadata missing or mistyped: " + e.what());
  }
  if (h <= 0 || w <= 0 || steps < 2) {
    throw MetadataMismatchError(path + ": invalid extents in metadata (H=" + std::to_string(h) +
                                ", W=" + std::to_string(w) +
                                ", steps=" + std::to_string(steps) + ")");
  }

  const std::uint64_t expected_payload = static_cast<std::uint64_t>(steps) * 4u *
                                         static_cast<std::uint64_t>(h) *
                                         static_cast<std::uint64_t>(w) * sizeof(float);
  const std::uint64_t actual_payload = file_size - 16 - meta_len;
  if (actual_payload != expected_payload) {
    throw TruncatedFileError(path + ": payload expects " + std::to_string(expected_payload) +
                             " bytes, found " + std::to_string(actual_payload));
  }

  tr.states.resize(static_cast<std::size_t>(steps));
  for (auto& s : tr.states) {
    s = FieldState::zeros(h, w);
    Field* fields[] = {&s.t, &s.ux, &s.uy, &s.phi};
    for (Field* f : fields) {
      in.read(reinterpret_cast<char*>(f->data()),
              static_cast<std::streamsize>(sizeof(float) * f->size()));
    }
  }
  if (!in) throw TruncatedFileError(path + ": payload read failed");
  return tr;
}

// ---- windowing & augmentation ---------------------------------------------------

std::vector<TrainingSample> window_iter(const Trajectory& tr, int history_len) {
  if (history_len < 1) throw std::invalid_argument("window_iter: history length must be >= 1");
  if (tr.steps() < history_len + 1) {
    throw std::invalid_argument("window_iter: trajectory has " + std::to_string(tr.steps()) +
                                " states, needs at least " + std::to_string(history_len + 1));
  }
  std::vector<TrainingSample> samples;
  samples.reserve(static_cast<std::size_t>(tr.steps() - history_len));
  for (int start = 0; start + history_len < tr.steps(); ++start) {
    TrainingSample s;
    s.history.assign(tr.states.begin() + start, tr.states.begin() + start + history_len);
    s.target = tr.states[static_cast<std::size_t>(start + history_len)];
    s.params = tr.params;
    samples.push_back(std::move(s));
  }
  return samples;
}

FieldState flip_horizontal(const FieldState& s) {
  FieldState out;
  out.t = s.t.rowwise().reverse();
  out.ux = -s.ux.rowwise().reverse();  // mirroring flips the x-component
  out.uy = s.uy.rowwise().reverse();
  out.phi = s.phi.rowwise().reverse();
  return out;
}

namespace {

void add_noise(Field& f, float sigma, Rng& rng) {
  if (sigma <= 0.0f) return;
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] += sigma * rng.normal();
}

}  // namespace

TrainingSample augment(const TrainingSample& s, const AugmentConfig& cfg, Rng& rng) {
  TrainingSample out = s;
  if (cfg.flip && rng.uniform() < 0.5f) {
    for (auto& h : out.history) h = flip_horizontal(h);
    out.target = flip_horizontal(out.target);
  }
  if (cfg.noise) {
    const float st = rng.uniform(0.0f, cfg.sigma_max_t);
    const float sux = rng.uniform(0.0f, cfg.sigma_max_ux);
    const float suy = rng.uniform(0.0f, cfg.sigma_max_uy);
    const float sphi = rng.uniform(0.0f, cfg.sigma_max_phi);
    for (auto& h : out.history) {
      add_noise(h.t, st, rng);
      add_noise(h.ux, sux, rng);
      add_noise(h.uy, suy, rng);
      add_noise(h.phi, sphi, rng);
    }
  }
  return out;
}

// ---- manifests --------------------------------------------------------------------

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError("manifest is not valid JSON: " + path + ": " + e.what());
  }
  std::vector<ManifestEntry> entries;
  for (const auto& e : j.at("trajectories")) {
    entries.push_back({e.at("path").get<std::string>(), e.at("split").get<std::string>()});
  }
  return entries;
}

void write_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
  json j;
  j["trajectories"] = json::array();
  for (const auto& e : entries) {
    j["trajectories"].push_back(json{{"path", e.path}, {"split", e.split}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open manifest for writing: " + path);
  out << j.dump(2) << "\n";
}

std::vector<std::string> manifest_paths(const std::vector<ManifestEntry>& entries,
                                        const std::string& split) {
  std::vector<std::string> out;
  for (const auto& e : entries) {
    if (e.split == split) out.push_back(e.path);
  }
  return out;
}

}  // namespace nucleus
