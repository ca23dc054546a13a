#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nucleus/field.hpp"
#include "nucleus/fluids.hpp"

namespace nucleus {

/// One timestep of the system state. Temperature is dimensional (deg C),
/// velocities are non-dimensional, phi is a signed distance in grid units
/// (phi < 0 in liquid, phi > 0 in vapor, phi = 0 on the interface).
struct FieldState {
  Field t, ux, uy, phi;

  int height() const { return static_cast<int>(t.rows()); }
  int width() const { return static_cast<int>(t.cols()); }
  static FieldState zeros(int h, int w);
  void validate() const;  // finite values, consistent extents
};

struct Trajectory {
  std::vector<FieldState> states;
  double dt = 1.0;  // non-dimensional step between states
  double dx = 1.0;  // grid spacing, grid units
  FluidParams params;
  std::string fluid_name;
  std::uint64_t seed = 0;

  int height() const { return states.empty() ? 0 : states.front().height(); }
  int width() const { return states.empty() ? 0 : states.front().width(); }
  int steps() const { return static_cast<int>(states.size()); }
  void validate() const;  // >= 2 states, shared extents
};

struct TrainingSample {
  std::vector<FieldState> history;  // F consecutive states
  FieldState target;                // the state dt after history.back()
  FluidParams params;
};

// ---- NUCL-1 binary format -----------------------------------------------------
// "NUCL" magic, u32 version=1, u64 JSON metadata length, UTF-8 JSON metadata,
// then steps*4*H*W little-endian f32 in [step][field][row][col] order with
// field order T, Ux, Uy, phi.

class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};
class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};
class UnsupportedVersionError : public FormatError {
 public:
  using FormatError::FormatError;
};
class TruncatedFileError : public FormatError {
 public:
  using FormatError::FormatError;
};
class MetadataMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

void write_trajectory(const Trajectory& tr, const std::string& path);
Trajectory read_trajectory(const std::string& path);

// ---- windowing & augmentation --------------------------------------------------

/// All (history of F states, next state) samples of a trajectory, in order.
/// Throws if the trajectory has fewer than F+1 states. Count = steps - F.
std::vector<TrainingSample> window_iter(const Trajectory& tr, int history_len);

struct AugmentConfig {
  bool flip = true;
  bool noise = true;
  // Per-field noise ceilings: sigma_n ~ U(0, sigma_max) with sigma_max =
  // 0.01 * per-field scale from the training set. History only; the target
  // stays clean.
  float sigma_max_t = 0.0f;
  float sigma_max_ux = 0.0f;
  float sigma_max_uy = 0.0f;
  float sigma_max_phi = 0.0f;
};

/// Mirrors all fields left-right and negates Ux (velocity is a vector).
FieldState flip_horizontal(const FieldState& s);

/// With p=0.5 flips history+target, then adds zero-mean Gaussian noise with
/// sigma ~ U(0, sigma_max) to the history fields.
TrainingSample augment(const TrainingSample& s, const AugmentConfig& cfg, Rng& rng);

// ---- manifests ------------------------------------------------------------------

struct ManifestEntry {
  std::string path;
  std::string split;  // train | val | test
};

std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::vector<ManifestEntry>& entries, const std::string& path);
std::vector<std::string> manifest_paths(const std::vector<ManifestEntry>& entries,
                                        const std::string& split);

}  // namespace nucleus
