#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "nucleus/dataset.hpp"
#include "nucleus/levelset.hpp"
#include "nucleus/synth.hpp"
#include "test_paths.hpp"

using namespace nucleus;
namespace fs = std::filesystem;

namespace {

SynthConfig toy_config(bool subcooled = false) {
  SynthConfig cfg;
  cfg.h = 32;
  cfg.w = 32;
  cfg.steps = 40;
  auto props = load_fluid_properties(test_data_path("fluids.json"), "FC-72");
  BoilingCondition cond;
  cond.t_bulk = subcooled ? 45.0 : 58.0;
  cond.t_wall = 81.0;
  cond.subcooled = subcooled;
  cond.nucleation_sites = 3;
  cfg.params = make_fluid_params(props, cond);
  return cfg;
}

std::string temp_path(const std::string& name) {
  return (fs::temp_directory_path() / name).string();
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("NUCL-1 round trip is the identity on bytes") {
  auto tr = synth_generate(toy_config(), 42);
  const std::string p1 = temp_path("nucl_rt1.nucl");
  const std::string p2 = temp_path("nucl_rt2.nucl");
  write_trajectory(tr, p1);
  Trajectory back = read_trajectory(p1);
  write_trajectory(back, p2);
  CHECK(slurp(p1) == slurp(p2));

  REQUIRE(back.steps() == tr.steps());
  for (int s = 0; s < tr.steps(); ++s) {
    CHECK((back.states[s].t == tr.states[s].t).all());
    CHECK((back.states[s].ux == tr.states[s].ux).all());
    CHECK((back.states[s].uy == tr.states[s].uy).all());
    CHECK((back.states[s].phi == tr.states[s].phi).all());
  }
  CHECK(back.dt == tr.dt);
  CHECK(back.fluid_name == tr.fluid_name);
  CHECK(back.params.nondim.re == doctest::Approx(tr.params.nondim.re));
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("corrupted NUCL-1 files raise distinct structured errors") {
  auto tr = synth_generate(toy_config(), 1);
  const std::string p = temp_path("nucl_corrupt.nucl");
  write_trajectory(tr, p);
  auto bytes = slurp(p);

  SUBCASE("bad magic") {
    auto bad = bytes;
    bad[0] = 'X';
    bad[1] = 'X';
    std::ofstream(p, std::ios::binary).write(bad.data(), static_cast<std::streamsize>(bad.size()));
    CHECK_THROWS_AS(read_trajectory(p), BadMagicError);
  }
  SUBCASE("unsupported version") {
    auto bad = bytes;
    bad[4] = 9;
    std::ofstream(p, std::ios::binary).write(bad.data(), static_cast<std::streamsize>(bad.size()));
    CHECK_THROWS_AS(read_trajectory(p), UnsupportedVersionError);
  }
  SUBCASE("payload truncated by one float") {
    std::ofstream(p, std::ios::binary)
        .write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 4));
    try {
      read_trajectory(p);
      FAIL("expected TruncatedFileError");
    } catch (const TruncatedFileError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("expects") != std::string::npos);
      CHECK(msg.find("found") != std::string::npos);
    }
  }
  SUBCASE("metadata shape mismatch") {
    // grow H in the metadata without touching the payload
    const std::string needle = "\"H\":32";
    std::string all(bytes.begin(), bytes.end());
    auto pos = all.find(needle);
    REQUIRE(pos != std::string::npos);
    all.replace(pos, needle.size(), "\"H\":-1");
    std::ofstream(p, std::ios::binary).write(all.data(), static_cast<std::streamsize>(all.size()));
    CHECK_THROWS_AS(read_trajectory(p), MetadataMismatchError);
  }
  fs::remove(p);
}

TEST_CASE("generator is deterministic given (cfg, seed)") {
  auto cfg = toy_config(true);
  auto a = synth_generate(cfg, 77);
  auto b = synth_generate(cfg, 77);
  for (int s = 0; s < a.steps(); ++s) {
    CHECK((a.states[s].t == b.states[s].t).all());
    CHECK((a.states[s].ux == b.states[s].ux).all());
    CHECK((a.states[s].uy == b.states[s].uy).all());
    CHECK((a.states[s].phi == b.states[s].phi).all());
  }
  auto c = synth_generate(cfg, 78);
  bool any_diff = false;
  for (int s = 0; s < a.steps(); ++s) {
    if (!(a.states[s].phi == c.states[s].phi).all()) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("generated phi is the exact signed distance to the recorded disks") {
  auto cfg = toy_config();
  std::vector<std::vector<DiskRecord>> disks;
  auto tr = synth_generate(cfg, 5, &disks);
  REQUIRE(disks.size() == static_cast<std::size_t>(tr.steps()));
  for (int s = 0; s < tr.steps(); ++s) {
    if (disks[s].empty()) continue;
    for (int i = 0; i < cfg.h; i += 3) {
      for (int j = 0; j < cfg.w; j += 3) {
        double best = -1e30;
        for (const auto& d : disks[s]) {
          best = std::max(best, d.radius - std::hypot(j - d.cx, i - d.cy));
        }
        CHECK(tr.states[s].phi(i, j) == doctest::Approx(best).epsilon(1e-5));
        // sign convention: positive exactly inside a disk
        CHECK((tr.states[s].phi(i, j) > 0.0f) == (best > 0.0));
      }
    }
  }
}

TEST_CASE("generated phi keeps the Eikonal property away from the medial axis") {
  auto cfg = toy_config();
  std::vector<std::vector<DiskRecord>> disks;
  auto tr = synth_generate(cfg, 9, &disks);
  double total = 0.0;
  std::size_t count = 0;
  for (int s = 0; s < tr.steps(); ++s) {
    if (disks[s].empty()) continue;
    auto res = eikonal_residual(tr.states[s].phi, tr.dx);
    for (int i = 0; i < cfg.h; ++i) {
      for (int j = 0; j < cfg.w; ++j) {
        // exclusion: cells where the two nearest disks are nearly equidistant
        // (medial axis) or that sit on a disk center (distance kink)
        double d1 = -1e30, d2 = -1e30;
        double nearest_center = 1e30;
        for (const auto& d : disks[s]) {
          const double v = d.radius - std::hypot(j - d.cx, i - d.cy);
          if (v > d1) {
            d2 = d1;
            d1 = v;
          } else if (v > d2) {
            d2 = v;
          }
          nearest_center = std::min(nearest_center, std::hypot(j - d.cx, i - d.cy));
        }
        const bool medial = disks[s].size() > 1 && (d1 - d2) < 2.0 * tr.dx;
        if (medial || nearest_center < 2.0 * tr.dx) continue;
        total += res.map(i, j);
        ++count;
      }
    }
  }
  REQUIRE(count > 1000);
  CHECK(total / static_cast<double>(count) < 0.05);
}

TEST_CASE("detached bubbles rise monotonically until removal") {
  auto cfg = toy_config(true);  // subcooled: bubbles also shrink
  std::vector<std::vector<DiskRecord>> disks;
  synth_generate(cfg, 13, &disks);
  int tracked = 0;
  for (std::size_t s = 0; s + 1 < disks.size(); ++s) {
    for (const auto& d : disks[s]) {
      if (d.attached) continue;
      for (const auto& dn : disks[s + 1]) {
        if (dn.id == d.id) {
          CHECK(dn.cy < d.cy);  // row index strictly decreases
          ++tracked;
        }
      }
    }
  }
  CHECK(tracked > 10);
}

TEST_CASE("degenerate generator config is rejected") {
  auto cfg = toy_config(true);
  cfg.params.condition.nucleation_sites = 0;
  CHECK_THROWS(synth_generate(cfg, 3));
}

TEST_CASE("window_iter yields steps - F consecutive samples") {
  auto cfg = toy_config();
  cfg.steps = 10;
  auto tr = synth_generate(cfg, 21);
  auto samples = window_iter(tr, 3);
  CHECK(samples.size() == 7);
  CHECK((samples[0].target.phi == tr.states[3].phi).all());
  for (std::size_t k = 0; k < samples.size(); ++k) {
    for (int f = 0; f < 3; ++f) {
      CHECK((samples[k].history[f].phi == tr.states[k + f].phi).all());
    }
    CHECK((samples[k].target.t == tr.states[k + 3].t).all());
  }
  CHECK_THROWS(window_iter(tr, 10));
}

TEST_CASE("flip augmentation is an involution and flips Ux sign") {
  auto cfg = toy_config();
  auto tr = synth_generate(cfg, 31);
  const FieldState& s = tr.states[5];
  FieldState f = flip_horizontal(s);
  CHECK(f.ux(3, 4) == -s.ux(3, 32 - 1 - 4));
  CHECK(f.t(7, 0) == s.t(7, 31));
  FieldState ff = flip_horizontal(f);
  CHECK((ff.t == s.t).all());
  CHECK((ff.ux == s.ux).all());
  CHECK((ff.uy == s.uy).all());
  CHECK((ff.phi == s.phi).all());
}

TEST_CASE("augment with no flip and zero sigma is the identity") {
  auto cfg = toy_config();
  auto tr = synth_generate(cfg, 31);
  auto samples = window_iter(tr, 2);
  AugmentConfig ac;
  ac.flip = false;
  ac.noise = false;
  Rng rng(4);
  auto out = augment(samples[0], ac, rng);
  for (int f = 0; f < 2; ++f) {
    CHECK((out.history[f].t == samples[0].history[f].t).all());
    CHECK((out.history[f].ux == samples[0].history[f].ux).all());
  }
  CHECK((out.target.phi == samples[0].target.phi).all());
}

TEST_CASE("noise augmentation leaves the target clean and matches the requested sigma") {
  auto cfg = toy_config();
  cfg.steps = 4;
  auto tr = synth_generate(cfg, 8);
  auto samples = window_iter(tr, 1);
  AugmentConfig ac;
  ac.flip = false;
  ac.noise = true;
  ac.sigma_max_phi = 0.05f;
  Rng rng(99);
  auto out = augment(samples[0], ac, rng);
  CHECK((out.target.phi == samples[0].target.phi).all());
  CHECK(!(out.history[0].phi == samples[0].history[0].phi).all());

  // sample-statistics oracle on the noise source itself
  Rng nrng(123);
  const double sigma = 0.37;
  double acc = 0.0, acc2 = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double v = sigma * nrng.normal();
    acc += v;
    acc2 += v * v;
  }
  const double mean = acc / n;
  const double std = std::sqrt(acc2 / n - mean * mean);
  CHECK(std == doctest::Approx(sigma).epsilon(0.05));
  CHECK(std::fabs(mean) < 0.01);
}

TEST_CASE("manifest round trip and split filtering") {
  const std::string p = temp_path("manifest_test.json");
  write_manifest({{"a.nucl", "train"}, {"b.nucl", "val"}, {"c.nucl", "train"}}, p);
  auto entries = read_manifest(p);
  REQUIRE(entries.size() == 3);
  auto train = manifest_paths(entries, "train");
  CHECK(train == std::vector<std::string>{"a.nucl", "c.nucl"});
  CHECK(manifest_paths(entries, "val") == std::vector<std::string>{"b.nucl"});
  fs::remove(p);
}
