#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stirfry/trajectory.hpp"

namespace stirfry {

/// Parametric stir-fry demonstration: a rest lead-in, `cycles` repetitions of
/// push/rotate/pull on the leader, and a deterministic leader->follower
/// coupling with known ground truth. The leader stays noise-free; capture
/// jitter is added to the follower only.
struct DemoSpec {
  int cycles = 2;
  double phase_b = 0.4;  // push duration, s
  double phase_c = 0.3;  // rotate duration, s
  double phase_d = 0.4;  // pull duration, s
  double rest_duration = 0.3;  // static lead-in and tail, s
  double push_amplitude = 0.12;     // m
  double toss_pitch = 0.35;         // rad

  // follower coupling
  double lag = 0.06;           // s, must stay below phase_b
  double contact_depth = 0.03; // lift height during the rotate phase, m
  double stir_radius = 0.02;   // m

  Vec6 noise_std = {1e-3, 1e-3, 1e-3, 0.0087, 0.0087, 0.0087};  // 1 mm / 0.5 deg
  std::uint64_t seed = 1;
  double dt = 0.01;  // canonical 100 Hz

  void validate() const;
  double cycle_period() const { return phase_b + phase_c + phase_d; }
};

/// Smooth (minimum-jerk blended) leader trajectory; the forward push peaks at
/// exactly push_amplitude and the pitch toss snaps down fastest right at the
/// rotate->pull boundary.
PoseSeq gen_leader(const DemoSpec& spec);

/// Ground-truth phase boundaries of the generated leader, per cycle.
std::vector<PhaseCycle> gen_ground_truth_cycles(const DemoSpec& spec);

/// Deterministic follower: the lagged leader pose plus a constant arm offset,
/// a stir arc during the contact phases, a lift during the rotate phase, and
/// pitch-coupled orientation. Gaussian noise (spec.noise_std) is seeded by
/// `noise_seed` (defaults to spec.seed).
PoseSeq gen_follower(const PoseSeq& leader, const DemoSpec& spec);
PoseSeq gen_follower(const PoseSeq& leader, const DemoSpec& spec,
                     std::uint64_t noise_seed);

struct ScaleSplits {
  std::vector<double> train = {0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4, 1.5};
  std::vector<double> val = {0.65, 0.75};
  std::vector<double> test = {0.85};
};

/// Writes one demo pair per scale (leader scaled about rest, follower
/// re-coupled to the scaled leader with an independent noise draw) plus the
/// dataset manifest. Returns the manifest path.
std::string gen_dataset(const DemoSpec& spec, const std::string& out_dir,
                        const ScaleSplits& splits = {});

}  // namespace stirfry
