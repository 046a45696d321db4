#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "stirfry/dmp.hpp"
#include "stirfry/trajectory.hpp"
#include "stirfry/transducer.hpp"

namespace stirfry {

struct WokGeom {
  double radius = 0.15;     // m
  double curvature = 20.0;  // bowl z = curvature * u^2 / 2, 1/m
  double rim_height() const { return 0.5 * curvature * radius * radius; }

  double damping = 2.0;      // tangential viscous coefficient, 1/s
  double restitution = 0.2;  // inelastic normal bounce
  double gravity = 9.81;     // m/s^2
};

/// Content point mass in the sagittal (forward, vertical) wok cross-section.
/// In contact the state is the surface coordinate u and its rate; airborne
/// it is a world-frame ballistic point. r_fwd/r_vert always hold the latest
/// wok-frame position so the displacement signal needs no extra context.
struct ContentState {
  double u = 0.0;       // wok-frame forward coordinate on the surface
  double du = 0.0;      // surface-coordinate rate (contact mode)
  bool airborne = false;
  bool clamped = false;  // hit the rim and was clamped this step

  double world_x = 0.0, world_z = 0.0;   // airborne mode
  double world_vx = 0.0, world_vz = 0.0;

  double r_fwd = 0.0, r_vert = 0.0;  // latest wok-frame position
};

/// Wok pose and derivatives in the sagittal plane at one instant.
struct WokFrame {
  double x = 0.0, z = 0.0;       // world position
  double pitch = 0.0;            // rad
  double vx = 0.0, vz = 0.0;     // world velocity
  double pitch_rate = 0.0;
  double ax = 0.0, az = 0.0;     // world acceleration
};

/// One explicit-Euler step (dt must stay at or below 1 ms). Contact mode
/// slides on the bowl under rotated gravity, the frame pseudo-force and
/// tangential damping, and lifts off when the required normal force turns
/// negative; airborne mode is ballistic with inelastic re-contact.
ContentState step_dynamics(const WokFrame& wok, const ContentState& state,
                           const WokGeom& geom, double dt);

/// |forward offset| / radius, clamped to [0, 1].
double relative_displacement(const ContentState& state, const WokGeom& geom);

/// Mechanical energy per unit mass in the wok frame (for dissipation checks
/// with a static wok).
double content_energy(const ContentState& state, const WokGeom& geom);

struct DisplacementTrace {
  std::vector<double> t;
  std::vector<double> d;       // in [0,1]
  std::vector<char> phase;     // 'a'..'d' from segmentation
  std::vector<bool> clamped;   // rim clamp events
};

struct CycleResponse {
  DisplacementTrace trace;
  std::vector<double> per_cycle_max;  // max d per detected cycle
  double mean_max() const;
};

void write_trace_csv(const std::string& path, const DisplacementTrace& trace);

/// Drives the content through the full leader trajectory (x, z, pitch of the
/// poses; 1 ms substeps with linear pose interpolation) and extracts the
/// per-cycle displacement maxima. Segmentation failures propagate.
CycleResponse simulate_cycle(const PoseSeq& left, const WokGeom& geom,
                             const ContentState& state0 = {},
                             const SegmentOptions& seg = {});

struct LoopConfig {
  double target = 0.35;          // desired mean per-cycle max displacement
  double band = 0.1;             // relative tolerance: |d - d*| <= band * d*
  double gain = 0.8;             // multiplicative adjustment gain
  int max_iters = 10;
  double initial_amplitude = 1.0;
  int cycles = 2;                // chained cycles per iteration
  double dt = 0.01;

  void validate() const;
};

struct LoopIteration {
  int iter = 0;
  double amplitude = 1.0;
  double mean_max_d = 0.0;
  double target = 0.0;
  bool converged = false;
  PoseSeq leader;
  PoseSeq follower;
  double coord_ndtw = -1.0;  // vs. the desired follower, when an oracle is given
};

struct LoopResult {
  std::vector<LoopIteration> iterations;
  bool converged = false;
  int best_iter = 0;  // smallest |d - d*|
};

using FollowerFn = std::function<PoseSeq(const PoseSeq&)>;

/// Visual-feedback adjustment loop: roll out the chained leader DMPs, let
/// `follower` generate the right arm, simulate the content, and scale the
/// push connection point multiplicatively toward the target displacement
/// (per-iteration change clamped to +-20%). `desired` optionally supplies a
/// ground-truth follower for the coordination metric.
LoopResult closed_loop(const PhaseDmpSet& dmps, const FollowerFn& follower,
                       const WokGeom& geom, const LoopConfig& cfg,
                       const FollowerFn& desired = {},
                       const NormStats* metric_stats = nullptr);

/// Convenience overload wiring the trained transducer as the follower.
LoopResult closed_loop(const PhaseDmpSet& dmps, ModelParams& model,
                       const NormPair& stats, const WokGeom& geom,
                       const LoopConfig& cfg, const FollowerFn& desired = {});

}  // namespace stirfry
