#pragma once

#include <array>
#include <string>
#include <vector>

#include "stirfry/trajectory.hpp"

namespace stirfry {

/// Phase variable of the shared canonical system, 1 at movement start and
/// decaying toward 0.
struct CanonicalState {
  double x = 1.0;
};

/// Discrete movement primitive over all six pose dimensions: one critically
/// damped transformation system per dimension, driven by a shared canonical
/// phase and a weighted Gaussian-basis forcing term.
struct DmpParams {
  int n_basis = 30;
  std::vector<double> centers;  // in canonical phase, decreasing
  std::vector<double> widths;   // > 0
  std::array<std::vector<double>, 6> weights;
  double alpha_y = 25.0;
  double beta_y = 25.0 / 4.0;  // critical damping alpha_y/4
  double alpha_x = 0.0;        // default ln(100): x(tau) = 0.01
  double tau = 1.0;            // seconds
  Pose6D y0;
  Pose6D goal;

  void validate() const;
};

/// Gains bundle for fitting; beta_y is derived as alpha_y/4.
struct DmpGains {
  double alpha_y = 25.0;
  double alpha_x = 4.605170185988091;  // ln(100)
};

/// Euler-integrated canonical phase x(t), t = 0, dt, ..., T; x(0) = 1 and
/// tau * dx/dt = -alpha_x * x, so x(t) tracks exp(-alpha_x t / tau).
std::vector<CanonicalState> canonical_rollout(double alpha_x, double tau,
                                              double dt, double T);

/// Gaussian basis activations psi_i = exp(-h_i (x - c_i)^2).
std::vector<double> basis_activations(double x, const std::vector<double>& centers,
                                      const std::vector<double>& widths);

/// Forcing term per dimension: (sum psi_i w_i / sum psi_i) * x * (g - y0).
Vec6 forcing(double x, const std::vector<double>& psi, const DmpParams& params,
             const Pose6D& goal, const Pose6D& y0);

/// Locally weighted regression of the basis weights against the target
/// forcing recovered from the demonstration (derivatives by central
/// differences). tau is the demo duration, y0/goal its endpoints.
DmpParams fit_weights(const PoseSeq& demo, int n_basis, const DmpGains& gains = {});

/// Integrates the primitive from y0 at rest toward goal over `duration`
/// seconds (defaults to tau), sampled every dt. Internally substeps at 1 ms.
PoseSeq rollout(const DmpParams& params, const Pose6D& y0, const Pose6D& goal,
                double tau, double dt, double duration = -1.0);
/// Same, with an initial velocity (used when chaining phases).
PoseSeq rollout(const DmpParams& params, const Pose6D& y0, const Vec6& v0,
                const Pose6D& goal, double tau, double dt, double duration = -1.0);

/// Fitted primitives for the three cycle phases plus the poses that join
/// them. `rest` is both the cycle start and the pull-back goal.
struct PhaseDmpSet {
  DmpParams b, c, d;
  Pose6D conn_bc;  // push goal / rotate start
  Pose6D conn_cd;  // rotate goal / pull start
  Pose6D rest;
};

/// Concatenates b->c->d for `cycles` repetitions. Each phase runs for its
/// own tau, starts from the previous phase's final integrated state, and
/// aims at its connection point (phase d at the rest pose), so the output
/// is position-continuous at every junction.
PoseSeq chain_rollout(const PhaseDmpSet& set, const Pose6D& conn_bc,
                      const Pose6D& conn_cd, int cycles, double dt);

/// Fits the three phase primitives from one segmented cycle of a leader
/// demonstration.
PhaseDmpSet fit_phase_dmps(const PoseSeq& demo, const PhaseCycle& cycle,
                           int n_basis, const DmpGains& gains = {});

void save_dmp_set(const std::string& path, const PhaseDmpSet& set);
PhaseDmpSet load_dmp_set(const std::string& path);

}  // namespace stirfry
