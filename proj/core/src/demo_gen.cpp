#include "stirfry/demo_gen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <cstdio>
#include <filesystem>
#include <random>
#include <stdexcept>

namespace stirfry {

namespace {

// leader rest pose and the constant leader->follower arm offset
constexpr Vec6 kLeaderRest = {0.40, -0.10, 0.25, 0.0, 0.0, 0.0};
constexpr Vec6 kArmOffset = {0.02, 0.20, 0.10, 0.0, 0.0, 0.0};

// orientation coupling gains (follower counter-rotates against the toss)
constexpr double kRollFromPitch = 0.25;
constexpr double kPitchFromPitch = -0.6;
constexpr double kYawFromStir = 0.15;

double min_jerk(double s) {
  s = std::clamp(s, 0.0, 1.0);
  return s * s * s * (10.0 + s * (-15.0 + 6.0 * s));
}

// symmetric up-down bump, C1, peaking at s = 0.5
double bump(double s) {
  s = std::clamp(s, 0.0, 1.0);
  return s < 0.5 ? min_jerk(2.0 * s) : min_jerk(2.0 * (1.0 - s));
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

struct CycleClock {
  double rest;
  double period;
  int cycles;

  // cycle index and local time; cycle < 0 before/after the rhythmic part
  std::pair<int, double> locate(double t) const {
    if (t < rest) return {-1, t};
    const double s = t - rest;
    const int k = static_cast<int>(std::floor(s / period));
    if (k >= cycles) return {-1, s - cycles * period};
    return {k, s - k * period};
  }
};

double leader_forward(const DemoSpec& spec, double t) {
  const CycleClock clock{spec.rest_duration, spec.cycle_period(), spec.cycles};
  const auto [k, local] = clock.locate(t);
  if (k < 0) return 0.0;
  if (local < spec.phase_b) return spec.push_amplitude * min_jerk(local / spec.phase_b);
  if (local < spec.phase_b + spec.phase_c) return spec.push_amplitude;
  return spec.push_amplitude *
         (1.0 - min_jerk((local - spec.phase_b - spec.phase_c) / spec.phase_d));
}

// The toss rises over the first half of the rotate phase and falls over a
// window of the same width centred on the rotate->pull boundary, so the
// steepest downward pitch rate lands exactly on that boundary.
double leader_pitch(const DemoSpec& spec, double t) {
  const CycleClock clock{spec.rest_duration, spec.cycle_period(), spec.cycles};
  const auto [k, local] = clock.locate(t);
  if (k < 0) return 0.0;
  const double up_start = spec.phase_b;
  const double up_end = spec.phase_b + 0.5 * spec.phase_c;
  const double down_end = up_end + spec.phase_c;  // reaches phase_c/2 into the pull
  if (local < up_start || local >= down_end) return 0.0;
  if (local < up_end)
    return spec.toss_pitch * min_jerk((local - up_start) / (up_end - up_start));
  return spec.toss_pitch * (1.0 - min_jerk((local - up_end) / (down_end - up_end)));
}

// stir-arc progress: advances by one half-turn during each contact phase
double stir_progress(const DemoSpec& spec, double t) {
  const CycleClock clock{spec.rest_duration, spec.cycle_period(), spec.cycles};
  const auto [k, local] = clock.locate(t);
  if (k < 0) return t < spec.rest_duration ? 0.0 : 2.0 * spec.cycles;
  const double base = 2.0 * k;
  if (local < spec.phase_b) return base + min_jerk(local / spec.phase_b);
  if (local < spec.phase_b + spec.phase_c) return base + 1.0;
  return base + 1.0 +
         min_jerk((local - spec.phase_b - spec.phase_c) / spec.phase_d);
}

double lift_profile(const DemoSpec& spec, double t) {
  const CycleClock clock{spec.rest_duration, spec.cycle_period(), spec.cycles};
  const auto [k, local] = clock.locate(t);
  if (k < 0) return 0.0;
  if (local < spec.phase_b || local >= spec.phase_b + spec.phase_c) return 0.0;
  return bump((local - spec.phase_b) / spec.phase_c);
}

Vec6 interp_pose(const PoseSeq& seq, double t) {
  if (t <= seq.t.front()) return seq.poses.front();
  if (t >= seq.t.back()) return seq.poses.back();
  const int idx = std::min(static_cast<int>((t - seq.t.front()) / seq.dt),
                           static_cast<int>(seq.size()) - 2);
  const double alpha = (t - seq.t[static_cast<std::size_t>(idx)]) / seq.dt;
  Vec6 out;
  for (std::size_t d = 0; d < 6; ++d) {
    const double a = seq.poses[static_cast<std::size_t>(idx)][d];
    const double b = seq.poses[static_cast<std::size_t>(idx) + 1][d];
    out[d] = a + alpha * (b - a);
  }
  return out;
}

}  // namespace

void DemoSpec::validate() const {
  require(cycles >= 1, "DemoSpec: cycles must be >= 1");
  require(phase_b > 0.0 && phase_c > 0.0 && phase_d > 0.0,
          "DemoSpec: phase durations must be positive");
  require(rest_duration > 0.0, "DemoSpec: rest_duration must be positive");
  require(push_amplitude >= 0.0 && toss_pitch >= 0.0,
          "DemoSpec: amplitudes must be non-negative");
  require(lag >= 0.0 && lag < phase_b, "DemoSpec: lag must stay below phase_b");
  require(phase_d >= 0.5 * phase_c,
          "DemoSpec: pull phase must cover the pitch down-stroke (phase_d >= phase_c/2)");
  require(dt > 0.0, "DemoSpec: dt must be positive");
  for (double s : noise_std) require(s >= 0.0, "DemoSpec: noise std must be >= 0");
}

PoseSeq gen_leader(const DemoSpec& spec) {
  spec.validate();
  const double total = 2.0 * spec.rest_duration + spec.cycles * spec.cycle_period();
  const int n = static_cast<int>(std::lround(total / spec.dt)) + 1;
  PoseSeq seq;
  seq.dt = spec.dt;
  seq.t.reserve(static_cast<std::size_t>(n));
  seq.poses.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double t = i * spec.dt;
    Vec6 p = kLeaderRest;
    p[0] += leader_forward(spec, t);
    p[4] += leader_pitch(spec, t);
    seq.t.push_back(t);
    seq.poses.push_back(p);
  }
  return seq;
}

std::vector<PhaseCycle> gen_ground_truth_cycles(const DemoSpec& spec) {
  spec.validate();
  std::vector<PhaseCycle> cycles;
  const auto index_at = [&](double t) {
    return static_cast<int>(std::lround(t / spec.dt));
  };
  for (int k = 0; k < spec.cycles; ++k) {
    const double start = spec.rest_duration + k * spec.cycle_period();
    PhaseCycle c;
    c.b_start = index_at(start);
    c.c_start = index_at(start + spec.phase_b);
    c.d_start = index_at(start + spec.phase_b + spec.phase_c);
    c.d_end = index_at(start + spec.cycle_period());
    cycles.push_back(c);
  }
  return cycles;
}

PoseSeq gen_follower(const PoseSeq& leader, const DemoSpec& spec) {
  return gen_follower(leader, spec, spec.seed);
}

PoseSeq gen_follower(const PoseSeq& leader, const DemoSpec& spec,
                     std::uint64_t noise_seed) {
  spec.validate();
  leader.validate();
  Rng rng(noise_seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  PoseSeq out;
  out.dt = leader.dt;
  out.t = leader.t;
  out.poses.reserve(leader.size());
  for (std::size_t i = 0; i < leader.size(); ++i) {
    const double t = leader.t[i];
    const Vec6 lag_pose = interp_pose(leader, t - spec.lag);
    const double w = stir_progress(spec, t);
    const double lift = lift_profile(spec, t);
    Vec6 p;
    p[0] = lag_pose[0] + kArmOffset[0] + spec.stir_radius * std::sin(2.0 * std::numbers::pi * w);
    p[1] = lag_pose[1] + kArmOffset[1] +
           spec.stir_radius * (std::cos(2.0 * std::numbers::pi * w) - 1.0);
    p[2] = lag_pose[2] + kArmOffset[2] + spec.contact_depth * lift;
    p[3] = lag_pose[3] + kArmOffset[3] + kRollFromPitch * lag_pose[4];
    p[4] = kArmOffset[4] + kPitchFromPitch * lag_pose[4];
    p[5] = lag_pose[5] + kArmOffset[5] +
           kYawFromStir * std::sin(2.0 * std::numbers::pi * w);
    for (std::size_t d = 0; d < 6; ++d)
      if (spec.noise_std[d] > 0.0) p[d] += spec.noise_std[d] * gauss(rng);
    out.poses.push_back(p);
  }
  return out;
}

std::string gen_dataset(const DemoSpec& spec, const std::string& out_dir,
                        const ScaleSplits& splits) {
  spec.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  const PoseSeq nominal = gen_leader(spec);
  std::vector<std::pair<double, std::string>> scale_split;
  for (double s : splits.train) scale_split.emplace_back(s, "train");
  for (double s : splits.val) scale_split.emplace_back(s, "val");
  for (double s : splits.test) scale_split.emplace_back(s, "test");

  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < scale_split.size(); ++i) {
    const auto& [scale, split] = scale_split[i];
    const PoseSeq left = scale_about_rest(nominal, scale);
    const PoseSeq right = gen_follower(left, spec, spec.seed + 1000 + i);
    char name[64];
    std::snprintf(name, sizeof(name), "demo_s%.2f", scale);
    ManifestEntry e;
    e.left_path = std::string(name) + "_left.csv";
    e.right_path = std::string(name) + "_right.csv";
    e.scale = scale;
    e.split = split;
    write_seq((fs::path(out_dir) / e.left_path).string(), left);
    write_seq((fs::path(out_dir) / e.right_path).string(), right);
    entries.push_back(std::move(e));
  }
  const std::string manifest = (fs::path(out_dir) / "manifest.json").string();
  save_manifest(manifest, entries);
  return manifest;
}

}  // namespace stirfry
