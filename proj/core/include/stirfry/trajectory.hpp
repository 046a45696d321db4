#pragma once

#include <array>
#include <string>
#include <vector>

namespace stirfry {

/// Pose feature order used everywhere: x, y, z, roll, pitch, yaw.
using Vec6 = std::array<double, 6>;

inline constexpr int kPoseDim = 6;

struct Pose6D {
  double x = 0.0, y = 0.0, z = 0.0;       // meters
  double roll = 0.0, pitch = 0.0, yaw = 0.0;  // radians, unwrapped

  Vec6 to_array() const { return {x, y, z, roll, pitch, yaw}; }
  static Pose6D from_array(const Vec6& a) {
    return {a[0], a[1], a[2], a[3], a[4], a[5]};
  }
};

/// Uniformly sampled 6-DoF end-effector trajectory. Angles are kept
/// continuous across samples (no +-pi jumps); the reader unwraps on load.
struct PoseSeq {
  std::vector<double> t;      // seconds, strictly increasing, spacing dt
  std::vector<Vec6> poses;
  double dt = 0.01;

  std::size_t size() const { return poses.size(); }
  double duration() const { return t.back() - t.front(); }
  /// Throws std::invalid_argument when an invariant is broken.
  void validate() const;
};

/// One stir cycle: push [b_start,c_start), rotate [c_start,d_start),
/// pull [d_start,d_end). Indices into the segmented PoseSeq.
struct PhaseCycle {
  int b_start = 0;
  int c_start = 0;
  int d_start = 0;
  int d_end = 0;
};

struct NormStats {
  Vec6 mean{};
  Vec6 std{};  // floored at 1e-8 when fitted
};

struct SegmentOptions {
  int forward_axis = 0;     // 0=x, 1=y, 2=z
  int smooth_window = 7;    // centered moving average, odd
  double v_hi_frac = 0.10;  // motion threshold as a fraction of peak |v|
  double v_lo_frac = 0.02;  // near-rest threshold
};

/// Splits a trajectory into push/rotate/pull cycles. Push boundaries come
/// from forward-velocity threshold crossings, the rotate->pull boundary from
/// the pitch-rate minimum (falling back to the forward-velocity minimum when
/// the pitch channel is flat), and the cycle ends where the pull-back
/// velocity returns to the rest band. Throws std::runtime_error
/// ("no cycles detected") when the sequence never leaves rest.
std::vector<PhaseCycle> segment_phases(const PoseSeq& seq,
                                       const SegmentOptions& opt = {});
std::vector<PhaseCycle> segment_phases(const PoseSeq& seq, int forward_axis);

/// Phase label for trace annotation: 'a' rest, 'b' push, 'c' rotate, 'd' pull.
std::vector<char> phase_labels(std::size_t n, const std::vector<PhaseCycle>& cycles);

NormStats fit_norm_stats(const std::vector<PoseSeq>& dataset);
PoseSeq apply_norm(const PoseSeq& seq, const NormStats& stats);
PoseSeq invert_norm(const PoseSeq& seq, const NormStats& stats);
Vec6 apply_norm(const Vec6& pose, const NormStats& stats);
Vec6 invert_norm(const Vec6& pose, const NormStats& stats);

/// Linear resampling onto a uniform new_dt grid anchored at the first
/// sample. The start is preserved bitwise; so is the end when the duration
/// is an integer multiple of new_dt (otherwise the grid truncates).
PoseSeq resample(const PoseSeq& seq, double new_dt);

/// Scales the positions (and optionally orientations) about the sequence's
/// rest pose, taken as its first sample.
PoseSeq scale_about_rest(const PoseSeq& seq, double scale,
                         bool scale_orientations = false);

/// CSV with header `t,x,y,z,roll,pitch,yaw`, one sample per row, 17
/// significant digits, LF endings. Write-then-read round-trips bit-exactly.
PoseSeq read_seq(const std::string& path);
void write_seq(const std::string& path, const PoseSeq& seq);

struct ManifestEntry {
  std::string left_path;
  std::string right_path;
  double scale = 1.0;
  std::string split;  // "train" | "val" | "test"
};

struct DemoPair {
  PoseSeq left;
  PoseSeq right;
  double scale = 1.0;
  std::string split;
};

struct Dataset {
  std::vector<DemoPair> pairs;

  std::vector<const DemoPair*> split(const std::string& name) const;
};

/// Manifest JSON: {"pairs":[{"left":...,"right":...,"scale":...,"split":...}]}
/// with trajectory paths resolved relative to the manifest file.
void save_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::string& path);
Dataset load_dataset(const std::string& manifest_path);

}  // namespace stirfry
