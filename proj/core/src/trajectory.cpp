#include "stirfry/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace stirfry {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

std::vector<double> moving_average(const std::vector<double>& x, int window) {
  if (window <= 1) return x;
  const int n = static_cast<int>(x.size());
  const int half = window / 2;
  std::vector<double> out(x.size());
  for (int i = 0; i < n; ++i) {
    const int lo = std::max(0, i - half);
    const int hi = std::min(n - 1, i + half);
    double s = 0.0;
    for (int k = lo; k <= hi; ++k) s += x[static_cast<std::size_t>(k)];
    out[static_cast<std::size_t>(i)] = s / (hi - lo + 1);
  }
  return out;
}

std::vector<double> derivative(const std::vector<double>& x, double dt) {
  const int n = static_cast<int>(x.size());
  std::vector<double> v(x.size(), 0.0);
  if (n < 2) return v;
  for (int i = 1; i + 1 < n; ++i)
    v[static_cast<std::size_t>(i)] =
        (x[static_cast<std::size_t>(i + 1)] - x[static_cast<std::size_t>(i - 1)]) / (2.0 * dt);
  v[0] = (x[1] - x[0]) / dt;
  v[static_cast<std::size_t>(n - 1)] =
      (x[static_cast<std::size_t>(n - 1)] - x[static_cast<std::size_t>(n - 2)]) / dt;
  return v;
}

}  // namespace

void PoseSeq::validate() const {
  require(poses.size() >= 2, "PoseSeq: length must be >= 2");
  require(t.size() == poses.size(), "PoseSeq: timestamp/pose count mismatch");
  require(dt > 0.0, "PoseSeq: dt must be positive");
  for (std::size_t i = 1; i < t.size(); ++i) {
    const double gap = t[i] - t[i - 1];
    require(gap > 0.0, "PoseSeq: timestamps must be strictly increasing");
    require(std::abs(gap - dt) <= 1e-9, "PoseSeq: sampling must be uniform");
  }
  for (const Vec6& p : poses)
    for (double v : p) require(std::isfinite(v), "PoseSeq: non-finite value");
}

// ---------------------------------------------------------------------------
// phase segmentation
// ---------------------------------------------------------------------------

std::vector<PhaseCycle> segment_phases(const PoseSeq& seq, int forward_axis) {
  SegmentOptions opt;
  opt.forward_axis = forward_axis;
  return segment_phases(seq, opt);
}

std::vector<PhaseCycle> segment_phases(const PoseSeq& seq, const SegmentOptions& opt) {
  seq.validate();
  require(opt.forward_axis >= 0 && opt.forward_axis <= 2,
          "segment_phases: forward_axis must be x, y or z");
  const int n = static_cast<int>(seq.size());
  if (n < 8) throw std::runtime_error("no cycles detected");

  std::vector<double> fwd(seq.size()), pitch(seq.size());
  for (int i = 0; i < n; ++i) {
    fwd[static_cast<std::size_t>(i)] =
        seq.poses[static_cast<std::size_t>(i)][static_cast<std::size_t>(opt.forward_axis)];
    pitch[static_cast<std::size_t>(i)] = seq.poses[static_cast<std::size_t>(i)][4];
  }
  fwd = moving_average(fwd, opt.smooth_window);
  pitch = moving_average(pitch, opt.smooth_window);
  std::vector<double> v = moving_average(derivative(fwd, seq.dt), opt.smooth_window);
  std::vector<double> pr = moving_average(derivative(pitch, seq.dt), opt.smooth_window);

  double vpk = 0.0, prpk = 0.0;
  for (double x : v) vpk = std::max(vpk, std::abs(x));
  for (double x : pr) prpk = std::max(prpk, std::abs(x));
  if (vpk <= 1e-12) throw std::runtime_error("no cycles detected");
  const bool pitch_flat = prpk <= 1e-10;
  const double thr_hi = opt.v_hi_frac * vpk;
  const double thr_lo = opt.v_lo_frac * vpk;

  std::vector<PhaseCycle> cycles;
  int i = 0;
  int scan_floor = 0;  // cycles may not overlap
  while (i < n) {
    // rest -> push
    while (i < n && v[static_cast<std::size_t>(i)] <= thr_hi) ++i;
    if (i >= n) break;
    int b = i;
    while (b > scan_floor && v[static_cast<std::size_t>(b - 1)] > thr_lo) --b;

    // ride the push to its peak, then to the near-zero arrival at the apex
    while (i + 1 < n && v[static_cast<std::size_t>(i + 1)] >= v[static_cast<std::size_t>(i)]) ++i;
    while (i < n && v[static_cast<std::size_t>(i)] >= thr_lo) ++i;
    if (i >= n) break;
    const int c = i;

    // pull-back: a negative excursion followed by a return to the rest band
    int j = c;
    while (j < n && v[static_cast<std::size_t>(j)] > -thr_hi) ++j;
    if (j >= n) break;
    while (j < n && v[static_cast<std::size_t>(j)] <= -thr_lo) ++j;
    const int e = std::min(j, n - 1);

    // rotate -> pull at the pitch-rate minimum (the down-stroke of the toss);
    // with a flat pitch channel fall back to the fastest pull-back sample.
    const std::vector<double>& key = pitch_flat ? v : pr;
    int d = c + 1;
    for (int k = c + 1; k < e; ++k)
      if (key[static_cast<std::size_t>(k)] < key[static_cast<std::size_t>(d)]) d = k;

    if (b < c && c < d && d < e) cycles.push_back(PhaseCycle{b, c, d, e});
    scan_floor = e;
    i = std::max(i, e);
    if (e == n - 1) break;
  }

  if (cycles.empty()) throw std::runtime_error("no cycles detected");
  return cycles;
}

std::vector<char> phase_labels(std::size_t n, const std::vector<PhaseCycle>& cycles) {
  std::vector<char> labels(n, 'a');
  for (const PhaseCycle& c : cycles) {
    for (int k = c.b_start; k < c.c_start; ++k) labels[static_cast<std::size_t>(k)] = 'b';
    for (int k = c.c_start; k < c.d_start; ++k) labels[static_cast<std::size_t>(k)] = 'c';
    for (int k = c.d_start; k < c.d_end; ++k) labels[static_cast<std::size_t>(k)] = 'd';
  }
  return labels;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

NormStats fit_norm_stats(const std::vector<PoseSeq>& dataset) {
  std::size_t count = 0;
  for (const PoseSeq& s : dataset) count += s.size();
  require(count > 0, "fit_norm_stats: empty dataset");
  NormStats st;
  for (const PoseSeq& s : dataset)
    for (const Vec6& p : s.poses)
      for (int d = 0; d < kPoseDim; ++d) st.mean[static_cast<std::size_t>(d)] += p[static_cast<std::size_t>(d)];
  for (double& m : st.mean) m /= static_cast<double>(count);
  for (const PoseSeq& s : dataset)
    for (const Vec6& p : s.poses)
      for (int d = 0; d < kPoseDim; ++d) {
        const double diff = p[static_cast<std::size_t>(d)] - st.mean[static_cast<std::size_t>(d)];
        st.std[static_cast<std::size_t>(d)] += diff * diff;
      }
  for (double& v : st.std) v = std::max(std::sqrt(v / static_cast<double>(count)), 1e-8);
  return st;
}

Vec6 apply_norm(const Vec6& pose, const NormStats& stats) {
  Vec6 out;
  for (std::size_t d = 0; d < 6; ++d) out[d] = (pose[d] - stats.mean[d]) / stats.std[d];
  return out;
}

Vec6 invert_norm(const Vec6& pose, const NormStats& stats) {
  Vec6 out;
  for (std::size_t d = 0; d < 6; ++d) out[d] = pose[d] * stats.std[d] + stats.mean[d];
  return out;
}

PoseSeq apply_norm(const PoseSeq& seq, const NormStats& stats) {
  PoseSeq out = seq;
  for (Vec6& p : out.poses) p = apply_norm(p, stats);
  return out;
}

PoseSeq invert_norm(const PoseSeq& seq, const NormStats& stats) {
  PoseSeq out = seq;
  for (Vec6& p : out.poses) p = invert_norm(p, stats);
  return out;
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

PoseSeq resample(const PoseSeq& seq, double new_dt) {
  seq.validate();
  require(new_dt > 0.0, "resample: new_dt must be positive");
  const double dur = seq.duration();
  require(new_dt <= dur + 1e-12, "resample: new_dt longer than sequence duration");

  const int steps = static_cast<int>(std::floor(dur / new_dt + 1e-9));
  PoseSeq out;
  out.dt = new_dt;
  out.t.reserve(static_cast<std::size_t>(steps) + 1);
  out.poses.reserve(static_cast<std::size_t>(steps) + 1);
  const double t0 = seq.t.front();
  for (int k = 0; k <= steps; ++k) {
    const double tt = t0 + k * new_dt;
    // locate the source interval and snap onto exact samples
    int idx = static_cast<int>(std::floor((tt - t0) / seq.dt));
    idx = std::clamp(idx, 0, static_cast<int>(seq.size()) - 2);
    double alpha = (tt - seq.t[static_cast<std::size_t>(idx)]) /
                   (seq.t[static_cast<std::size_t>(idx) + 1] - seq.t[static_cast<std::size_t>(idx)]);
    if (alpha > 1.0 && idx + 2 < static_cast<int>(seq.size())) {
      ++idx;
      alpha = (tt - seq.t[static_cast<std::size_t>(idx)]) /
              (seq.t[static_cast<std::size_t>(idx) + 1] - seq.t[static_cast<std::size_t>(idx)]);
    }
    const double snap = 1e-12 * std::max(1.0, std::abs(tt));
    if (std::abs(tt - seq.t[static_cast<std::size_t>(idx)]) <= snap) {
      out.t.push_back(seq.t[static_cast<std::size_t>(idx)]);
      out.poses.push_back(seq.poses[static_cast<std::size_t>(idx)]);
      continue;
    }
    if (std::abs(tt - seq.t[static_cast<std::size_t>(idx) + 1]) <= snap) {
      out.t.push_back(seq.t[static_cast<std::size_t>(idx) + 1]);
      out.poses.push_back(seq.poses[static_cast<std::size_t>(idx) + 1]);
      continue;
    }
    Vec6 p;
    for (std::size_t d = 0; d < 6; ++d) {
      const double a = seq.poses[static_cast<std::size_t>(idx)][d];
      const double b = seq.poses[static_cast<std::size_t>(idx) + 1][d];
      p[d] = a + alpha * (b - a);
    }
    out.t.push_back(tt);
    out.poses.push_back(p);
  }
  return out;
}

PoseSeq scale_about_rest(const PoseSeq& seq, double scale, bool scale_orientations) {
  seq.validate();
  require(scale > 0.0, "scale_about_rest: scale must be positive");
  const Vec6 rest = seq.poses.front();
  PoseSeq out = seq;
  const std::size_t dims = scale_orientations ? 6 : 3;
  for (Vec6& p : out.poses)
    for (std::size_t d = 0; d < dims; ++d) p[d] = rest[d] + scale * (p[d] - rest[d]);
  return out;
}

// ---------------------------------------------------------------------------
// trajectory file I/O
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kHeader = "t,x,y,z,roll,pitch,yaw";

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

[[noreturn]] void parse_fail(const std::string& path, std::size_t line,
                             const std::string& what) {
  throw std::runtime_error(path + ":" + std::to_string(line) + ": " + what);
}

}  // namespace

void write_seq(const std::string& path, const PoseSeq& seq) {
  seq.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << kHeader << "\n";
  for (std::size_t i = 0; i < seq.size(); ++i) {
    out << fmt17(seq.t[i]);
    for (double v : seq.poses[i]) out << "," << fmt17(v);
    out << "\n";
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

PoseSeq read_seq(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) parse_fail(path, 1, "empty file");
  ++lineno;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kHeader)
    parse_fail(path, lineno, "expected header '" + std::string(kHeader) + "'");

  PoseSeq seq;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::array<double, 7> vals{};
    std::size_t pos = 0;
    for (int f = 0; f < 7; ++f) {
      const std::size_t next = line.find(',', pos);
      const std::string field = line.substr(pos, next == std::string::npos
                                                     ? std::string::npos
                                                     : next - pos);
      if (field.empty()) parse_fail(path, lineno, "empty field");
      try {
        std::size_t used = 0;
        vals[static_cast<std::size_t>(f)] = std::stod(field, &used);
        if (used != field.size()) throw std::invalid_argument(field);
      } catch (const std::exception&) {
        parse_fail(path, lineno, "bad number '" + field + "'");
      }
      if (next == std::string::npos) {
        if (f != 6) parse_fail(path, lineno, "expected 7 columns");
        pos = std::string::npos;
      } else {
        if (f == 6) parse_fail(path, lineno, "expected 7 columns");
        pos = next + 1;
      }
    }
    if (!seq.t.empty() && vals[0] <= seq.t.back())
      parse_fail(path, lineno, "non-monotonic timestamp");
    seq.t.push_back(vals[0]);
    seq.poses.push_back({vals[1], vals[2], vals[3], vals[4], vals[5], vals[6]});
  }
  if (seq.size() < 2) parse_fail(path, lineno, "fewer than 2 samples");
  seq.dt = seq.t[1] - seq.t[0];
  for (std::size_t i = 1; i < seq.t.size(); ++i) {
    if (std::abs(seq.t[i] - seq.t[i - 1] - seq.dt) > 1e-9)
      parse_fail(path, i + 2, "non-uniform timestamp spacing");
  }
  // keep angles continuous
  for (std::size_t d = 3; d < 6; ++d) {
    for (std::size_t i = 1; i < seq.poses.size(); ++i) {
      double& a = seq.poses[i][d];
      const double prev = seq.poses[i - 1][d];
      while (a - prev > std::numbers::pi) a -= 2.0 * std::numbers::pi;
      while (a - prev < -std::numbers::pi) a += 2.0 * std::numbers::pi;
    }
  }
  seq.validate();
  return seq;
}

// ---------------------------------------------------------------------------
// dataset manifest
// ---------------------------------------------------------------------------

std::vector<const DemoPair*> Dataset::split(const std::string& name) const {
  std::vector<const DemoPair*> out;
  for (const DemoPair& p : pairs)
    if (p.split == name) out.push_back(&p);
  return out;
}

void save_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  nlohmann::json j;
  j["pairs"] = nlohmann::json::array();
  for (const ManifestEntry& e : entries) {
    j["pairs"].push_back({{"left", e.left_path},
                          {"right", e.right_path},
                          {"scale", e.scale},
                          {"split", e.split}});
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << j.dump(2) << "\n";
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": manifest parse error: " + e.what());
  }
  if (!j.contains("pairs") || !j["pairs"].is_array())
    throw std::runtime_error(path + ": manifest missing 'pairs' array");
  std::vector<ManifestEntry> entries;
  for (const auto& p : j["pairs"]) {
    ManifestEntry e;
    e.left_path = p.at("left").get<std::string>();
    e.right_path = p.at("right").get<std::string>();
    e.scale = p.at("scale").get<double>();
    e.split = p.value("split", "train");
    entries.push_back(std::move(e));
  }
  return entries;
}

Dataset load_dataset(const std::string& manifest_path) {
  const auto entries = read_manifest(manifest_path);
  const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
  Dataset ds;
  for (const ManifestEntry& e : entries) {
    DemoPair pair;
    const auto resolve = [&](const std::string& p) {
      std::filesystem::path fp(p);
      return fp.is_absolute() ? fp.string() : (base / fp).string();
    };
    pair.left = read_seq(resolve(e.left_path));
    pair.right = read_seq(resolve(e.right_path));
    pair.scale = e.scale;
    pair.split = e.split;
    ds.pairs.push_back(std::move(pair));
  }
  return ds;
}

}  // namespace stirfry
