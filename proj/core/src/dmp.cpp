#include "stirfry/dmp.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace stirfry {

namespace {

constexpr double kInternalDt = 1e-3;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// Centers equally spaced in time map to log-spaced canonical phases; widths
// from neighbour gaps give near-uniform temporal coverage.
void default_basis(int n, double alpha_x, std::vector<double>& centers,
                   std::vector<double>& widths) {
  centers.resize(static_cast<std::size_t>(n));
  widths.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    centers[static_cast<std::size_t>(i)] =
        std::exp(-alpha_x * static_cast<double>(i) / (n - 1));
  for (int i = 0; i + 1 < n; ++i) {
    const double gap = centers[static_cast<std::size_t>(i)] - centers[static_cast<std::size_t>(i) + 1];
    widths[static_cast<std::size_t>(i)] = 1.0 / (gap * gap);
  }
  widths[static_cast<std::size_t>(n - 1)] = widths[static_cast<std::size_t>(n - 2)];
}

int substeps_for(double dt) {
  return std::max(1, static_cast<int>(std::lround(dt / kInternalDt)));
}

// Canonical phase at each sample of a dt-grid, using the same Euler
// substepping as rollout() so fitting and reproduction agree.
std::vector<double> canonical_at_grid(double alpha_x, double tau, double dt,
                                      std::size_t n) {
  const int sub = substeps_for(dt);
  const double h = dt / sub;
  std::vector<double> xs(n);
  double x = 1.0;
  for (std::size_t k = 0; k < n; ++k) {
    xs[k] = x;
    for (int s = 0; s < sub; ++s) x += h * (-alpha_x * x / tau);
  }
  return xs;
}

}  // namespace

void DmpParams::validate() const {
  require(n_basis >= 2, "DmpParams: n_basis must be >= 2");
  require(static_cast<int>(centers.size()) == n_basis &&
              static_cast<int>(widths.size()) == n_basis,
          "DmpParams: centers/widths size mismatch");
  for (double h : widths) require(h > 0.0, "DmpParams: widths must be positive");
  require(alpha_y > 0.0 && beta_y > 0.0 && alpha_x > 0.0 && tau > 0.0,
          "DmpParams: gains and tau must be positive");
  require(std::abs(beta_y - alpha_y / 4.0) <= 1e-12 * alpha_y,
          "DmpParams: critical damping requires beta_y = alpha_y/4");
  for (const auto& w : weights)
    require(static_cast<int>(w.size()) == n_basis, "DmpParams: weight size mismatch");
}

std::vector<CanonicalState> canonical_rollout(double alpha_x, double tau,
                                              double dt, double T) {
  require(dt > 0.0, "canonical_rollout: dt must be positive");
  require(T >= dt, "canonical_rollout: T must be at least dt");
  require(alpha_x > 0.0 && tau > 0.0, "canonical_rollout: gains must be positive");
  const int n = static_cast<int>(std::lround(T / dt)) + 1;
  std::vector<CanonicalState> out(static_cast<std::size_t>(n));
  double x = 1.0;
  for (int k = 0; k < n; ++k) {
    out[static_cast<std::size_t>(k)].x = x;
    x += dt * (-alpha_x * x / tau);
  }
  return out;
}

std::vector<double> basis_activations(double x, const std::vector<double>& centers,
                                      const std::vector<double>& widths) {
  require(centers.size() == widths.size(), "basis_activations: size mismatch");
  std::vector<double> psi(centers.size());
  for (std::size_t i = 0; i < centers.size(); ++i) {
    const double d = x - centers[i];
    psi[i] = std::exp(-widths[i] * d * d);
  }
  return psi;
}

Vec6 forcing(double x, const std::vector<double>& psi, const DmpParams& params,
             const Pose6D& goal, const Pose6D& y0) {
  double denom = 0.0;
  for (double p : psi) denom += p;
  const Vec6 g = goal.to_array();
  const Vec6 s = y0.to_array();
  Vec6 f{};
  if (denom <= 0.0) return f;  // x far outside the basis support
  for (std::size_t d = 0; d < 6; ++d) {
    double num = 0.0;
    for (std::size_t i = 0; i < psi.size(); ++i)
      num += psi[i] * params.weights[d][i];
    f[d] = num / denom * x * (g[d] - s[d]);
  }
  return f;
}

DmpParams fit_weights(const PoseSeq& demo, int n_basis, const DmpGains& gains) {
  demo.validate();
  require(demo.size() >= 3, "fit_weights: demo must have at least 3 samples");
  require(n_basis >= 2, "fit_weights: n_basis must be >= 2");

  DmpParams params;
  params.n_basis = n_basis;
  params.alpha_y = gains.alpha_y;
  params.beta_y = gains.alpha_y / 4.0;
  params.alpha_x = gains.alpha_x;
  params.tau = demo.duration();
  params.y0 = Pose6D::from_array(demo.poses.front());
  params.goal = Pose6D::from_array(demo.poses.back());
  default_basis(n_basis, params.alpha_x, params.centers, params.widths);

  const std::size_t n = demo.size();
  const double dt = demo.dt;
  const std::vector<double> xs = canonical_at_grid(params.alpha_x, params.tau, dt, n);

  const Vec6 g = params.goal.to_array();
  const Vec6 y0 = params.y0.to_array();

  for (std::size_t d = 0; d < 6; ++d) {
    const double amp = g[d] - y0[d];
    std::vector<double> ftarget(n);
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t km = k == 0 ? 0 : k - 1;
      const std::size_t kp = k + 1 >= n ? n - 1 : k + 1;
      const double span = demo.t[kp] - demo.t[km];
      const double vel = (demo.poses[kp][d] - demo.poses[km][d]) / span;
      const std::size_t kc = std::clamp<std::size_t>(k, 1, n - 2);
      const double acc = (demo.poses[kc + 1][d] - 2.0 * demo.poses[kc][d] +
                          demo.poses[kc - 1][d]) /
                         (dt * dt);
      const double y = demo.poses[k][d];
      ftarget[k] = params.tau * params.tau * acc -
                   params.alpha_y * (params.beta_y * (g[d] - y) - params.tau * vel);
    }
    std::vector<double>& w = params.weights[d];
    w.assign(static_cast<std::size_t>(n_basis), 0.0);
    for (int i = 0; i < n_basis; ++i) {
      double num = 0.0, den = 1e-10;
      for (std::size_t k = 0; k < n; ++k) {
        const double dx = xs[k] - params.centers[static_cast<std::size_t>(i)];
        const double psi = std::exp(-params.widths[static_cast<std::size_t>(i)] * dx * dx);
        const double basis = xs[k] * amp;
        num += psi * basis * ftarget[k];
        den += psi * basis * basis;
      }
      w[static_cast<std::size_t>(i)] = num / den;
    }
  }
  params.validate();
  return params;
}

PoseSeq rollout(const DmpParams& params, const Pose6D& y0, const Pose6D& goal,
                double tau, double dt, double duration) {
  return rollout(params, y0, Vec6{}, goal, tau, dt, duration);
}

PoseSeq rollout(const DmpParams& params, const Pose6D& y0, const Vec6& v0,
                const Pose6D& goal, double tau, double dt, double duration) {
  params.validate();
  require(dt > 0.0, "rollout: dt must be positive");
  require(tau > 0.0, "rollout: tau must be positive");
  if (duration <= 0.0) duration = tau;

  const int n_out = static_cast<int>(std::lround(duration / dt));
  const int sub = substeps_for(dt);
  const double h = dt / sub;

  Vec6 y = y0.to_array();
  Vec6 v = v0;
  const Vec6 g = goal.to_array();
  const Vec6 start = y0.to_array();
  double x = 1.0;

  PoseSeq out;
  out.dt = dt;
  out.t.reserve(static_cast<std::size_t>(n_out) + 1);
  out.poses.reserve(static_cast<std::size_t>(n_out) + 1);
  out.t.push_back(0.0);
  out.poses.push_back(y);

  for (int k = 1; k <= n_out; ++k) {
    for (int s = 0; s < sub; ++s) {
      const std::vector<double> psi = basis_activations(x, params.centers, params.widths);
      double denom = 0.0;
      for (double p : psi) denom += p;
      for (std::size_t d = 0; d < 6; ++d) {
        double f = 0.0;
        if (denom > 0.0) {
          double num = 0.0;
          for (std::size_t i = 0; i < psi.size(); ++i)
            num += psi[i] * params.weights[d][i];
          f = num / denom * x * (g[d] - start[d]);
        }
        const double acc =
            (params.alpha_y * (params.beta_y * (g[d] - y[d]) - tau * v[d]) + f) /
            (tau * tau);
        y[d] += h * v[d];
        v[d] += h * acc;
      }
      x += h * (-params.alpha_x * x / tau);
    }
    out.t.push_back(k * dt);
    out.poses.push_back(y);
  }
  return out;
}

namespace {

Vec6 end_velocity(const PoseSeq& seq) {
  Vec6 v{};
  const std::size_t n = seq.size();
  if (n < 2) return v;
  for (std::size_t d = 0; d < 6; ++d)
    v[d] = (seq.poses[n - 1][d] - seq.poses[n - 2][d]) / seq.dt;
  return v;
}

}  // namespace

PoseSeq chain_rollout(const PhaseDmpSet& set, const Pose6D& conn_bc,
                      const Pose6D& conn_cd, int cycles, double dt) {
  require(cycles >= 1, "chain_rollout: cycles must be >= 1");
  require(dt > 0.0, "chain_rollout: dt must be positive");

  PoseSeq out;
  out.dt = dt;
  Pose6D cursor = set.rest;
  Vec6 vel{};
  double t_off = 0.0;

  for (int cycle = 0; cycle < cycles; ++cycle) {
    const std::array<const DmpParams*, 3> phases{&set.b, &set.c, &set.d};
    const std::array<Pose6D, 3> goals{conn_bc, conn_cd, set.rest};
    for (int p = 0; p < 3; ++p) {
      const DmpParams& dmp = *phases[static_cast<std::size_t>(p)];
      const PoseSeq piece =
          rollout(dmp, cursor, vel, goals[static_cast<std::size_t>(p)], dmp.tau, dt);
      const std::size_t skip = out.poses.empty() ? 0 : 1;  // junction sample overlaps
      for (std::size_t k = skip; k < piece.size(); ++k) {
        out.t.push_back(t_off + piece.t[k]);
        out.poses.push_back(piece.poses[k]);
      }
      t_off += piece.t.back();
      cursor = Pose6D::from_array(piece.poses.back());
      vel = end_velocity(piece);
    }
  }
  return out;
}

PhaseDmpSet fit_phase_dmps(const PoseSeq& demo, const PhaseCycle& cycle,
                           int n_basis, const DmpGains& gains) {
  demo.validate();
  require(cycle.b_start < cycle.c_start && cycle.c_start < cycle.d_start &&
              cycle.d_start < cycle.d_end &&
              cycle.d_end < static_cast<int>(demo.size()),
          "fit_phase_dmps: malformed cycle");

  const auto slice = [&](int lo, int hi) {
    PoseSeq s;
    s.dt = demo.dt;
    for (int k = lo; k <= hi; ++k) {
      s.t.push_back(demo.t[static_cast<std::size_t>(k)] -
                    demo.t[static_cast<std::size_t>(lo)]);
      s.poses.push_back(demo.poses[static_cast<std::size_t>(k)]);
    }
    return s;
  };

  PhaseDmpSet set;
  const PoseSeq seg_b = slice(cycle.b_start, cycle.c_start);
  const PoseSeq seg_c = slice(cycle.c_start, cycle.d_start);
  const PoseSeq seg_d = slice(cycle.d_start, cycle.d_end);
  set.b = fit_weights(seg_b, n_basis, gains);
  set.c = fit_weights(seg_c, n_basis, gains);
  set.d = fit_weights(seg_d, n_basis, gains);
  set.rest = Pose6D::from_array(demo.poses[static_cast<std::size_t>(cycle.b_start)]);
  set.conn_bc = Pose6D::from_array(demo.poses[static_cast<std::size_t>(cycle.c_start)]);
  set.conn_cd = Pose6D::from_array(demo.poses[static_cast<std::size_t>(cycle.d_start)]);
  return set;
}

// ---------------------------------------------------------------------------
// JSON serialization
// ---------------------------------------------------------------------------

namespace {

nlohmann::json pose_json(const Pose6D& p) {
  const Vec6 a = p.to_array();
  return nlohmann::json(std::vector<double>(a.begin(), a.end()));
}

Pose6D pose_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 6) throw std::runtime_error("pose array must have 6 entries");
  Vec6 a{};
  std::copy(v.begin(), v.end(), a.begin());
  return Pose6D::from_array(a);
}

nlohmann::json dmp_json(const DmpParams& p) {
  nlohmann::json j;
  j["n_basis"] = p.n_basis;
  j["centers"] = p.centers;
  j["widths"] = p.widths;
  static constexpr const char* kDims[6] = {"x", "y", "z", "roll", "pitch", "yaw"};
  for (std::size_t d = 0; d < 6; ++d) j["weights"][kDims[d]] = p.weights[d];
  j["alpha_y"] = p.alpha_y;
  j["beta_y"] = p.beta_y;
  j["alpha_x"] = p.alpha_x;
  j["tau"] = p.tau;
  j["y0"] = pose_json(p.y0);
  j["goal"] = pose_json(p.goal);
  return j;
}

DmpParams dmp_from_json(const nlohmann::json& j) {
  DmpParams p;
  p.n_basis = j.at("n_basis").get<int>();
  p.centers = j.at("centers").get<std::vector<double>>();
  p.widths = j.at("widths").get<std::vector<double>>();
  static constexpr const char* kDims[6] = {"x", "y", "z", "roll", "pitch", "yaw"};
  for (std::size_t d = 0; d < 6; ++d)
    p.weights[d] = j.at("weights").at(kDims[d]).get<std::vector<double>>();
  p.alpha_y = j.at("alpha_y").get<double>();
  p.beta_y = j.at("beta_y").get<double>();
  p.alpha_x = j.at("alpha_x").get<double>();
  p.tau = j.at("tau").get<double>();
  p.y0 = pose_from_json(j.at("y0"));
  p.goal = pose_from_json(j.at("goal"));
  p.validate();
  return p;
}

}  // namespace

void save_dmp_set(const std::string& path, const PhaseDmpSet& set) {
  nlohmann::json j;
  j["phases"]["b"] = dmp_json(set.b);
  j["phases"]["c"] = dmp_json(set.c);
  j["phases"]["d"] = dmp_json(set.d);
  j["conn_bc"] = pose_json(set.conn_bc);
  j["conn_cd"] = pose_json(set.conn_cd);
  j["rest"] = pose_json(set.rest);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << j.dump(2) << "\n";
}

PhaseDmpSet load_dmp_set(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": dmp file parse error: " + e.what());
  }
  try {
    PhaseDmpSet set;
    set.b = dmp_from_json(j.at("phases").at("b"));
    set.c = dmp_from_json(j.at("phases").at("c"));
    set.d = dmp_from_json(j.at("phases").at("d"));
    set.conn_bc = pose_from_json(j.at("conn_bc"));
    set.conn_cd = pose_from_json(j.at("conn_cd"));
    set.rest = pose_from_json(j.at("rest"));
    return set;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": dmp file missing fields: " + e.what());
  }
}

}  // namespace stirfry
