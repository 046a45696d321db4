#include "stirfry/dtw.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace stirfry {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double sq_dist6(const Vec6& a, const Vec6& b) {
  double s = 0.0;
  for (std::size_t d = 0; d < 6; ++d) {
    const double diff = a[d] - b[d];
    s += diff * diff;
  }
  return s;
}

// -gamma * log(sum exp(-x_i/gamma)), stabilized by the running minimum.
double soft_min3(double x0, double x1, double x2, double gamma) {
  const double m = std::min(x0, std::min(x1, x2));
  if (!std::isfinite(m)) return m;
  const double s = std::exp(-(x0 - m) / gamma) + std::exp(-(x1 - m) / gamma) +
                   std::exp(-(x2 - m) / gamma);
  return m - gamma * std::log(s);
}

}  // namespace

DtwResult dtw(std::span<const Vec6> a, std::span<const Vec6> b) {
  if (a.empty() || b.empty())
    throw std::invalid_argument("dtw: sequences must be non-empty");
  const int n = static_cast<int>(a.size());
  const int m = static_cast<int>(b.size());
  // D is (n+1) x (m+1) with an infinite border
  std::vector<double> D(static_cast<std::size_t>(n + 1) * (m + 1), kInf);
  const auto at = [&](int i, int j) -> double& {
    return D[static_cast<std::size_t>(i) * (m + 1) + j];
  };
  at(0, 0) = 0.0;
  for (int i = 1; i <= n; ++i)
    for (int j = 1; j <= m; ++j) {
      const double c = sq_dist6(a[static_cast<std::size_t>(i - 1)],
                                b[static_cast<std::size_t>(j - 1)]);
      at(i, j) = c + std::min(at(i - 1, j - 1), std::min(at(i - 1, j), at(i, j - 1)));
    }

  DtwResult res;
  res.cost = at(n, m);
  int i = n, j = m;
  while (i >= 1 && j >= 1) {
    res.path.emplace_back(i - 1, j - 1);
    if (i == 1 && j == 1) break;
    const double diag = at(i - 1, j - 1);
    const double up = at(i - 1, j);
    const double left = at(i, j - 1);
    const double best = std::min(diag, std::min(up, left));
    if (diag == best) {
      --i;
      --j;
    } else if (up == best) {
      --i;
    } else {
      --j;
    }
  }
  std::reverse(res.path.begin(), res.path.end());
  return res;
}

// ---------------------------------------------------------------------------
// soft-DTW
// ---------------------------------------------------------------------------

namespace {

double pair_cost(const double* a, const double* b, int d) {
  double s = 0.0;
  for (int k = 0; k < d; ++k) {
    const double diff = a[k] - b[k];
    s += diff * diff;
  }
  return s;
}

// Forward recursion; fills R of size (n+2) x (m+2) in the layout used by the
// backward pass.
void soft_dtw_forward(const double* a, int n, const double* b, int m, int d,
                      double gamma, std::vector<double>& R) {
  const int w = m + 2;
  R.assign(static_cast<std::size_t>(n + 2) * w, kInf);
  R[0] = 0.0;  // R(0,0)
  for (int i = 1; i <= n; ++i)
    for (int j = 1; j <= m; ++j) {
      const double c = pair_cost(a + static_cast<std::ptrdiff_t>(i - 1) * d,
                                 b + static_cast<std::ptrdiff_t>(j - 1) * d, d);
      const std::size_t ij = static_cast<std::size_t>(i) * w + j;
      R[ij] = c + soft_min3(R[ij - w - 1], R[ij - w], R[ij - 1], gamma);
    }
}

// Cuturi & Blondel style backward recursion: E(i,j) is the gradient of the
// final value with respect to the (i,j) pairwise cost.
void soft_dtw_backward_E(const double* a, int n, const double* b, int m, int d,
                         double gamma, std::vector<double>& R,
                         std::vector<double>& E) {
  const int w = m + 2;
  // pad with -inf so the exp() terms vanish on the border
  for (int i = 1; i <= n; ++i) R[static_cast<std::size_t>(i) * w + m + 1] = -kInf;
  for (int j = 1; j <= m; ++j) R[static_cast<std::size_t>(n + 1) * w + j] = -kInf;
  R[static_cast<std::size_t>(n + 1) * w + m + 1] = R[static_cast<std::size_t>(n) * w + m];

  E.assign(static_cast<std::size_t>(n + 2) * w, 0.0);
  E[static_cast<std::size_t>(n + 1) * w + m + 1] = 1.0;

  const auto cost_at = [&](int i, int j) -> double {
    if (i > n || j > m) return 0.0;
    return pair_cost(a + static_cast<std::ptrdiff_t>(i - 1) * d,
                     b + static_cast<std::ptrdiff_t>(j - 1) * d, d);
  };

  for (int i = n; i >= 1; --i) {
    for (int j = m; j >= 1; --j) {
      const std::size_t ij = static_cast<std::size_t>(i) * w + j;
      const double rij = R[ij];
      const double ea =
          std::exp((R[ij + w] - rij - cost_at(i + 1, j)) / gamma);  // down
      const double eb =
          std::exp((R[ij + 1] - rij - cost_at(i, j + 1)) / gamma);  // right
      const double ec =
          std::exp((R[ij + w + 1] - rij - cost_at(i + 1, j + 1)) / gamma);
      E[ij] = E[ij + w] * ea + E[ij + 1] * eb + E[ij + w + 1] * ec;
    }
  }
}

}  // namespace

double soft_dtw_value(const double* a, int n, const double* b, int m, int d,
                      double gamma) {
  if (gamma <= 0.0) throw std::invalid_argument("soft_dtw: gamma must be positive");
  if (n <= 0 || m <= 0)
    throw std::invalid_argument("soft_dtw: sequences must be non-empty");
  std::vector<double> R;
  soft_dtw_forward(a, n, b, m, d, gamma, R);
  return R[static_cast<std::size_t>(n) * (m + 2) + m];
}

Tensor soft_dtw(const Tensor& a, const Tensor& b, double gamma) {
  if (gamma <= 0.0) throw std::invalid_argument("soft_dtw: gamma must be positive");
  if (a.dim() != 2 || b.dim() != 2 || a.extent(1) != b.extent(1))
    throw std::invalid_argument("soft_dtw: inputs must be (n x d) and (m x d)");
  const int n = a.extent(0), m = b.extent(0), d = a.extent(1);

  std::vector<double> R;
  soft_dtw_forward(a.data(), n, b.data(), m, d, gamma, R);
  Tensor out = Tensor::scalar(R[static_cast<std::size_t>(n) * (m + 2) + m]);

  if (Tape* tape = Tape::active(); tape && (a.requires_grad() || b.requires_grad())) {
    auto an = a.node(), bn = b.node(), on = out.node();
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    out.set_requires_grad(true);
    tape->record([an, bn, on, ga, gb, n, m, d, gamma, R = std::move(R)]() mutable {
      if (on->grad.empty()) return;
      const double gout = on->grad[0];
      std::vector<double> E;
      soft_dtw_backward_E(an->data.data(), n, bn->data.data(), m, d, gamma, R, E);
      if (ga) an->ensure_grad();
      if (gb) bn->ensure_grad();
      const int w = m + 2;
      for (int i = 1; i <= n; ++i) {
        for (int j = 1; j <= m; ++j) {
          const double e = E[static_cast<std::size_t>(i) * w + j];
          if (e == 0.0) continue;
          const double* ar = an->data.data() + static_cast<std::ptrdiff_t>(i - 1) * d;
          const double* br = bn->data.data() + static_cast<std::ptrdiff_t>(j - 1) * d;
          for (int k = 0; k < d; ++k) {
            const double g = gout * e * 2.0 * (ar[k] - br[k]);
            if (ga) an->grad[static_cast<std::size_t>((i - 1) * d + k)] += g;
            if (gb) bn->grad[static_cast<std::size_t>((j - 1) * d + k)] -= g;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalized DTW metric
// ---------------------------------------------------------------------------

double normalized_dtw(std::span<const Vec6> a, std::span<const Vec6> b,
                      const NormStats& stats) {
  std::vector<Vec6> an(a.begin(), a.end());
  std::vector<Vec6> bn(b.begin(), b.end());
  for (Vec6& p : an) p = apply_norm(p, stats);
  for (Vec6& p : bn) p = apply_norm(p, stats);
  const DtwResult res = dtw(an, bn);
  return res.cost / (static_cast<double>(res.path.size()) * kPoseDim);
}

double normalized_dtw(const PoseSeq& a, const PoseSeq& b, const NormStats& stats) {
  return normalized_dtw(std::span<const Vec6>(a.poses), std::span<const Vec6>(b.poses),
                        stats);
}

}  // namespace stirfry
