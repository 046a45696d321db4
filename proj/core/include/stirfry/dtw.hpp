#pragma once

#include <span>
#include <utility>
#include <vector>

#include "stirfry/tensor.hpp"
#include "stirfry/trajectory.hpp"

namespace stirfry {

struct DtwResult {
  double cost = 0.0;
  /// Monotone alignment from (0,0) to (n-1,m-1); steps are (1,0), (0,1)
  /// or (1,1). Ties during backtracking prefer diagonal, then a-advance,
  /// then b-advance.
  std::vector<std::pair<int, int>> path;
};

/// Classic dynamic time warping with squared-Euclidean local cost.
DtwResult dtw(std::span<const Vec6> a, std::span<const Vec6> b);

/// Soft-DTW value (gamma-smoothed min over alignments) without gradients.
/// a and b are (n x d) and (m x d) row-major.
double soft_dtw_value(const double* a, int n, const double* b, int m, int d,
                      double gamma);

/// Differentiable soft-DTW between (n x d) and (m x d) tensors, registered
/// as a single taped primitive with an analytic backward pass for both
/// inputs. gamma must be positive.
Tensor soft_dtw(const Tensor& a, const Tensor& b, double gamma);

/// z-normalizes both sequences with `stats`, runs exact DTW, and divides the
/// cost by (alignment path length x pose dimension). 0 for identical inputs
/// and comparable across sequence lengths.
double normalized_dtw(std::span<const Vec6> a, std::span<const Vec6> b,
                      const NormStats& stats);
double normalized_dtw(const PoseSeq& a, const PoseSeq& b, const NormStats& stats);

}  // namespace stirfry
