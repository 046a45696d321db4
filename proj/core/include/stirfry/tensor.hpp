#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <vector>

namespace stirfry {

/// All randomness in the library flows through explicitly seeded engines.
using Rng = std::mt19937_64;

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
bool same_shape(const Shape& a, const Shape& b);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;

  void ensure_grad();
};
}  // namespace detail

/// Dense row-major float64 tensor. Copying a Tensor copies the handle, not
/// the storage; ops allocate fresh outputs. Gradients accumulate into the
/// node and survive until zero_grad(), so summing over a batch of tapes
/// works without extra bookkeeping.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  /// Uniform on [lo, hi).
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng,
                        bool requires_grad = false);
  static Tensor randn(Shape shape, double mean, double std, Rng& rng,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int dim() const;
  int extent(int axis) const;
  std::int64_t size() const;

  double* data();
  const double* data() const;
  double& at(std::int64_t i);
  double at(std::int64_t i) const;
  /// Value of a rank-0/size-1 tensor.
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);

  bool has_grad() const;
  /// Accumulated gradient; throws if backward never reached this tensor.
  const std::vector<double>& grad() const;
  void zero_grad();

  /// Deep copy of values (detached, requires_grad=false).
  Tensor clone() const;
  /// Copies values from src into this tensor's storage (shapes must match).
  void copy_from(const Tensor& src);

  std::shared_ptr<detail::TensorNode> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node)
      : node_(std::move(node)) {}
  std::shared_ptr<detail::TensorNode> node_;

  friend class Tape;
  friend Tensor make_tensor(Shape, std::vector<double>, bool);
};

Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad);

/// Define-by-run gradient tape. Constructing a Tape makes it the active
/// recorder for the current thread; ops executed while it is active append
/// their backward steps. backward() replays the record in reverse exactly
/// once and then the tape is consumed.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::function<void()> backward_step);
  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }

  /// loss must be a scalar produced while this tape was active.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> records_;
  bool consumed_ = false;
};

/// Temporarily disables recording (inference / oracle evaluations).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// ---------------------------------------------------------------------------
// Differentiable primitives. Every op checks shapes and registers its
// backward rule on the active tape when an input requires gradients.
// ---------------------------------------------------------------------------

/// (n,k) x (k,m) -> (n,m)
Tensor matmul(const Tensor& a, const Tensor& b);
/// 2-D transpose.
Tensor transpose(const Tensor& a);
/// Elementwise; b may also be a row vector of shape (cols) or (1, cols)
/// broadcast over the rows of a 2-D a.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// Elementwise product, same shapes.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor relu(const Tensor& a);
/// Numerically stabilized softmax along `axis` (negative counts from back).
Tensor softmax(const Tensor& x, int axis = -1);
/// Normalizes the last axis to zero mean / unit variance (eps 1e-5), then
/// applies elementwise gain and bias (both of shape (last_extent)).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
/// Inverted dropout: keeps with probability 1-rate and scales by 1/(1-rate).
/// rate <= 0 is the identity and draws nothing from rng.
Tensor dropout(const Tensor& x, double rate, Rng& rng);
Tensor reshape(const Tensor& x, Shape shape);
/// Concatenate 2-D tensors along columns (equal row counts).
Tensor concat_cols(const std::vector<Tensor>& parts);
/// Columns [start, start+count) of a 2-D tensor.
Tensor slice_cols(const Tensor& x, int start, int count);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Moment accumulators for one fixed list of parameters. The learning rate
/// lives here so a schedule can update it between steps.
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step_count = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static AdamState init(const std::vector<Tensor>& params, double lr = 1e-3);
};

/// One bias-corrected Adam update, reading each parameter's accumulated
/// gradient. Parameters whose gradient was never touched stay put.
void adam_step(std::vector<Tensor>& params, AdamState& state);

void zero_grad(std::vector<Tensor>& params);
/// Global L2 norm over all parameter gradients.
double grad_norm(const std::vector<Tensor>& params);
/// Scales all gradients so the global norm is at most max_norm (no-op if
/// max_norm <= 0 or the norm is already below it).
void clip_grad_norm(std::vector<Tensor>& params, double max_norm);

}  // namespace stirfry
