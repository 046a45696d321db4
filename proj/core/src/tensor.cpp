#include "stirfry/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace stirfry {

namespace {

using EMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<EMat>;
using CMapMat = Eigen::Map<const EMat>;

thread_local std::vector<Tape*> g_tape_stack;

Tape* active_tape() {
  return g_tape_stack.empty() ? nullptr : g_tape_stack.back();
}

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

CMapMat as_mat(const Tensor& t) {
  check(t.dim() == 2, "expected a 2-D tensor, got shape " + shape_str(t.shape()));
  return CMapMat(t.data(), t.extent(0), t.extent(1));
}

}  // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int e : shape) n *= e;
  return n;
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

namespace detail {
void TensorNode::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (int e : shape) check(e > 0, "tensor extents must be positive");
  check(numel(shape) == static_cast<std::int64_t>(data.size()),
        "shape/data size mismatch");
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> d(static_cast<std::size_t>(numel(shape)), 0.0);
  return make_tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> d(static_cast<std::size_t>(numel(shape)), value);
  return make_tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return make_tensor({1}, {value}, requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  return make_tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng,
                       bool requires_grad) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> d(static_cast<std::size_t>(numel(shape)));
  for (double& x : d) x = dist(rng);
  return make_tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::randn(Shape shape, double mean, double std, Rng& rng,
                     bool requires_grad) {
  std::normal_distribution<double> dist(mean, std);
  std::vector<double> d(static_cast<std::size_t>(numel(shape)));
  for (double& x : d) x = dist(rng);
  return make_tensor(std::move(shape), std::move(d), requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
int Tensor::dim() const { return static_cast<int>(node_->shape.size()); }

int Tensor::extent(int axis) const {
  if (axis < 0) axis += dim();
  check(axis >= 0 && axis < dim(), "axis out of range");
  return node_->shape[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::size() const {
  return static_cast<std::int64_t>(node_->data.size());
}

double* Tensor::data() { return node_->data.data(); }
const double* Tensor::data() const { return node_->data.data(); }
double& Tensor::at(std::int64_t i) { return node_->data[static_cast<std::size_t>(i)]; }
double Tensor::at(std::int64_t i) const { return node_->data[static_cast<std::size_t>(i)]; }

double Tensor::item() const {
  check(size() == 1, "item() requires a single-element tensor");
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  node_->requires_grad = value;
  return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty())
    throw std::logic_error("tensor has no gradient; run backward first");
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::clone() const {
  return make_tensor(node_->shape, node_->data, false);
}

void Tensor::copy_from(const Tensor& src) {
  check(same_shape(shape(), src.shape()), "copy_from: shape mismatch");
  node_->data = src.node_->data;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Tape() { g_tape_stack.push_back(this); }

Tape::~Tape() {
  auto it = std::find(g_tape_stack.rbegin(), g_tape_stack.rend(), this);
  if (it != g_tape_stack.rend())
    g_tape_stack.erase(std::next(it).base());
}

Tape* Tape::active() { return active_tape(); }

void Tape::record(std::function<void()> backward_step) {
  records_.push_back(std::move(backward_step));
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw std::logic_error("tape already consumed by backward()");
  if (records_.empty()) throw std::logic_error("backward() on an empty tape");
  if (!loss.defined() || loss.size() != 1)
    throw std::invalid_argument("backward() expects a scalar loss");
  auto node = loss.node();
  node->ensure_grad();
  node->grad[0] = 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
  records_.clear();
  consumed_ = true;
}

NoGradGuard::NoGradGuard() { g_tape_stack.push_back(nullptr); }
NoGradGuard::~NoGradGuard() { g_tape_stack.pop_back(); }

// ---------------------------------------------------------------------------
// op plumbing
// ---------------------------------------------------------------------------

namespace {

bool grad_wanted(std::initializer_list<const Tensor*> inputs) {
  if (!active_tape()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// Registers `fn` and marks the output as requiring gradients. `fn` must bail
// out when the output never received a gradient.
void record_op(Tensor& out, std::function<void()> fn) {
  out.set_requires_grad(true);
  active_tape()->record(std::move(fn));
}

void accumulate(const std::shared_ptr<detail::TensorNode>& node,
                const double* src, std::size_t n) {
  node->ensure_grad();
  for (std::size_t i = 0; i < n; ++i) node->grad[i] += src[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// primitives
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  auto am = as_mat(a);
  auto bm = as_mat(b);
  check(am.cols() == bm.rows(),
        "matmul: inner extents disagree: " + shape_str(a.shape()) + " x " +
            shape_str(b.shape()));
  Tensor out = Tensor::zeros({static_cast<int>(am.rows()), static_cast<int>(bm.cols())});
  MapMat(out.data(), am.rows(), bm.cols()).noalias() = am * bm;
  if (grad_wanted({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    bool ga = a.requires_grad(), gb = b.requires_grad();
    record_op(out, [an, bn, on, ga, gb] {
      if (on->grad.empty()) return;
      const Eigen::Index n = an->shape[0], k = an->shape[1], m = bn->shape[1];
      CMapMat go(on->grad.data(), n, m);
      CMapMat av(an->data.data(), n, k);
      CMapMat bv(bn->data.data(), k, m);
      if (ga) {
        an->ensure_grad();
        MapMat(an->grad.data(), n, k).noalias() += go * bv.transpose();
      }
      if (gb) {
        bn->ensure_grad();
        MapMat(bn->grad.data(), k, m).noalias() += av.transpose() * go;
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  auto am = as_mat(a);
  Tensor out = Tensor::zeros({a.extent(1), a.extent(0)});
  MapMat(out.data(), am.cols(), am.rows()) = am.transpose();
  if (grad_wanted({&a})) {
    auto an = a.node(), on = out.node();
    record_op(out, [an, on] {
      if (on->grad.empty()) return;
      const Eigen::Index n = an->shape[0], m = an->shape[1];
      an->ensure_grad();
      MapMat(an->grad.data(), n, m) += CMapMat(on->grad.data(), m, n).transpose();
    });
  }
  return out;
}

namespace {

// add() accepts b with the same shape as a, or a row vector broadcast across
// the rows of a 2-D a.
bool is_row_broadcast(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2) return false;
  if (b.dim() == 1 && b.extent(0) == a.extent(1)) return true;
  if (b.dim() == 2 && b.extent(0) == 1 && b.extent(1) == a.extent(1)) return true;
  return false;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const bool rowb = !same_shape(a.shape(), b.shape()) && is_row_broadcast(a, b);
  check(rowb || same_shape(a.shape(), b.shape()),
        "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a.clone();
  if (rowb) {
    const int rows = a.extent(0), cols = a.extent(1);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) out.at(static_cast<std::int64_t>(r) * cols + c) += b.at(c);
  } else {
    for (std::int64_t i = 0; i < out.size(); ++i) out.at(i) += b.at(i);
  }
  if (grad_wanted({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    bool ga = a.requires_grad(), gb = b.requires_grad();
    record_op(out, [an, bn, on, ga, gb, rowb] {
      if (on->grad.empty()) return;
      if (ga) accumulate(an, on->grad.data(), on->grad.size());
      if (gb) {
        bn->ensure_grad();
        if (rowb) {
          const std::size_t cols = bn->data.size();
          const std::size_t rows = on->grad.size() / cols;
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) bn->grad[c] += on->grad[r * cols + c];
        } else {
          for (std::size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += on->grad[i];
        }
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check(same_shape(a.shape(), b.shape()),
        "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a.clone();
  for (std::int64_t i = 0; i < out.size(); ++i) out.at(i) -= b.at(i);
  if (grad_wanted({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    bool ga = a.requires_grad(), gb = b.requires_grad();
    record_op(out, [an, bn, on, ga, gb] {
      if (on->grad.empty()) return;
      if (ga) accumulate(an, on->grad.data(), on->grad.size());
      if (gb) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] -= on->grad[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check(same_shape(a.shape(), b.shape()),
        "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a.clone();
  for (std::int64_t i = 0; i < out.size(); ++i) out.at(i) *= b.at(i);
  if (grad_wanted({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    bool ga = a.requires_grad(), gb = b.requires_grad();
    record_op(out, [an, bn, on, ga, gb] {
      if (on->grad.empty()) return;
      const std::size_t n = on->grad.size();
      if (ga) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * bn->data[i];
      }
      if (gb) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i] * an->data[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = a.clone();
  for (std::int64_t i = 0; i < out.size(); ++i) out.at(i) *= c;
  if (grad_wanted({&a})) {
    auto an = a.node(), on = out.node();
    record_op(out, [an, on, c] {
      if (on->grad.empty()) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += c * on->grad[i];
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, double c) {
  Tensor out = a.clone();
  for (std::int64_t i = 0; i < out.size(); ++i) out.at(i) += c;
  if (grad_wanted({&a})) {
    auto an = a.node(), on = out.node();
    record_op(out, [an, on] {
      if (on->grad.empty()) return;
      accumulate(an, on->grad.data(), on->grad.size());
    });
  }
  return out;
}

Tensor relu(const Tensor& a) {
  Tensor out = a.clone();
  for (std::int64_t i = 0; i < out.size(); ++i)
    if (out.at(i) < 0.0) out.at(i) = 0.0;
  if (grad_wanted({&a})) {
    auto an = a.node(), on = out.node();
    record_op(out, [an, on] {
      if (on->grad.empty()) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < an->grad.size(); ++i)
        if (an->data[i] > 0.0) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

namespace {

struct AxisSplit {
  std::int64_t outer, n, inner;
};

AxisSplit split_axis(const Shape& shape, int axis) {
  const int d = static_cast<int>(shape.size());
  if (axis < 0) axis += d;
  check(axis >= 0 && axis < d, "axis out of range");
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < d; ++i) s.inner *= shape[static_cast<std::size_t>(i)];
  return s;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape());
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      const std::int64_t base = o * s.n * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t k = 0; k < s.n; ++k)
        mx = std::max(mx, x.at(base + k * s.inner));
      double denom = 0.0;
      for (std::int64_t k = 0; k < s.n; ++k) {
        const double e = std::exp(x.at(base + k * s.inner) - mx);
        out.at(base + k * s.inner) = e;
        denom += e;
      }
      for (std::int64_t k = 0; k < s.n; ++k) out.at(base + k * s.inner) /= denom;
    }
  }
  if (grad_wanted({&x})) {
    auto xn = x.node(), on = out.node();
    record_op(out, [xn, on, s] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t i = 0; i < s.inner; ++i) {
          const std::int64_t base = o * s.n * s.inner + i;
          double dot = 0.0;
          for (std::int64_t k = 0; k < s.n; ++k) {
            const std::size_t idx = static_cast<std::size_t>(base + k * s.inner);
            dot += on->grad[idx] * on->data[idx];
          }
          for (std::int64_t k = 0; k < s.n; ++k) {
            const std::size_t idx = static_cast<std::size_t>(base + k * s.inner);
            xn->grad[idx] += on->data[idx] * (on->grad[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  constexpr double kEps = 1e-5;
  const int n = x.extent(-1);
  check(n >= 2, "layer_norm: last axis extent must be >= 2");
  check(gain.size() == n && bias.size() == n,
        "layer_norm: gain/bias must match the last axis extent");
  const std::int64_t rows = x.size() / n;
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  std::vector<double> xhat(static_cast<std::size_t>(x.size()));
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::int64_t base = r * n;
    double mu = 0.0;
    for (int k = 0; k < n; ++k) mu += x.at(base + k);
    mu /= n;
    double var = 0.0;
    for (int k = 0; k < n; ++k) {
      const double d = x.at(base + k) - mu;
      var += d * d;
    }
    var /= n;
    const double is = 1.0 / std::sqrt(var + kEps);
    inv_std[static_cast<std::size_t>(r)] = is;
    for (int k = 0; k < n; ++k) {
      const double xh = (x.at(base + k) - mu) * is;
      xhat[static_cast<std::size_t>(base + k)] = xh;
      out.at(base + k) = xh * gain.at(k) + bias.at(k);
    }
  }
  if (grad_wanted({&x, &gain, &bias})) {
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
    bool gx = x.requires_grad(), gg = gain.requires_grad(), gb = bias.requires_grad();
    record_op(out, [xn, gn, bn, on, gx, gg, gb, rows, n,
                    inv_std = std::move(inv_std), xhat = std::move(xhat)] {
      if (on->grad.empty()) return;
      if (gx) xn->ensure_grad();
      if (gg) gn->ensure_grad();
      if (gb) bn->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const std::int64_t base = r * n;
        double mean_dy = 0.0, mean_dy_xhat = 0.0;
        for (int k = 0; k < n; ++k) {
          const std::size_t idx = static_cast<std::size_t>(base + k);
          const double dy = on->grad[idx] * gn->data[static_cast<std::size_t>(k)];
          mean_dy += dy;
          mean_dy_xhat += dy * xhat[idx];
        }
        mean_dy /= n;
        mean_dy_xhat /= n;
        for (int k = 0; k < n; ++k) {
          const std::size_t idx = static_cast<std::size_t>(base + k);
          if (gx) {
            const double dy = on->grad[idx] * gn->data[static_cast<std::size_t>(k)];
            xn->grad[idx] += inv_std[static_cast<std::size_t>(r)] *
                             (dy - mean_dy - xhat[idx] * mean_dy_xhat);
          }
          if (gg) gn->grad[static_cast<std::size_t>(k)] += on->grad[idx] * xhat[idx];
          if (gb) bn->grad[static_cast<std::size_t>(k)] += on->grad[idx];
        }
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  check(rate < 1.0, "dropout: rate must be < 1");
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(static_cast<std::size_t>(x.size()));
  for (double& m : mask) m = dist(rng) >= rate ? keep_scale : 0.0;
  Tensor out = x.clone();
  for (std::int64_t i = 0; i < out.size(); ++i)
    out.at(i) *= mask[static_cast<std::size_t>(i)];
  if (grad_wanted({&x})) {
    auto xn = x.node(), on = out.node();
    record_op(out, [xn, on, mask = std::move(mask)] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < xn->grad.size(); ++i)
        xn->grad[i] += on->grad[i] * mask[i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  check(numel(shape) == x.size(), "reshape: element count mismatch");
  Tensor out = make_tensor(std::move(shape),
                           std::vector<double>(x.data(), x.data() + x.size()), false);
  if (grad_wanted({&x})) {
    auto xn = x.node(), on = out.node();
    record_op(out, [xn, on] {
      if (on->grad.empty()) return;
      accumulate(xn, on->grad.data(), on->grad.size());
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_cols: no inputs");
  const int rows = parts.front().extent(0);
  int cols = 0;
  for (const Tensor& p : parts) {
    check(p.dim() == 2 && p.extent(0) == rows, "concat_cols: row counts differ");
    cols += p.extent(1);
  }
  Tensor out = Tensor::zeros({rows, cols});
  int off = 0;
  for (const Tensor& p : parts) {
    const int pc = p.extent(1);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < pc; ++c)
        out.at(static_cast<std::int64_t>(r) * cols + off + c) =
            p.at(static_cast<std::int64_t>(r) * pc + c);
    off += pc;
  }
  bool any = false;
  for (const Tensor& p : parts) any = any || p.requires_grad();
  if (active_tape() && any) {
    std::vector<std::shared_ptr<detail::TensorNode>> pn;
    std::vector<bool> pg;
    for (const Tensor& p : parts) {
      pn.push_back(p.node());
      pg.push_back(p.requires_grad());
    }
    auto on = out.node();
    record_op(out, [pn = std::move(pn), pg = std::move(pg), on, rows, cols] {
      if (on->grad.empty()) return;
      int off = 0;
      for (std::size_t i = 0; i < pn.size(); ++i) {
        const int pc = pn[i]->shape[1];
        if (pg[i]) {
          pn[i]->ensure_grad();
          for (int r = 0; r < rows; ++r)
            for (int c = 0; c < pc; ++c)
              pn[i]->grad[static_cast<std::size_t>(r) * pc + c] +=
                  on->grad[static_cast<std::size_t>(r) * cols + off + c];
        }
        off += pc;
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int start, int count) {
  check(x.dim() == 2, "slice_cols: 2-D tensor required");
  const int rows = x.extent(0), cols = x.extent(1);
  check(start >= 0 && count > 0 && start + count <= cols, "slice_cols: range out of bounds");
  Tensor out = Tensor::zeros({rows, count});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < count; ++c)
      out.at(static_cast<std::int64_t>(r) * count + c) =
          x.at(static_cast<std::int64_t>(r) * cols + start + c);
  if (grad_wanted({&x})) {
    auto xn = x.node(), on = out.node();
    record_op(out, [xn, on, rows, cols, start, count] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < count; ++c)
          xn->grad[static_cast<std::size_t>(r) * cols + start + c] +=
              on->grad[static_cast<std::size_t>(r) * count + c];
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (std::int64_t i = 0; i < x.size(); ++i) s += x.at(i);
  Tensor out = Tensor::scalar(s);
  if (grad_wanted({&x})) {
    auto xn = x.node(), on = out.node();
    record_op(out, [xn, on] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (double& g : xn->grad) g += on->grad[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.size());
  double s = 0.0;
  for (std::int64_t i = 0; i < x.size(); ++i) s += x.at(i);
  Tensor out = Tensor::scalar(s * inv);
  if (grad_wanted({&x})) {
    auto xn = x.node(), on = out.node();
    record_op(out, [xn, on, inv] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (double& g : xn->grad) g += on->grad[0] * inv;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

AdamState AdamState::init(const std::vector<Tensor>& params, double lr) {
  AdamState st;
  st.lr = lr;
  st.m.reserve(params.size());
  st.v.reserve(params.size());
  for (const Tensor& p : params) {
    st.m.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
    st.v.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
  }
  return st;
}

void adam_step(std::vector<Tensor>& params, AdamState& state) {
  if (params.size() != state.m.size())
    throw std::invalid_argument("adam_step: state/parameter count mismatch");
  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (static_cast<std::size_t>(p.size()) != state.m[i].size())
      throw std::invalid_argument("adam_step: parameter shape changed under the state");
    if (!p.has_grad()) continue;
    const std::vector<double>& g = p.grad();
    std::vector<double>& m = state.m[i];
    std::vector<double>& v = state.v[i];
    for (std::size_t k = 0; k < g.size(); ++k) {
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p.at(static_cast<std::int64_t>(k)) -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

void zero_grad(std::vector<Tensor>& params) {
  for (Tensor& p : params) p.zero_grad();
}

double grad_norm(const std::vector<Tensor>& params) {
  double sq = 0.0;
  for (const Tensor& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

void clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
  if (max_norm <= 0.0) return;
  const double norm = grad_norm(params);
  if (norm <= max_norm) return;
  const double s = max_norm / norm;
  for (Tensor& p : params) {
    if (!p.has_grad()) continue;
    auto node = p.node();
    for (double& g : node->grad) g *= s;
  }
}

}  // namespace stirfry
