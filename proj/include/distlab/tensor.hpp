#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace distlab {

template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatMap = Eigen::Map<MatrixRM<Scalar>>;
template <typename Scalar>
using ConstMatMap = Eigen::Map<const MatrixRM<Scalar>>;

using Shape = std::vector<std::int64_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

template <typename Scalar>
struct TensorData {
  Shape shape;
  ArrayX<Scalar> values;
  ArrayX<Scalar> grad;  // empty until first accumulation
  bool requires_grad = false;
};

/// Dense row-major tensor handle. Copies share storage; values are treated as
/// immutable once an op has consumed them, grads accumulate in place.
template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.d_ = std::make_shared<TensorData<Scalar>>();
    t.d_->shape = std::move(shape);
    t.d_->values = ArrayX<Scalar>::Zero(shape_numel(t.d_->shape));
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, Scalar v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    t.d_->values.setConstant(v);
    return t;
  }

  static Tensor from_values(Shape shape, std::vector<Scalar> vals, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<std::int64_t>(vals.size()))
      throw std::invalid_argument("tensor: " + shape_str(shape) + " does not hold " +
                                  std::to_string(vals.size()) + " values");
    Tensor t;
    t.d_ = std::make_shared<TensorData<Scalar>>();
    t.d_->shape = std::move(shape);
    t.d_->values = Eigen::Map<const ArrayX<Scalar>>(vals.data(), vals.size());
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(Scalar v, bool requires_grad = false) {
    return full({1}, v, requires_grad);
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  std::int64_t numel() const { return d_->values.size(); }
  std::int64_t rank() const { return static_cast<std::int64_t>(d_->shape.size()); }
  std::int64_t rows() const { return d_->shape.at(0); }
  std::int64_t cols() const { return d_->shape.at(1); }
  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool rg) { d_->requires_grad = rg; }

  ArrayX<Scalar>& values() const { return d_->values; }
  Scalar value() const {
    if (numel() != 1) throw std::invalid_argument("value(): tensor is not scalar, shape " + shape_str(shape()));
    return d_->values[0];
  }

  bool has_grad() const { return d_->grad.size() != 0; }
  ArrayX<Scalar>& grad() const {
    if (!has_grad()) throw std::runtime_error("grad(): no gradient populated");
    return d_->grad;
  }
  ArrayX<Scalar>& ensure_grad() const {
    if (!has_grad()) d_->grad = ArrayX<Scalar>::Zero(d_->values.size());
    return d_->grad;
  }
  void clear_grad() const { d_->grad.resize(0); }

  /// Rank-2 view of the values (rank-1 tensors view as a single row).
  ConstMatMap<Scalar> mat() const {
    auto [r, c] = mat_dims();
    return ConstMatMap<Scalar>(d_->values.data(), r, c);
  }
  MatMap<Scalar> mat_mut() const {
    auto [r, c] = mat_dims();
    return MatMap<Scalar>(d_->values.data(), r, c);
  }
  MatMap<Scalar> grad_mat() const {
    ensure_grad();
    auto [r, c] = mat_dims();
    return MatMap<Scalar>(d_->grad.data(), r, c);
  }

  /// View with an arbitrary trailing dimension: (numel/last, last).
  ConstMatMap<Scalar> as_rows(std::int64_t last) const {
    return ConstMatMap<Scalar>(d_->values.data(), numel() / last, last);
  }

  TensorData<Scalar>* data_ptr() const { return d_.get(); }

 private:
  std::pair<std::int64_t, std::int64_t> mat_dims() const {
    if (rank() == 2) return {d_->shape[0], d_->shape[1]};
    if (rank() == 1) return {1, d_->shape[0]};
    throw std::invalid_argument("mat(): rank-" + std::to_string(rank()) + " tensor " + shape_str(shape()));
  }

  std::shared_ptr<TensorData<Scalar>> d_;
};

/// Wengert list for one backward pass. Constructing a Tape makes it the active
/// tape of the current thread; ops executed while it is active append their
/// adjoint steps. A tape belongs to one thread; independent tapes may run
/// concurrently on separate threads.
template <typename Scalar>
class Tape {
 public:
  Tape() {
    if (active_) throw std::runtime_error("tape: another tape is already active on this thread");
    active_ = this;
  }
  ~Tape() { active_ = nullptr; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }
  std::size_t size() const { return steps_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and replays all recorded adjoints in reverse
  /// execution order. Populates grad on every requires_grad tensor reachable
  /// from the loss.
  void backward(const Tensor<Scalar>& loss) {
    if (consumed_) throw std::runtime_error("backward: tape already consumed; reset() it first");
    if (loss.numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
    consumed_ = true;
    loss.ensure_grad()[0] += Scalar(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

  void reset() {
    steps_.clear();
    consumed_ = false;
  }

 private:
  static thread_local Tape* active_;
  std::vector<std::function<void()>> steps_;
  bool consumed_ = false;
};

template <typename Scalar>
thread_local Tape<Scalar>* Tape<Scalar>::active_ = nullptr;

template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  if (!Tape<Scalar>::active()) throw std::runtime_error("backward: no active tape on this thread");
  Tape<Scalar>::active()->backward(loss);
}

namespace detail {

template <typename Scalar>
bool tracing(bool any_requires_grad) {
  return any_requires_grad && Tape<Scalar>::active() != nullptr;
}

template <typename Scalar, typename Fn>
void record(Fn&& fn) {
  Tape<Scalar>::active()->record(std::forward<Fn>(fn));
}

template <typename Scalar>
void check_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / scalar ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "add");
  Tensor<S> out = Tensor<S>::zeros(a.shape(), a.requires_grad() || b.requires_grad());
  out.values() = a.values() + b.values();
  if (detail::tracing<S>(out.requires_grad())) {
    detail::record<S>([a, b, out] {
      if (!out.has_grad()) return;
      if (a.requires_grad()) a.ensure_grad() += out.grad();
      if (b.requires_grad()) b.ensure_grad() += out.grad();
    });
  }
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor<S> out = Tensor<S>::zeros(a.shape(), a.requires_grad() || b.requires_grad());
  out.values() = a.values() - b.values();
  if (detail::tracing<S>(out.requires_grad())) {
    detail::record<S>([a, b, out] {
      if (!out.has_grad()) return;
      if (a.requires_grad()) a.ensure_grad() += out.grad();
      if (b.requires_grad()) b.ensure_grad() -= out.grad();
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor<S> out = Tensor<S>::zeros(a.shape(), a.requires_grad() || b.requires_grad());
  out.values() = a.values() * b.values();
  if (detail::tracing<S>(out.requires_grad())) {
    detail::record<S>([a, b, out] {
      if (!out.has_grad()) return;
      if (a.requires_grad()) a.ensure_grad() += out.grad() * b.values();
      if (b.requires_grad()) b.ensure_grad() += out.grad() * a.values();
    });
  }
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  Tensor<S> out = Tensor<S>::zeros(a.shape(), a.requires_grad());
  out.values() = a.values() * c;
  if (detail::tracing<S>(out.requires_grad())) {
    detail::record<S>([a, out, c] {
      if (out.has_grad()) a.ensure_grad() += out.grad() * c;
    });
  }
  return out;
}

/// Adds a length-cols bias vector to every row of a rank-2 tensor.
template <typename S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.shape()[0] != x.cols())
    throw std::invalid_argument("add_bias: " + shape_str(x.shape()) + " vs " + shape_str(bias.shape()));
  Tensor<S> out = Tensor<S>::zeros(x.shape(), x.requires_grad() || bias.requires_grad());
  out.mat_mut() = x.mat().rowwise() + Eigen::Map<const Eigen::RowVectorX<S>>(bias.values().data(), bias.numel());
  if (detail::tracing<S>(out.requires_grad())) {
    detail::record<S>([x, bias, out] {
      if (!out.has_grad()) return;
      if (x.requires_grad()) x.ensure_grad() += out.grad();
      if (bias.requires_grad()) {
        bias.ensure_grad();
        bias.grad_mat() += out.grad_mat().colwise().sum();
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape(), x.requires_grad());
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  out.values() = x.values().unaryExpr([inv_sqrt2](S v) {
    return S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2));
  });
  if (detail::tracing<S>(out.requires_grad())) {
    detail::record<S>([x, out, inv_sqrt2] {
      if (!out.has_grad()) return;
      const S inv_sqrt2pi = S(1) / std::sqrt(S(2) * S(M_PI));
      auto& xv = x.values();
      ArrayX<S> dgelu = xv.unaryExpr([inv_sqrt2, inv_sqrt2pi](S v) {
        const S cdf = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
        const S pdf = std::exp(-v * v * S(0.5)) * inv_sqrt2pi;
        return cdf + v * pdf;
      });
      x.ensure_grad() += out.grad() * dgelu;
    });
  }
  return out;
}

template <typename S>
Tensor<S> log(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape(), x.requires_grad());
  out.values() = x.values().log();
  if (detail::tracing<S>(out.requires_grad())) {
    detail::record<S>([x, out] {
      if (out.has_grad()) x.ensure_grad() += out.grad() / x.values();
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(x.values().template cast<double>().sum()), x.requires_grad());
  if (detail::tracing<S>(out.requires_grad())) {
    detail::record<S>([x, out] {
      if (out.has_grad()) x.ensure_grad() += out.grad()[0];
    });
  }
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  const double n = static_cast<double>(x.numel());
  Tensor<S> out =
      Tensor<S>::scalar(static_cast<S>(x.values().template cast<double>().sum() / n), x.requires_grad());
  if (detail::tracing<S>(out.requires_grad())) {
    detail::record<S>([x, out, n] {
      if (out.has_grad()) x.ensure_grad() += out.grad()[0] / static_cast<S>(n);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  Tensor<S> out = Tensor<S>::zeros({a.rows(), b.cols()}, a.requires_grad() || b.requires_grad());
  out.mat_mut().noalias() = a.mat() * b.mat();
  if (detail::tracing<S>(out.requires_grad())) {
    detail::record<S>([a, b, out] {
      if (!out.has_grad()) return;
      auto g = ConstMatMap<S>(out.grad().data(), out.rows(), out.cols());
      if (a.requires_grad()) {
        a.ensure_grad();
        a.grad_mat().noalias() += g * b.mat().transpose();
      }
      if (b.requires_grad()) {
        b.ensure_grad();
        b.grad_mat().noalias() += a.mat().transpose() * g;
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& x) {
  if (x.rank() != 2) throw std::invalid_argument("transpose: rank-2 required, got " + shape_str(x.shape()));
  Tensor<S> out = Tensor<S>::zeros({x.cols(), x.rows()}, x.requires_grad());
  out.mat_mut() = x.mat().transpose();
  if (detail::tracing<S>(out.requires_grad())) {
    detail::record<S>([x, out] {
      if (!out.has_grad()) return;
      x.ensure_grad();
      x.grad_mat() += ConstMatMap<S>(out.grad().data(), out.rows(), out.cols()).transpose();
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Slicing / gathering
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> row_block(const Tensor<S>& x, std::int64_t r0, std::int64_t nrows) {
  if (x.rank() != 2 || r0 < 0 || nrows <= 0 || r0 + nrows > x.rows())
    throw std::invalid_argument("row_block: bad slice [" + std::to_string(r0) + "," +
                                std::to_string(r0 + nrows) + ") of " + shape_str(x.shape()));
  Tensor<S> out = Tensor<S>::zeros({nrows, x.cols()}, x.requires_grad());
  out.mat_mut() = x.mat().middleRows(r0, nrows);
  if (detail::tracing<S>(out.requires_grad())) {
    detail::record<S>([x, out, r0, nrows] {
      if (!out.has_grad()) return;
      x.ensure_grad();
      x.grad_mat().middleRows(r0, nrows) += ConstMatMap<S>(out.grad().data(), nrows, out.cols());
    });
  }
  return out;
}

template <typename S>
Tensor<S> col_block(const Tensor<S>& x, std::int64_t c0, std::int64_t ncols) {
  if (x.rank() != 2 || c0 < 0 || ncols <= 0 || c0 + ncols > x.cols())
    throw std::invalid_argument("col_block: bad slice [" + std::to_string(c0) + "," +
                                std::to_string(c0 + ncols) + ") of " + shape_str(x.shape()));
  Tensor<S> out = Tensor<S>::zeros({x.rows(), ncols}, x.requires_grad());
  out.mat_mut() = x.mat().middleCols(c0, ncols);
  if (detail::tracing<S>(out.requires_grad())) {
    detail::record<S>([x, out, c0, ncols] {
      if (!out.has_grad()) return;
      x.ensure_grad();
      x.grad_mat().middleCols(c0, ncols) += ConstMatMap<S>(out.grad().data(), out.rows(), ncols);
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  std::int64_t rows = 0;
  const std::int64_t cols = parts[0].cols();
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
    rg = rg || p.requires_grad();
  }
  Tensor<S> out = Tensor<S>::zeros({rows, cols}, rg);
  std::int64_t r = 0;
  for (const auto& p : parts) {
    out.mat_mut().middleRows(r, p.rows()) = p.mat();
    r += p.rows();
  }
  if (detail::tracing<S>(rg)) {
    detail::record<S>([parts, out] {
      if (!out.has_grad()) return;
      auto g = ConstMatMap<S>(out.grad().data(), out.rows(), out.cols());
      std::int64_t r2 = 0;
      for (const auto& p : parts) {
        if (p.requires_grad()) {
          p.ensure_grad();
          p.grad_mat() += g.middleRows(r2, p.rows());
        }
        r2 += p.rows();
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  std::int64_t cols = 0;
  const std::int64_t rows = parts[0].rows();
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
    rg = rg || p.requires_grad();
  }
  Tensor<S> out = Tensor<S>::zeros({rows, cols}, rg);
  std::int64_t c = 0;
  for (const auto& p : parts) {
    out.mat_mut().middleCols(c, p.cols()) = p.mat();
    c += p.cols();
  }
  if (detail::tracing<S>(rg)) {
    detail::record<S>([parts, out] {
      if (!out.has_grad()) return;
      auto g = ConstMatMap<S>(out.grad().data(), out.rows(), out.cols());
      std::int64_t c2 = 0;
      for (const auto& p : parts) {
        if (p.requires_grad()) {
          p.ensure_grad();
          p.grad_mat() += g.middleCols(c2, p.cols());
        }
        c2 += p.cols();
      }
    });
  }
  return out;
}

/// Gathers sparse rows of a rank-2 tensor. Adjoint scatter-adds row gradients.
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, std::vector<std::int64_t> rows) {
  if (x.rank() != 2) throw std::invalid_argument("gather_rows: rank-2 required");
  for (auto r : rows)
    if (r < 0 || r >= x.rows())
      throw std::out_of_range("gather_rows: row " + std::to_string(r) + " outside " + shape_str(x.shape()));
  Tensor<S> out = Tensor<S>::zeros({static_cast<std::int64_t>(rows.size()), x.cols()}, x.requires_grad());
  for (std::size_t i = 0; i < rows.size(); ++i) out.mat_mut().row(i) = x.mat().row(rows[i]);
  if (detail::tracing<S>(out.requires_grad())) {
    detail::record<S>([x, out, rows = std::move(rows)] {
      if (!out.has_grad()) return;
      x.ensure_grad();
      auto g = ConstMatMap<S>(out.grad().data(), out.rows(), out.cols());
      auto xg = x.grad_mat();
      for (std::size_t i = 0; i < rows.size(); ++i) xg.row(rows[i]) += g.row(i);
    });
  }
  return out;
}

/// Token embedding lookup: validates ids against the table height.
template <typename S>
Tensor<S> embedding_lookup(const Tensor<S>& table, std::span<const std::int32_t> ids) {
  if (table.rank() != 2) throw std::invalid_argument("embedding_lookup: table must be rank-2");
  std::vector<std::int64_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows())
      throw std::out_of_range("embedding_lookup: token id " + std::to_string(ids[i]) +
                              " out of range for vocab " + std::to_string(table.rows()));
    rows[i] = ids[i];
  }
  return gather_rows(table, std::move(rows));
}

/// Gathers individual coefficients (r, c) of a rank-2 tensor into a tensor of
/// the given shape (row-major fill). Adjoint scatter-adds.
template <typename S>
Tensor<S> gather_coeffs(const Tensor<S>& x, std::vector<std::pair<std::int64_t, std::int64_t>> idx,
                        Shape out_shape) {
  if (x.rank() != 2) throw std::invalid_argument("gather_coeffs: rank-2 required");
  if (shape_numel(out_shape) != static_cast<std::int64_t>(idx.size()))
    throw std::invalid_argument("gather_coeffs: shape " + shape_str(out_shape) + " does not hold " +
                                std::to_string(idx.size()) + " entries");
  for (auto [r, c] : idx)
    if (r < 0 || r >= x.rows() || c < 0 || c >= x.cols())
      throw std::out_of_range("gather_coeffs: index (" + std::to_string(r) + "," + std::to_string(c) +
                              ") outside " + shape_str(x.shape()));
  Tensor<S> out = Tensor<S>::zeros(std::move(out_shape), x.requires_grad());
  auto xm = x.mat();
  for (std::size_t i = 0; i < idx.size(); ++i) out.values()[i] = xm(idx[i].first, idx[i].second);
  if (detail::tracing<S>(out.requires_grad())) {
    detail::record<S>([x, out, idx = std::move(idx)] {
      if (!out.has_grad()) return;
      x.ensure_grad();
      auto xg = x.grad_mat();
      for (std::size_t i = 0; i < idx.size(); ++i) xg(idx[i].first, idx[i].second) += out.grad()[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization / softmax family (all act on the last dimension, per row)
// ---------------------------------------------------------------------------

/// Temperature softmax over the last dimension, stabilized by max-subtraction.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, S temperature) {
  if (!(temperature > S(0))) throw std::invalid_argument("softmax: temperature must be positive");
  const std::int64_t d = x.shape().back();
  Tensor<S> out = Tensor<S>::zeros(x.shape(), x.requires_grad());
  auto xm = x.as_rows(d);
  auto om = MatMap<S>(out.values().data(), xm.rows(), d);
  for (std::int64_t r = 0; r < xm.rows(); ++r) {
    Eigen::ArrayX<S> z = xm.row(r).transpose().array() / temperature;
    z -= z.maxCoeff();
    Eigen::ArrayX<S> e = z.exp();
    om.row(r) = (e / e.sum()).transpose();
  }
  if (detail::tracing<S>(out.requires_grad())) {
    detail::record<S>([x, out, d, temperature] {
      if (!out.has_grad()) return;
      x.ensure_grad();
      auto y = out.as_rows(d);
      auto g = ConstMatMap<S>(out.grad().data(), y.rows(), d);
      auto xg = MatMap<S>(x.grad().data(), y.rows(), d);
      for (std::int64_t r = 0; r < y.rows(); ++r) {
        const S dot = y.row(r).dot(g.row(r));
        xg.row(r).array() += (y.row(r).array() * (g.row(r).array() - dot)) / temperature;
      }
    });
  }
  return out;
}

/// Numerically stable log-softmax over the last dimension (unit temperature).
template <typename S>
Tensor<S> log_softmax(const Tensor<S>& x) {
  const std::int64_t d = x.shape().back();
  Tensor<S> out = Tensor<S>::zeros(x.shape(), x.requires_grad());
  auto xm = x.as_rows(d);
  auto om = MatMap<S>(out.values().data(), xm.rows(), d);
  for (std::int64_t r = 0; r < xm.rows(); ++r) {
    Eigen::ArrayX<S> z = xm.row(r).transpose().array();
    const S m = z.maxCoeff();
    const S lse = m + std::log((z - m).exp().sum());
    om.row(r) = (z - lse).transpose();
  }
  if (detail::tracing<S>(out.requires_grad())) {
    detail::record<S>([x, out, d] {
      if (!out.has_grad()) return;
      x.ensure_grad();
      auto y = out.as_rows(d);
      auto g = ConstMatMap<S>(out.grad().data(), y.rows(), d);
      auto xg = MatMap<S>(x.grad().data(), y.rows(), d);
      for (std::int64_t r = 0; r < y.rows(); ++r) {
        const S gsum = g.row(r).sum();
        xg.row(r).array() += g.row(r).array() - y.row(r).array().exp() * gsum;
      }
    });
  }
  return out;
}

/// Softmax over causally masked attention scores: row i attends to columns
/// j <= i. Masking is additive -1e9 pre-softmax, which underflows masked
/// probabilities to exact zero.
template <typename S>
Tensor<S> causal_masked_softmax(const Tensor<S>& scores) {
  if (scores.rank() != 2 || scores.rows() != scores.cols())
    throw std::invalid_argument("causal_masked_softmax: square score matrix required, got " +
                                shape_str(scores.shape()));
  const std::int64_t n = scores.rows();
  constexpr S kMask = S(-1e9);
  Tensor<S> out = Tensor<S>::zeros(scores.shape(), scores.requires_grad());
  auto sm = scores.mat();
  auto om = out.mat_mut();
  for (std::int64_t r = 0; r < n; ++r) {
    Eigen::ArrayX<S> z(n);
    for (std::int64_t c = 0; c < n; ++c) z[c] = c <= r ? sm(r, c) : kMask;
    z -= z.maxCoeff();
    Eigen::ArrayX<S> e = z.exp();
    om.row(r) = (e / e.sum()).transpose();
  }
  if (detail::tracing<S>(out.requires_grad())) {
    detail::record<S>([scores, out, n] {
      if (!out.has_grad()) return;
      scores.ensure_grad();
      auto y = out.mat();
      auto g = ConstMatMap<S>(out.grad().data(), n, n);
      auto xg = scores.grad_mat();
      for (std::int64_t r = 0; r < n; ++r) {
        const S dot = y.row(r).dot(g.row(r));
        xg.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
      }
    });
  }
  return out;
}

/// RMS normalization over the last dimension with a learned gain.
template <typename S>
Tensor<S> rms_norm(const Tensor<S>& x, const Tensor<S>& gain, S eps) {
  const std::int64_t d = x.shape().back();
  if (gain.numel() != d)
    throw std::invalid_argument("rms_norm: gain " + shape_str(gain.shape()) + " does not match last dim " +
                                std::to_string(d));
  Tensor<S> out = Tensor<S>::zeros(x.shape(), x.requires_grad() || gain.requires_grad());
  auto xm = x.as_rows(d);
  const std::int64_t rows = xm.rows();
  auto om = MatMap<S>(out.values().data(), rows, d);
  ArrayX<S> inv_rms(rows);
  auto gv = Eigen::Map<const Eigen::RowVectorX<S>>(gain.values().data(), d);
  for (std::int64_t r = 0; r < rows; ++r) {
    inv_rms[r] = S(1) / std::sqrt(xm.row(r).squaredNorm() / S(d) + eps);
    om.row(r) = xm.row(r).cwiseProduct(gv) * inv_rms[r];
  }
  if (detail::tracing<S>(out.requires_grad())) {
    detail::record<S>([x, gain, out, d, rows, inv_rms = std::move(inv_rms)] {
      if (!out.has_grad()) return;
      auto xm2 = x.as_rows(d);
      auto g = ConstMatMap<S>(out.grad().data(), rows, d);
      auto gv2 = Eigen::Map<const Eigen::RowVectorX<S>>(gain.values().data(), d);
      if (gain.requires_grad()) {
        gain.ensure_grad();
        auto gg = Eigen::Map<Eigen::RowVectorX<S>>(gain.grad().data(), d);
        for (std::int64_t r = 0; r < rows; ++r)
          gg.array() += g.row(r).array() * xm2.row(r).array() * inv_rms[r];
      }
      if (x.requires_grad()) {
        x.ensure_grad();
        auto xg = MatMap<S>(x.grad().data(), rows, d);
        for (std::int64_t r = 0; r < rows; ++r) {
          Eigen::RowVectorX<S> u = xm2.row(r) * inv_rms[r];
          Eigen::RowVectorX<S> du = g.row(r).cwiseProduct(gv2);
          const S proj = du.dot(u) / S(d);
          xg.row(r) += (du - u * proj) * inv_rms[r];
        }
      }
    });
  }
  return out;
}

/// Scales every row to unit Euclidean norm. Rows with norm below 1e-12 are
/// rejected as degenerate.
template <typename S>
Tensor<S> row_unit_normalize(const Tensor<S>& x) {
  if (x.rank() != 2) throw std::invalid_argument("row_unit_normalize: rank-2 required");
  const std::int64_t rows = x.rows(), d = x.cols();
  Tensor<S> out = Tensor<S>::zeros(x.shape(), x.requires_grad());
  ArrayX<S> inv_norm(rows);
  auto xm = x.mat();
  auto om = out.mat_mut();
  for (std::int64_t r = 0; r < rows; ++r) {
    const S n = xm.row(r).norm();
    if (n < S(1e-12))
      throw std::invalid_argument("row_unit_normalize: degenerate row " + std::to_string(r) +
                                  " with norm below 1e-12");
    inv_norm[r] = S(1) / n;
    om.row(r) = xm.row(r) * inv_norm[r];
  }
  if (detail::tracing<S>(out.requires_grad())) {
    detail::record<S>([x, out, rows, d, inv_norm = std::move(inv_norm)] {
      if (!out.has_grad()) return;
      x.ensure_grad();
      auto y = out.mat();
      auto g = ConstMatMap<S>(out.grad().data(), rows, d);
      auto xg = x.grad_mat();
      for (std::int64_t r = 0; r < rows; ++r) {
        const S dot = y.row(r).dot(g.row(r));
        xg.row(r) += (g.row(r) - y.row(r) * dot) * inv_norm[r];
      }
    });
  }
  return out;
}

}  // namespace distlab
