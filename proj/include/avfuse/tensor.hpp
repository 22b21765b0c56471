#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <new>
#include <utility>
#include <vector>

#include "avfuse/common.hpp"

namespace avfuse {

// Storage alignment wide enough for any SIMD packet on the host. Keeping every
// buffer on the same boundary makes vectorized kernels take the same code path
// for the same shapes, so results never depend on where the heap placed a
// tensor — a precondition for the bitwise-reproducibility guarantees.
inline constexpr std::size_t kTensorAlign = 64;

template <typename T>
struct AlignedAllocator {
  using value_type = T;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    if (n == 0) return nullptr;
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kTensorAlign)));
  }
  void deallocate(T* p, std::size_t n) {
    ::operator delete(p, n * sizeof(T), std::align_val_t(kTensorAlign));
  }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
};

template <typename Scalar>
using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatMap = Eigen::Map<MatrixRM<Scalar>>;
template <typename Scalar>
using ConstMatMap = Eigen::Map<const MatrixRM<Scalar>>;
template <typename Scalar>
using ArrMap = Eigen::Map<ArrayX<Scalar>>;
template <typename Scalar>
using ConstArrMap = Eigen::Map<const ArrayX<Scalar>>;

// Dense row-major value tensor. Immutable by convention once handed to the
// gradient tape; plain value semantics (deep copy) otherwise.
template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(static_cast<std::size_t>(shape_product(shape_)), Scalar(0));
  }

  Tensor(Shape shape, const std::vector<Scalar>& values) : shape_(std::move(shape)) {
    check_shape(shape_);
    if (shape_product(shape_) != static_cast<Index>(values.size())) {
      throw ContractError("tensor: shape " + shape_str(shape_) + " does not match " +
                          std::to_string(values.size()) + " values");
    }
    data_.assign(values.begin(), values.end());
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor constant(Shape shape, Scalar v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor ones(Shape shape) { return constant(std::move(shape), Scalar(1)); }

  static Tensor scalar(Scalar v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return static_cast<Index>(data_.size()); }
  Index dim(Index i) const { return shape_[static_cast<std::size_t>(i)]; }
  bool empty() const { return data_.empty(); }

  Index rows() const {
    require_rank(2, "rows()");
    return shape_[0];
  }
  Index cols() const {
    require_rank(2, "cols()");
    return shape_[1];
  }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  Scalar operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  Scalar& operator()(Index i, Index j) { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
  Scalar operator()(Index i, Index j) const { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }

  Scalar& operator()(Index i, Index j, Index k) {
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  Scalar operator()(Index i, Index j, Index k) const {
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }

  // Rank-2 Eigen view.
  MatMap<Scalar> matrix() {
    require_rank(2, "matrix()");
    return MatMap<Scalar>(data(), shape_[0], shape_[1]);
  }
  ConstMatMap<Scalar> matrix() const {
    require_rank(2, "matrix()");
    return ConstMatMap<Scalar>(data(), shape_[0], shape_[1]);
  }

  // Eigen view reshaped to rows x cols; the product must equal size().
  MatMap<Scalar> matrix_as(Index rows, Index cols) {
    require_size(rows * cols, "matrix_as");
    return MatMap<Scalar>(data(), rows, cols);
  }
  ConstMatMap<Scalar> matrix_as(Index rows, Index cols) const {
    require_size(rows * cols, "matrix_as");
    return ConstMatMap<Scalar>(data(), rows, cols);
  }

  ArrMap<Scalar> flat() { return ArrMap<Scalar>(data(), size()); }
  ConstArrMap<Scalar> flat() const { return ConstArrMap<Scalar>(data(), size()); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    return data_.empty() || flat().isFinite().all();
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out;
    out = Tensor<Other>(shape_);
    for (Index i = 0; i < size(); ++i) out[i] = static_cast<Other>(data_[static_cast<std::size_t>(i)]);
    return out;
  }

  // Marks the tensor as a gradient target when registered on a tape.
  bool requires_grad = false;

 private:
  static void check_shape(const Shape& s) {
    for (Index d : s) {
      if (d <= 0) throw ContractError("tensor: non-positive dimension in shape " + shape_str(s));
    }
  }
  void require_rank(Index r, const char* what) const {
    if (rank() != r) {
      throw ContractError(std::string(what) + " requires rank-" + std::to_string(r) +
                          " tensor, got shape " + shape_str(shape_));
    }
  }
  void require_size(Index n, const char* what) const {
    if (size() != n) {
      throw ContractError(std::string(what) + ": cannot view shape " + shape_str(shape_) + " as " +
                          std::to_string(n) + " elements");
    }
  }

  Shape shape_;
  std::vector<Scalar, AlignedAllocator<Scalar>> data_;
};

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ContractError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  }
}

// ---- value kernels ---------------------------------------------------------
// Shared by the gradient-tape ops and the trace-based forward pass so both
// paths compute bitwise-identical values.

template <typename Scalar>
Tensor<Scalar> matmul_value(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ContractError("matmul: operands must be rank-2, got " + shape_str(a.shape()) + " and " +
                        shape_str(b.shape()));
  }
  if (a.cols() != b.rows()) {
    throw ContractError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  }
  Tensor<Scalar> c({a.rows(), b.cols()});
  c.matrix().noalias() = a.matrix() * b.matrix();
  return c;
}

template <typename Scalar>
Tensor<Scalar> transpose_value(const Tensor<Scalar>& a) {
  Tensor<Scalar> c({a.cols(), a.rows()});
  c.matrix() = a.matrix().transpose();
  return c;
}

// Row-wise softmax, stabilized by subtracting each row's maximum.
template <typename Scalar>
Tensor<Scalar> softmax_rows_value(const Tensor<Scalar>& a) {
  Tensor<Scalar> out(a.shape());
  auto in = a.matrix();
  auto o = out.matrix();
  for (Index r = 0; r < in.rows(); ++r) {
    const Scalar m = in.row(r).maxCoeff();
    o.row(r) = (in.row(r).array() - m).exp();
    o.row(r) /= o.row(r).sum();
  }
  return out;
}

// y = (x - mean) / sqrt(var + eps) * gain + bias, row-wise.
// Optionally exposes the normalized rows and the inverse stddev for reuse by
// the backward pass.
template <typename Scalar>
Tensor<Scalar> layer_norm_rows_value(const Tensor<Scalar>& x, const Tensor<Scalar>& gain,
                                     const Tensor<Scalar>& bias, Scalar eps,
                                     Tensor<Scalar>* xhat_out = nullptr,
                                     Tensor<Scalar>* istd_out = nullptr) {
  if (x.rank() != 2 || gain.size() != x.cols() || bias.size() != x.cols()) {
    throw ContractError("layer_norm: incompatible shapes " + shape_str(x.shape()) + ", " +
                        shape_str(gain.shape()) + ", " + shape_str(bias.shape()));
  }
  const Index n = x.rows(), d = x.cols();
  Tensor<Scalar> out({n, d});
  Tensor<Scalar> xhat({n, d});
  Tensor<Scalar> istd({n});
  auto xm = x.matrix();
  auto g = gain.flat();
  auto b = bias.flat();
  for (Index r = 0; r < n; ++r) {
    const Scalar mu = xm.row(r).mean();
    const Scalar var = (xm.row(r).array() - mu).square().sum() / Scalar(d);
    const Scalar is = Scalar(1) / std::sqrt(var + eps);
    istd[r] = is;
    xhat.matrix().row(r) = (xm.row(r).array() - mu) * is;
    out.matrix().row(r) = xhat.matrix().row(r).array() * g.transpose() + b.transpose();
  }
  if (xhat_out) *xhat_out = std::move(xhat);
  if (istd_out) *istd_out = std::move(istd);
  return out;
}

template <typename Scalar>
Scalar gelu_scalar(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x * Scalar(0.7071067811865475244)));
}

template <typename Scalar>
Scalar gelu_grad_scalar(Scalar x) {
  const Scalar phi = std::exp(Scalar(-0.5) * x * x) * Scalar(0.3989422804014326779);
  return Scalar(0.5) * (Scalar(1) + std::erf(x * Scalar(0.7071067811865475244))) + x * phi;
}

template <typename Scalar>
Tensor<Scalar> gelu_value(const Tensor<Scalar>& a) {
  Tensor<Scalar> out(a.shape());
  for (Index i = 0; i < a.size(); ++i) out[i] = gelu_scalar(a[i]);
  return out;
}

template <typename Scalar>
Tensor<Scalar> add_value(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a, b, "add");
  Tensor<Scalar> c(a.shape());
  c.flat() = a.flat() + b.flat();
  return c;
}

// rows(a) x cols(a) plus a length-cols(a) bias broadcast over rows.
template <typename Scalar>
Tensor<Scalar> add_bias_rows_value(const Tensor<Scalar>& a, const Tensor<Scalar>& bias) {
  if (a.rank() != 2 || bias.size() != a.cols()) {
    throw ContractError("add_bias_rows: shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(bias.shape()));
  }
  Tensor<Scalar> c(a.shape());
  c.matrix() = a.matrix().array().rowwise() + ConstArrMap<Scalar>(bias.data(), bias.size()).transpose();
  return c;
}

template <typename Scalar>
Tensor<Scalar> mean_rows_value(const Tensor<Scalar>& a) {
  if (a.rank() != 2) throw ContractError("mean_rows: rank-2 required, got " + shape_str(a.shape()));
  Tensor<Scalar> c({Index(1), a.cols()});
  c.matrix() = a.matrix().colwise().mean();
  return c;
}

// Stabilized -log softmax(logits)[label]; logits may be rank-1 or 1 x K.
template <typename Scalar>
Scalar cross_entropy_value(const Tensor<Scalar>& logits, Index label,
                           Tensor<Scalar>* probs_out = nullptr) {
  const Index k = logits.size();
  if (logits.rank() > 2 || (logits.rank() == 2 && logits.rows() != 1)) {
    throw ContractError("cross_entropy: logits must be a single row, got " + shape_str(logits.shape()));
  }
  if (label < 0 || label >= k) {
    throw ContractError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                        std::to_string(k) + " classes");
  }
  auto x = logits.flat();
  const Scalar m = x.maxCoeff();
  ArrayX<Scalar> e = (x - m).exp();
  const Scalar z = e.sum();
  if (probs_out) {
    *probs_out = Tensor<Scalar>(logits.shape());
    probs_out->flat() = e / z;
  }
  return std::log(z) + m - x[label];
}

// Per-image min-max normalization to [0, 1]; a constant input maps to zeros.
template <typename Scalar>
Tensor<Scalar> minmax_normalize(const Tensor<Scalar>& a) {
  Tensor<Scalar> out(a.shape());
  const Scalar lo = a.flat().minCoeff();
  const Scalar hi = a.flat().maxCoeff();
  if (hi > lo) out.flat() = (a.flat() - lo) / (hi - lo);
  return out;
}

}  // namespace avfuse
