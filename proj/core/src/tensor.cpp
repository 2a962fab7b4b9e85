#include "geofew/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

namespace geofew {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

void require_matrix(const Tensor& t, const char* op) {
  if (!t.is_matrix()) {
    throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " +
                     shape_string(t));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_string(a) + " and " +
                     shape_string(b) + " do not match");
  }
}

// C[m x n] += or = A[m x k] * B[k x n]; plain kernels shared by forward and
// backward so eval-mode and tape-mode forwards are bit-identical.
void matmul_kernel(const double* a, std::size_t m, std::size_t k,
                   const double* b, std::size_t n, double* c,
                   bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = b + p * n;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// C[m x n] += A^T[m x k]^T ... helper for grad of matmul's second operand:
// dB[k x n] += A^T[k x m] * dC[m x n].
void matmul_at_b_accum(const double* a, std::size_t m, std::size_t k,
                       const double* dc, std::size_t n, double* db) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* dcrow = dc + i * n;
      double* dbrow = db + p * n;
      for (std::size_t j = 0; j < n; ++j) dbrow[j] += aip * dcrow[j];
    }
  }
}

// dA[m x k] += dC[m x n] * B^T[n x k].
void matmul_a_bt_accum(const double* dc, std::size_t m, std::size_t n,
                       const double* b, std::size_t k, double* da) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double d = dc[i * n + j];
      if (d == 0.0) continue;
      const double* brow = b + j;  // column j of B, stride n
      double* darow = da + i * k;
      for (std::size_t p = 0; p < k; ++p) darow[p] += d * brow[p * n];
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(std::vector<std::size_t> shape, double fill, bool requires_grad)
    : shape_(std::move(shape)) {
  data.assign(shape_product(shape_), fill);
  set_requires_grad(requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  Tensor t(std::vector<std::size_t>{1}, value, requires_grad);
  return t;
}

Tensor Tensor::row(std::vector<double> values) {
  Tensor t;
  t.shape_ = {1, values.size()};
  t.data = std::move(values);
  return t;
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> values) {
  if (values.size() != rows * cols) {
    throw ShapeError("matrix: " + std::to_string(values.size()) +
                     " values cannot fill [" + std::to_string(rows) + "x" +
                     std::to_string(cols) + "]");
  }
  Tensor t;
  t.shape_ = {rows, cols};
  t.data = std::move(values);
  return t;
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 2) return shape_[0];
  if (shape_.size() == 1) return 1;
  throw ShapeError("rows(): tensor is not 1-D or 2-D: " + shape_string(*this));
}

std::size_t Tensor::cols() const {
  if (shape_.size() == 2) return shape_[1];
  if (shape_.size() == 1) return shape_[0];
  throw ShapeError("cols(): tensor is not 1-D or 2-D: " + shape_string(*this));
}

double& Tensor::at(std::size_t r, std::size_t c) {
  return data[r * cols() + c];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return data[r * cols() + c];
}

double Tensor::value() const {
  if (!is_scalar()) {
    throw ContractError("value(): tensor " + shape_string(*this) +
                        " is not a scalar");
  }
  return data[0];
}

void Tensor::set_requires_grad(bool enabled) {
  requires_grad_ = enabled;
  if (enabled) {
    grad.assign(data.size(), 0.0);
  } else {
    grad.clear();
  }
}

void Tensor::zero_grad() {
  std::fill(grad.begin(), grad.end(), 0.0);
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string shape_string(const Tensor& t) { return shape_to_string(t.shape()); }

// ---------------------------------------------------------------------------
// Tape

Tensor& Tape::fresh(std::vector<std::size_t> shape, bool requires_grad) {
  owned_.emplace_back(std::move(shape), 0.0, requires_grad);
  return owned_.back();
}

void Tape::record(std::function<void()> pull) {
  records_.push_back({std::move(pull)});
}

Tensor& Tape::leaf(std::vector<std::size_t> shape, std::vector<double> values,
                   bool requires_grad) {
  if (shape_product(shape) != values.size()) {
    throw ShapeError("leaf: " + std::to_string(values.size()) +
                     " values cannot fill " + shape_to_string(shape));
  }
  Tensor& t = fresh(std::move(shape), requires_grad);
  t.data = std::move(values);
  return t;
}

Tensor& Tape::constant(std::vector<std::size_t> shape, double fill) {
  Tensor& t = fresh(std::move(shape), false);
  std::fill(t.data.begin(), t.data.end(), fill);
  return t;
}

Tensor& Tape::matmul(Tensor& a, Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree: " + shape_string(a) +
                     " x " + shape_string(b));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor& out = fresh({m, n}, a.requires_grad() || b.requires_grad());
  matmul_kernel(a.data.data(), m, k, b.data.data(), n, out.data.data(), false);
  if (out.requires_grad()) {
    Tensor* pa = &a;
    Tensor* pb = &b;
    Tensor* po = &out;
    record([pa, pb, po, m, k, n] {
      if (pa->requires_grad()) {
        matmul_a_bt_accum(po->grad.data(), m, n, pb->data.data(), k,
                          pa->grad.data());
      }
      if (pb->requires_grad()) {
        matmul_at_b_accum(pa->data.data(), m, k, po->grad.data(), n,
                          pb->grad.data());
      }
    });
  }
  return out;
}

Tensor& Tape::transpose(Tensor& x) {
  require_matrix(x, "transpose");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor& out = fresh({n, m}, x.requires_grad());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.data[j * m + i] = x.data[i * n + j];
  if (out.requires_grad()) {
    Tensor* px = &x;
    Tensor* po = &out;
    record([px, po, m, n] {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          px->grad[i * n + j] += po->grad[j * m + i];
    });
  }
  return out;
}

Tensor& Tape::add(Tensor& a, Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor& out = fresh(a.shape(), a.requires_grad() || b.requires_grad());
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = a.data[i] + b.data[i];
  if (out.requires_grad()) {
    Tensor* pa = &a;
    Tensor* pb = &b;
    Tensor* po = &out;
    record([pa, pb, po] {
      if (pa->requires_grad())
        for (std::size_t i = 0; i < po->grad.size(); ++i)
          pa->grad[i] += po->grad[i];
      if (pb->requires_grad())
        for (std::size_t i = 0; i < po->grad.size(); ++i)
          pb->grad[i] += po->grad[i];
    });
  }
  return out;
}

Tensor& Tape::sub(Tensor& a, Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor& out = fresh(a.shape(), a.requires_grad() || b.requires_grad());
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = a.data[i] - b.data[i];
  if (out.requires_grad()) {
    Tensor* pa = &a;
    Tensor* pb = &b;
    Tensor* po = &out;
    record([pa, pb, po] {
      if (pa->requires_grad())
        for (std::size_t i = 0; i < po->grad.size(); ++i)
          pa->grad[i] += po->grad[i];
      if (pb->requires_grad())
        for (std::size_t i = 0; i < po->grad.size(); ++i)
          pb->grad[i] -= po->grad[i];
    });
  }
  return out;
}

Tensor& Tape::mul(Tensor& a, Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor& out = fresh(a.shape(), a.requires_grad() || b.requires_grad());
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = a.data[i] * b.data[i];
  if (out.requires_grad()) {
    Tensor* pa = &a;
    Tensor* pb = &b;
    Tensor* po = &out;
    record([pa, pb, po] {
      if (pa->requires_grad())
        for (std::size_t i = 0; i < po->grad.size(); ++i)
          pa->grad[i] += pb->data[i] * po->grad[i];
      if (pb->requires_grad())
        for (std::size_t i = 0; i < po->grad.size(); ++i)
          pb->grad[i] += pa->data[i] * po->grad[i];
    });
  }
  return out;
}

Tensor& Tape::scale(Tensor& x, double c) {
  Tensor& out = fresh(x.shape(), x.requires_grad());
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = c * x.data[i];
  if (out.requires_grad()) {
    Tensor* px = &x;
    Tensor* po = &out;
    record([px, po, c] {
      for (std::size_t i = 0; i < po->grad.size(); ++i)
        px->grad[i] += c * po->grad[i];
    });
  }
  return out;
}

Tensor& Tape::mul_scalar(Tensor& s, Tensor& x) {
  if (!s.is_scalar()) {
    throw ShapeError("mul_scalar: scale must be one element, got " +
                     shape_string(s));
  }
  Tensor& out = fresh(x.shape(), s.requires_grad() || x.requires_grad());
  const double sv = s.data[0];
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = sv * x.data[i];
  if (out.requires_grad()) {
    Tensor* ps = &s;
    Tensor* px = &x;
    Tensor* po = &out;
    record([ps, px, po] {
      const double sval = ps->data[0];
      if (px->requires_grad())
        for (std::size_t i = 0; i < po->grad.size(); ++i)
          px->grad[i] += sval * po->grad[i];
      if (ps->requires_grad()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < po->grad.size(); ++i)
          acc += px->data[i] * po->grad[i];
        ps->grad[0] += acc;
      }
    });
  }
  return out;
}

Tensor& Tape::add_bias(Tensor& x, Tensor& b) {
  require_matrix(x, "add_bias");
  if (b.numel() != x.cols()) {
    throw ShapeError("add_bias: bias " + shape_string(b) +
                     " does not match row width of " + shape_string(x));
  }
  const std::size_t m = x.rows(), n = x.cols();
  Tensor& out = fresh({m, n}, x.requires_grad() || b.requires_grad());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.data[i * n + j] = x.data[i * n + j] + b.data[j];
  if (out.requires_grad()) {
    Tensor* px = &x;
    Tensor* pb = &b;
    Tensor* po = &out;
    record([px, pb, po, m, n] {
      if (px->requires_grad())
        for (std::size_t i = 0; i < m * n; ++i) px->grad[i] += po->grad[i];
      if (pb->requires_grad())
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j)
            pb->grad[j] += po->grad[i * n + j];
    });
  }
  return out;
}

Tensor& Tape::relu(Tensor& x) {
  Tensor& out = fresh(x.shape(), x.requires_grad());
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
  if (out.requires_grad()) {
    Tensor* px = &x;
    Tensor* po = &out;
    record([px, po] {
      for (std::size_t i = 0; i < po->grad.size(); ++i)
        if (px->data[i] > 0.0) px->grad[i] += po->grad[i];
    });
  }
  return out;
}

Tensor& Tape::exp(Tensor& x) {
  Tensor& out = fresh(x.shape(), x.requires_grad());
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = std::exp(x.data[i]);
  if (out.requires_grad()) {
    Tensor* po = &out;
    Tensor* px = &x;
    record([px, po] {
      for (std::size_t i = 0; i < po->grad.size(); ++i)
        px->grad[i] += po->data[i] * po->grad[i];
    });
  }
  return out;
}

Tensor& Tape::log(Tensor& x) {
  Tensor& out = fresh(x.shape(), x.requires_grad());
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    if (x.data[i] <= 0.0) {
      throw DomainError("log: non-positive input " +
                        std::to_string(x.data[i]) + " at flat index " +
                        std::to_string(i) + " (clamp before taking log)");
    }
    out.data[i] = std::log(x.data[i]);
  }
  if (out.requires_grad()) {
    Tensor* px = &x;
    Tensor* po = &out;
    record([px, po] {
      for (std::size_t i = 0; i < po->grad.size(); ++i)
        px->grad[i] += po->grad[i] / px->data[i];
    });
  }
  return out;
}

Tensor& Tape::clamp(Tensor& x, double lo, double hi) {
  Tensor& out = fresh(x.shape(), x.requires_grad());
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = std::min(std::max(x.data[i], lo), hi);
  if (out.requires_grad()) {
    Tensor* px = &x;
    Tensor* po = &out;
    record([px, po, lo, hi] {
      // gradient is zero through clamped values
      for (std::size_t i = 0; i < po->grad.size(); ++i)
        if (px->data[i] > lo && px->data[i] < hi)
          px->grad[i] += po->grad[i];
    });
  }
  return out;
}

Tensor& Tape::l2_normalize_rows(Tensor& x) {
  require_matrix(x, "l2_normalize_rows");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor& out = fresh({m, n}, x.requires_grad());
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += x.data[i * n + j] * x.data[i * n + j];
    const double nrm = std::sqrt(ss);
    if (nrm <= kNormEpsilon) {
      throw DegenerateInputError("l2_normalize_rows: row " + std::to_string(i) +
                                 " has near-zero norm " + std::to_string(nrm));
    }
    norms[i] = nrm;
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] = x.data[i * n + j] / nrm;
  }
  if (out.requires_grad()) {
    Tensor* px = &x;
    Tensor* po = &out;
    record([px, po, m, n, norms = std::move(norms)] {
      // d/dx (x/|x|) pulls back g as (g - (g.y) y) / |x| per row
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j)
          dot += po->grad[i * n + j] * po->data[i * n + j];
        for (std::size_t j = 0; j < n; ++j)
          px->grad[i * n + j] +=
              (po->grad[i * n + j] - dot * po->data[i * n + j]) / norms[i];
      }
    });
  }
  return out;
}

Tensor& Tape::l2_normalize_cols(Tensor& x) {
  require_matrix(x, "l2_normalize_cols");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor& out = fresh({m, n}, x.requires_grad());
  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) {
    double ss = 0.0;
    for (std::size_t i = 0; i < m; ++i) ss += x.data[i * n + j] * x.data[i * n + j];
    const double nrm = std::sqrt(ss);
    if (nrm <= kNormEpsilon) {
      throw DegenerateInputError("l2_normalize_cols: column " +
                                 std::to_string(j) + " has near-zero norm " +
                                 std::to_string(nrm));
    }
    norms[j] = nrm;
    for (std::size_t i = 0; i < m; ++i) out.data[i * n + j] = x.data[i * n + j] / nrm;
  }
  if (out.requires_grad()) {
    Tensor* px = &x;
    Tensor* po = &out;
    record([px, po, m, n, norms = std::move(norms)] {
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0.0;
        for (std::size_t i = 0; i < m; ++i)
          dot += po->grad[i * n + j] * po->data[i * n + j];
        for (std::size_t i = 0; i < m; ++i)
          px->grad[i * n + j] +=
              (po->grad[i * n + j] - dot * po->data[i * n + j]) / norms[j];
      }
    });
  }
  return out;
}

Tensor& Tape::sum(Tensor& x) {
  Tensor& out = fresh({1}, x.requires_grad());
  out.data[0] = std::accumulate(x.data.begin(), x.data.end(), 0.0);
  if (out.requires_grad()) {
    Tensor* px = &x;
    Tensor* po = &out;
    record([px, po] {
      const double g = po->grad[0];
      for (std::size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += g;
    });
  }
  return out;
}

Tensor& Tape::row_sum(Tensor& x) {
  require_matrix(x, "row_sum");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor& out = fresh({m, 1}, x.requires_grad());
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += x.data[i * n + j];
    out.data[i] = acc;
  }
  if (out.requires_grad()) {
    Tensor* px = &x;
    Tensor* po = &out;
    record([px, po, m, n] {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          px->grad[i * n + j] += po->grad[i];
    });
  }
  return out;
}

Tensor& Tape::col_sum(Tensor& x) {
  require_matrix(x, "col_sum");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor& out = fresh({1, n}, x.requires_grad());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.data[j] += x.data[i * n + j];
  if (out.requires_grad()) {
    Tensor* px = &x;
    Tensor* po = &out;
    record([px, po, m, n] {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          px->grad[i * n + j] += po->grad[j];
    });
  }
  return out;
}

Tensor& Tape::log_sum_exp_rows(Tensor& x) {
  require_matrix(x, "log_sum_exp_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (n == 0) throw ShapeError("log_sum_exp_rows: zero columns");
  Tensor& out = fresh({m, 1}, x.requires_grad());
  // Max-shifted for stability; the shift cancels exactly in the gradient, so
  // the softmax cached here is the true backward coefficient.
  std::vector<double> softmax(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = x.data[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x.data[i * n + j]);
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      softmax[i * n + j] = std::exp(x.data[i * n + j] - mx);
      acc += softmax[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) softmax[i * n + j] /= acc;
    out.data[i] = mx + std::log(acc);
  }
  if (out.requires_grad()) {
    Tensor* px = &x;
    Tensor* po = &out;
    record([px, po, m, n, softmax = std::move(softmax)] {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          px->grad[i * n + j] += po->grad[i] * softmax[i * n + j];
    });
  }
  return out;
}

Tensor& Tape::gather_rows(Tensor& x, std::vector<int> labels) {
  require_matrix(x, "gather_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (labels.size() != m) {
    throw ContractError("gather_rows: " + std::to_string(labels.size()) +
                        " labels for " + std::to_string(m) + " rows");
  }
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n) {
      throw ContractError("gather_rows: label " + std::to_string(labels[i]) +
                          " at row " + std::to_string(i) +
                          " outside [0, " + std::to_string(n) + ")");
    }
  }
  Tensor& out = fresh({m, 1}, x.requires_grad());
  for (std::size_t i = 0; i < m; ++i)
    out.data[i] = x.data[i * n + static_cast<std::size_t>(labels[i])];
  if (out.requires_grad()) {
    Tensor* px = &x;
    Tensor* po = &out;
    record([px, po, m, n, labels = std::move(labels)] {
      for (std::size_t i = 0; i < m; ++i)
        px->grad[i * n + static_cast<std::size_t>(labels[i])] += po->grad[i];
    });
  }
  return out;
}

Tensor& Tape::concat_cols(Tensor& a, Tensor& b) {
  require_matrix(a, "concat_cols");
  require_matrix(b, "concat_cols");
  if (a.rows() != b.rows()) {
    throw ShapeError("concat_cols: row counts differ: " + shape_string(a) +
                     " vs " + shape_string(b));
  }
  const std::size_t m = a.rows(), p = a.cols(), q = b.cols();
  Tensor& out = fresh({m, p + q}, a.requires_grad() || b.requires_grad());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < p; ++j)
      out.data[i * (p + q) + j] = a.data[i * p + j];
    for (std::size_t j = 0; j < q; ++j)
      out.data[i * (p + q) + p + j] = b.data[i * q + j];
  }
  if (out.requires_grad()) {
    Tensor* pa = &a;
    Tensor* pb = &b;
    Tensor* po = &out;
    record([pa, pb, po, m, p, q] {
      if (pa->requires_grad())
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < p; ++j)
            pa->grad[i * p + j] += po->grad[i * (p + q) + j];
      if (pb->requires_grad())
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < q; ++j)
            pb->grad[i * q + j] += po->grad[i * (p + q) + p + j];
    });
  }
  return out;
}

Tensor& Tape::concat_rows(const std::vector<Tensor*>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  const std::size_t n = parts.front()->cols();
  std::size_t total = 0;
  bool needs_grad = false;
  for (Tensor* p : parts) {
    require_matrix(*p, "concat_rows");
    if (p->cols() != n) {
      throw ShapeError("concat_rows: column counts differ: " +
                       shape_string(*parts.front()) + " vs " + shape_string(*p));
    }
    total += p->rows();
    needs_grad = needs_grad || p->requires_grad();
  }
  Tensor& out = fresh({total, n}, needs_grad);
  std::size_t row = 0;
  std::vector<std::size_t> offsets;
  offsets.reserve(parts.size());
  for (Tensor* p : parts) {
    offsets.push_back(row);
    std::copy(p->data.begin(), p->data.end(), out.data.begin() + row * n);
    row += p->rows();
  }
  if (out.requires_grad()) {
    Tensor* po = &out;
    record([parts, offsets, po, n] {
      for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        Tensor* p = parts[pi];
        if (!p->requires_grad()) continue;
        const std::size_t base = offsets[pi] * n;
        for (std::size_t i = 0; i < p->grad.size(); ++i)
          p->grad[i] += po->grad[base + i];
      }
    });
  }
  return out;
}

Tensor& Tape::slice_rows(Tensor& x, std::size_t first, std::size_t count) {
  require_matrix(x, "slice_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (first + count > m) {
    throw ShapeError("slice_rows: rows [" + std::to_string(first) + ", " +
                     std::to_string(first + count) + ") outside " +
                     shape_string(x));
  }
  Tensor& out = fresh({count, n}, x.requires_grad());
  std::copy(x.data.begin() + first * n, x.data.begin() + (first + count) * n,
            out.data.begin());
  if (out.requires_grad()) {
    Tensor* px = &x;
    Tensor* po = &out;
    record([px, po, first, count, n] {
      for (std::size_t i = 0; i < count * n; ++i)
        px->grad[first * n + i] += po->grad[i];
    });
  }
  return out;
}

Tensor& Tape::take_rows(Tensor& x, std::vector<std::size_t> rows) {
  require_matrix(x, "take_rows");
  const std::size_t m = x.rows(), n = x.cols();
  for (std::size_t r : rows) {
    if (r >= m) {
      throw ContractError("take_rows: row " + std::to_string(r) +
                          " outside " + shape_string(x));
    }
  }
  Tensor& out = fresh({rows.size(), n}, x.requires_grad());
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(x.data.begin() + rows[i] * n, x.data.begin() + (rows[i] + 1) * n,
              out.data.begin() + i * n);
  if (out.requires_grad()) {
    Tensor* px = &x;
    Tensor* po = &out;
    record([px, po, n, rows = std::move(rows)] {
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < n; ++j)
          px->grad[rows[i] * n + j] += po->grad[i * n + j];
    });
  }
  return out;
}

Tensor& Tape::hadamard_mask(Tensor& x, std::vector<double> mask) {
  if (mask.size() != x.numel()) {
    throw ShapeError("hadamard_mask: mask size " + std::to_string(mask.size()) +
                     " does not match " + shape_string(x));
  }
  Tensor& out = fresh(x.shape(), x.requires_grad());
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = x.data[i] * mask[i];
  if (out.requires_grad()) {
    Tensor* px = &x;
    Tensor* po = &out;
    record([px, po, mask = std::move(mask)] {
      for (std::size_t i = 0; i < po->grad.size(); ++i)
        px->grad[i] += mask[i] * po->grad[i];
    });
  }
  return out;
}

Tensor& Tape::dropout(Tensor& x, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) {
    throw ConfigError("dropout: rate " + std::to_string(p) +
                      " outside [0, 1)");
  }
  std::vector<double> mask(x.numel());
  const double keep_scale = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const double u = (rng() >> 11) * 0x1.0p-53;
    mask[i] = (u < p) ? 0.0 : keep_scale;
  }
  return hadamard_mask(x, std::move(mask));
}

void Tape::backward(Tensor& loss) {
  if (!loss.is_scalar()) {
    throw ContractError("backward: loss must be a scalar, got " +
                        shape_string(loss));
  }
  if (!loss.requires_grad()) return;  // constant graph: nothing reachable
  loss.grad.assign(1, 1.0);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->pull();
}

}  // namespace geofew
