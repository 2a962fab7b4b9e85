#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "geofew/errors.hpp"

namespace geofew {

/// Degeneracy threshold shared by every normalizer in the library.
inline constexpr double kNormEpsilon = 1e-12;

/// Dense row-major array of 64-bit floats with an optional gradient buffer.
///
/// Tensors are plain values: copying copies the buffers. Gradients are only
/// allocated while requires_grad is set, and always mirror the data shape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0,
                  bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor row(std::vector<double> values);  // shape {1, n}
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t numel() const { return data.size(); }
  bool is_scalar() const { return data.size() == 1; }
  bool is_matrix() const { return shape_.size() == 2; }

  std::size_t rows() const;
  std::size_t cols() const;

  double& at(std::size_t r, std::size_t c);
  double at(std::size_t r, std::size_t c) const;

  /// Value of a one-element tensor.
  double value() const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool enabled);
  void zero_grad();

  bool all_finite() const;

  std::vector<double> data;
  std::vector<double> grad;  // same size as data iff requires_grad()

 private:
  std::vector<std::size_t> shape_;
  bool requires_grad_ = false;
};

std::string shape_string(const Tensor& t);

/// Records forward operations and replays their backward rules in reverse.
///
/// The tape owns every intermediate tensor it creates; leaf tensors may live
/// anywhere (network parameters are leaves owned by the model). A tape and
/// its tensors form a single-owner unit: one thread drives a tape at a time,
/// while read-only leaves (frozen weights) may be shared across tapes.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Tape-owned leaf with explicit contents.
  Tensor& leaf(std::vector<std::size_t> shape, std::vector<double> values,
               bool requires_grad = false);
  /// Tape-owned constant filled with one value.
  Tensor& constant(std::vector<std::size_t> shape, double fill);

  // --- recorded operations -------------------------------------------------
  Tensor& matmul(Tensor& a, Tensor& b);
  Tensor& transpose(Tensor& x);

  Tensor& add(Tensor& a, Tensor& b);        // same shape
  Tensor& sub(Tensor& a, Tensor& b);        // same shape
  Tensor& mul(Tensor& a, Tensor& b);        // same shape, elementwise
  Tensor& scale(Tensor& x, double c);       // constant scalar multiply
  Tensor& mul_scalar(Tensor& s, Tensor& x); // 1-element tensor times tensor
  Tensor& add_bias(Tensor& x, Tensor& b);   // [m x n] + row vector [1 x n]

  Tensor& relu(Tensor& x);
  Tensor& exp(Tensor& x);
  Tensor& log(Tensor& x);                   // domain error on non-positive input
  Tensor& clamp(Tensor& x, double lo, double hi);  // zero grad outside (lo, hi)

  Tensor& l2_normalize_rows(Tensor& x);
  Tensor& l2_normalize_cols(Tensor& x);

  Tensor& sum(Tensor& x);                   // -> {1}
  Tensor& row_sum(Tensor& x);               // [m x n] -> [m x 1]
  Tensor& col_sum(Tensor& x);               // [m x n] -> [1 x n]
  Tensor& log_sum_exp_rows(Tensor& x);      // [m x n] -> [m x 1], max-shifted

  /// out[i] = x[i, labels[i]]; shape [m x 1].
  Tensor& gather_rows(Tensor& x, std::vector<int> labels);

  Tensor& concat_cols(Tensor& a, Tensor& b);
  Tensor& concat_rows(const std::vector<Tensor*>& parts);
  Tensor& slice_rows(Tensor& x, std::size_t first, std::size_t count);
  Tensor& take_rows(Tensor& x, std::vector<std::size_t> rows);

  /// Elementwise multiply by a constant mask (not differentiated through).
  Tensor& hadamard_mask(Tensor& x, std::vector<double> mask);

  /// Inverted dropout: keep with prob 1-p and scale kept entries by 1/(1-p).
  Tensor& dropout(Tensor& x, double p, std::mt19937_64& rng);

  /// Reverse pass from a scalar loss. Every requires_grad leaf reachable from
  /// the loss gets its grad accumulated; leaves not touched keep their zeros.
  void backward(Tensor& loss);

  std::size_t recorded_ops() const { return records_.size(); }

 private:
  Tensor& fresh(std::vector<std::size_t> shape, bool requires_grad);
  void record(std::function<void()> pull);

  std::deque<Tensor> owned_;
  struct Record {
    std::function<void()> pull;
  };
  std::vector<Record> records_;
};

}  // namespace geofew
