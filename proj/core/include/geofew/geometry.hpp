#pragma once

#include <span>
#include <vector>

#include "geofew/tensor.hpp"

namespace geofew {

/// Vector constrained to the unit hypersphere (norm within 1e-9 of 1).
class UnitVector {
 public:
  /// Normalizes v; throws DegenerateInputError when |v| <= kNormEpsilon.
  static UnitVector normalized(std::vector<double> v);

  const std::vector<double>& values() const { return values_; }
  std::size_t dim() const { return values_.size(); }

 private:
  explicit UnitVector(std::vector<double> v) : values_(std::move(v)) {}
  std::vector<double> values_;
};

enum class WeightGroup { kBase, kNovel };

/// Column view over the concatenated base/novel weight matrix. Group tags
/// record which side each column came from; novel column j corresponds to
/// concatenated column base_count + j.
struct WeightMatrixView {
  std::vector<std::vector<double>> columns;
  std::vector<WeightGroup> tags;

  /// Copies columns out of d x nB and d x nN matrices.
  static WeightMatrixView from(const Tensor& base, const Tensor& novel);

  std::size_t base_count() const;
  std::size_t novel_count() const;
  std::size_t dim() const { return columns.empty() ? 0 : columns.front().size(); }
};

/// cos(a, b), clamped to [-1, 1] against rounding. Throws on near-zero input.
double cosine(std::span<const double> a, std::span<const double> b);

/// Normalized arithmetic mean of the feature rows.
UnitVector aggregate_type1(const Tensor& features);

/// Normalized sum of the row-normalized features.
UnitVector aggregate_type2(const Tensor& features);

/// Differentiable aggregate of the rows of `features` as a 1 x d unit row on
/// the tape; type selects mean-then-normalize (1) or normalize-sum-normalize
/// (2).
Tensor& aggregate_rows(Tape& tape, Tensor& features, int type);

/// Unnormalized novel-weight initializers, one column per category: the mean
/// feature for type 1, the sum of normalized features for type 2. Consumers
/// normalize on use; type 2 keeps its magnitude degree of freedom.
Tensor imprint_novel_weights(const std::vector<Tensor>& support_per_category,
                             int type);

/// Pairwise cosine of every concatenated column against every novel column;
/// the entry pairing a novel column with itself (same concatenated index, not
/// value equality) is exactly 0.
Tensor angular_distance_matrix(const WeightMatrixView& w);

}  // namespace geofew
