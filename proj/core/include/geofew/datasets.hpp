#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "geofew/tensor.hpp"

namespace geofew {

enum class Split { kTrain, kVal, kTest };

/// Immutable labeled examples with split tags and a category registry.
/// Examples are N x D rows; grid_dims marks D = H * W image-grid data.
struct LabeledDataset {
  Tensor examples;
  std::vector<int> labels;
  std::vector<Split> split_tags;
  std::vector<std::string> category_names;
  std::optional<std::pair<std::size_t, std::size_t>> grid_dims;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return examples.is_matrix() ? examples.cols() : 0; }
  std::size_t n_categories() const { return category_names.size(); }

  std::span<const double> example_row(std::size_t i) const;
  std::vector<std::size_t> indices_of(int category,
                                      std::optional<Split> split) const;
  /// Rows for the given example indices as a len x D tensor.
  Tensor gather(const std::vector<std::size_t>& indices) const;
};

/// A deliberately correlated category pair: the target's class mean is
/// constructed at exactly `cosine` against the source's. Planted pairs are
/// the one exception to the global bound.
struct PlantedPair {
  std::size_t target = 0;
  std::size_t source = 0;
  double cosine = 0.9;
};

/// Synthetic Gaussian blobs around unit-sphere class means whose pairwise
/// cosines stay below a bound, with optional planted correlated pairs. The
/// planted pairs are how the benchmark gets categories that genuinely overlap
/// (novel against novel, or novel against base); every unplanted pair still
/// honors the bound.
struct BlobSpec {
  std::size_t n_categories = 0;
  std::size_t dim = 0;
  std::size_t train_per_category = 0;
  std::size_t val_per_category = 0;
  std::size_t test_per_category = 0;
  double max_pairwise_cosine = 0.3;
  double noise_sigma = 0.1;
  std::vector<PlantedPair> planted_pairs;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Class means drawn on the unit sphere by rejection until every pairwise
/// cosine is <= the bound (an exact-zero bound uses an orthonormal
/// construction instead, which rejection cannot hit); examples are
/// mean + N(0, sigma^2 I). Deterministic under the spec seed.
LabeledDataset generate_blobs(const BlobSpec& spec);

/// The class means the generator would use, for tests and diagnostics.
std::vector<std::vector<double>> blob_class_means(const BlobSpec& spec);

/// Non-owning, label-preserving view over a subset of categories.
struct DatasetView {
  const LabeledDataset* data = nullptr;
  std::vector<int> category_ids;
  bool use_splits = true;  // the novel pool exposes no split structure

  std::vector<std::size_t> indices(int category,
                                   std::optional<Split> split) const;
  Tensor gather(const std::vector<std::size_t>& indices) const;
  std::size_t n_categories() const { return category_ids.size(); }
};

struct BaseNovelSplit {
  DatasetView base;
  DatasetView novel_pool;
};

/// Partitions categories into a base view (with splits) and a novel pool
/// (splits erased). Throws ContractError listing any overlapping ids.
BaseNovelSplit split_base_novel(const LabeledDataset& dataset,
                                const std::vector<int>& base_ids,
                                const std::vector<int>& novel_ids);

/// CSV with an integer label column followed by feature columns; an optional
/// leading "# dims: H W" line switches to image-grid mode. Errors carry line
/// numbers.
LabeledDataset load_csv(const std::string& path);
void save_csv(const LabeledDataset& dataset, const std::string& path);

/// Reassigns split tags assuming the writer's per-category row order
/// (train, then val, then test); counts are per category.
void assign_splits(LabeledDataset& dataset, std::size_t train_per_category,
                   std::size_t val_per_category, std::size_t test_per_category);

}  // namespace geofew
