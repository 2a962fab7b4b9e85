#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "geofew/datasets.hpp"
#include "geofew/model.hpp"
#include "geofew/training.hpp"

namespace geofew {

/// One random draw of novel categories with support and query sets, plus the
/// base queries it is scored against.
struct Episode {
  std::vector<int> novel_category_ids;
  std::vector<Tensor> support;      // per category, k x D
  std::vector<Tensor> query_novel;  // per category, t_novel x D
  Tensor query_base;                // (t_base * n_base) x D
  std::vector<int> query_base_labels;  // base column indices
  std::uint64_t seed = 0;

  /// Canonical byte serialization, for determinism checks and reports.
  std::string serialize() const;
};

struct EpisodeParams {
  std::size_t c_novel = 5;
  std::size_t k = 5;
  std::size_t t_novel = 15;  // novel query examples per novel category
  std::size_t t_base = 15;   // base query examples per base category

  void validate() const;
};

/// Uniform sampling without replacement, deterministic under the seed.
/// Support and novel queries never overlap.
Episode sample_episode(const DatasetView& novel_pool, const DatasetView& base,
                       const EpisodeParams& params, std::uint64_t seed);

enum class EvalMode { kFinetune, kAblationNoFinetune };

struct EpisodeResult {
  double acc_novel = 0.0;
  double acc_both = 0.0;
  double acc_base = 0.0;
  double acc_both_prior = 0.0;
  TrainHistory history;  // empty in ablation mode
  std::uint64_t seed = 0;
};

struct EvalConfig {
  OptimizerConfig opt;
  LossConfig loss;
  AugmentationConfig aug;
  std::size_t n_top = 1;
  double p_base = 0.2;
  double p_novel = 0.8;
};

/// Clones the stage-1 snapshot, duplicates the top blocks and imprints the
/// novel weights, fine-tunes them in finetune mode (ablation imprints with
/// the type-2 rule and trains nothing), then scores the episode's queries:
/// novel restricted to novel columns, base restricted to base columns, both
/// over everything, and both again after the base/novel prior.
EpisodeResult evaluate_episode(const BlockNetwork& snapshot,
                               const Episode& episode, EvalMode mode,
                               const EvalConfig& config);

/// Softmax over scale * scores, reweighted by the base/novel prior and
/// renormalized. Argmax of the result is the prior-aware prediction.
Tensor apply_prior(const Tensor& scores, std::size_t n_base, double scale,
                   double p_base, double p_novel);

struct MetricStats {
  double mean = 0.0;
  double stddev = 0.0;  // sample std (n - 1)
  double ci95 = 0.0;    // 1.96 * stddev / sqrt(n)
  std::size_t n = 0;
  bool degenerate_n = false;  // n < 2: stddev/ci95 are 0 by convention
};

struct AggregateReport {
  MetricStats novel;
  MetricStats both;
  MetricStats base;
  MetricStats both_prior;
};

MetricStats aggregate_metric(const std::vector<double>& values);
AggregateReport aggregate(const std::vector<EpisodeResult>& results);

/// Fraction of rows whose true label is among the k highest-scoring columns;
/// ties resolve toward the lower column index.
double topk_accuracy(const Tensor& scores, const std::vector<int>& labels,
                     std::size_t k);

struct FiveNumberSummary {
  double min = 0.0;
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
  double max = 0.0;
};

FiveNumberSummary five_number_summary(std::vector<double> values);

struct CosineDiagnostics {
  FiveNumberSummary within_base;    // pairwise cosines inside each base category
  FiveNumberSummary base_medians;   // pairwise cosines of base category medians
  FiveNumberSummary novel_medians;  // same for novel categories
  std::vector<int> skipped_categories;  // base categories with < 2 examples
};

/// Feature-space clustering and separation summaries under the stage-1
/// extractor. Category medians are coordinate-wise, then normalized.
CosineDiagnostics cosine_diagnostics(const BlockNetwork& net,
                                     const DatasetView& base,
                                     const DatasetView& novel);

/// Runs n_episodes independent episodes (episode i gets a seed derived from
/// base_seed and i) across up to `jobs` worker threads; results are identical
/// for any job count.
std::vector<EpisodeResult> run_episodes(const BlockNetwork& snapshot,
                                        const DatasetView& novel_pool,
                                        const DatasetView& base,
                                        const EpisodeParams& params,
                                        EvalMode mode, const EvalConfig& config,
                                        std::size_t n_episodes,
                                        std::uint64_t base_seed,
                                        std::size_t jobs = 1);

struct IncrementalStageResult {
  std::size_t shots = 0;
  EpisodeResult result;
};

/// Fine-tunes one episode through the nested shot schedule (the episode must
/// carry the final stage's shot count) and scores after every stage.
std::vector<IncrementalStageResult> evaluate_incremental(
    const BlockNetwork& snapshot, const Episode& episode,
    const std::vector<std::size_t>& schedule, const EvalConfig& config);

}  // namespace geofew
