#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "geofew/datasets.hpp"
#include "geofew/losses.hpp"
#include "geofew/model.hpp"

namespace geofew {

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double lr_extractor = 1e-3;
  double lr_classifier = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t epochs = 30;       // stage 1
  std::size_t iterations = 300;  // stage 2
  std::size_t batch_size = 64;

  void validate() const;
};

struct ParamGroup {
  std::string name;
  std::vector<Tensor*> params;
  double lr = 0.0;
};

/// Plain SGD or bias-corrected Adam with one learning rate per group. Moment
/// buffers are keyed by parameter identity, so groups must contain the same
/// tensors across steps. Aborts on non-finite gradients, naming the group.
class Optimizer {
 public:
  explicit Optimizer(const OptimizerConfig& config);
  void step(const std::vector<ParamGroup>& groups);
  std::size_t steps_taken() const { return t_; }

 private:
  struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
  };
  OptimizerConfig config_;
  std::size_t t_ = 0;
  std::unordered_map<const Tensor*, AdamState> state_;
};

enum class AugmentationMode { kNone, kVectorJitter, kImageGrid };

struct AugmentationConfig {
  AugmentationMode mode = AugmentationMode::kVectorJitter;
  std::size_t pad = 8;          // image-grid: zero padding per border
  double flip_prob = 0.5;       // image-grid: horizontal flip probability
  double jitter_sigma = 0.05;   // vector-jitter: noise stddev
  std::size_t target_total_per_category = 20;

  void validate() const;
};

/// Zero-pad, crop back to H x W at the given offsets, then optionally flip
/// horizontally. Center offsets (= pad) with no flip are the identity.
Tensor pad_crop_flip(std::span<const double> grid, std::size_t height,
                     std::size_t width, std::size_t pad, std::size_t off_y,
                     std::size_t off_x, bool flip);

/// Expands each category's k x D support tensor to exactly
/// target_total_per_category rows, originals first. grid_dims selects the
/// image-grid path; labels never change. Deterministic under the seed.
std::vector<Tensor> augment(
    const std::vector<Tensor>& support_per_category,
    const AugmentationConfig& config,
    const std::optional<std::pair<std::size_t, std::size_t>>& grid_dims,
    std::uint64_t seed);

struct StepRecord {
  std::size_t step = 0;
  double l_cls = 0.0;
  double l_wcfc = 0.0;
  double l_aws = 0.0;
  int aws_active = 0;
  double s = 0.0;
  double elapsed_ms = 0.0;
};

struct TrainHistory {
  std::vector<StepRecord> steps;
  std::vector<double> epoch_val_accuracy;  // stage 1 only
  double final_val_accuracy = 0.0;
};

/// One line-delimited JSON record per step.
void write_history_jsonl(const TrainHistory& history, const std::string& path);

/// Stage 1: trains every block plus base weights and the scale on the base
/// train split, minimizing cls + weight-centric clustering (stage-1 type,
/// computed per batch over each category present). Shuffles per epoch with
/// the run seed; aborts on non-finite loss naming the offending term.
TrainHistory train_stage1(BlockNetwork& net, const DatasetView& base,
                          const OptimizerConfig& opt, const LossConfig& loss,
                          std::uint64_t seed);

/// Computes novel-stream features of each category's support and installs the
/// unnormalized imprinted columns as the novel weights.
void imprint_novel(BlockNetwork& net,
                   const std::vector<Tensor>& support_per_category, int type);

/// Stage 2: requires duplication and imprinting; trains only the duplicated
/// top blocks and novel weights under the combined objective, against the
/// frozen [base novel] classifier. The classification term sees the augmented
/// support batch; the clustering term re-aggregates the original k examples'
/// current features each step. Verifies the base checksum at the end.
TrainHistory finetune_stage2(BlockNetwork& net,
                             const std::vector<Tensor>& support_per_category,
                             const OptimizerConfig& opt, const LossConfig& loss,
                             const AugmentationConfig& aug, std::uint64_t seed);

/// Runs finetune_stage2 over nested support sets (each stage's rows must be a
/// prefix of the next stage's) without re-duplicating or re-imprinting
/// between stages; novel parameters carry forward. on_stage runs after each
/// stage with its index.
std::vector<TrainHistory> incremental_finetune(
    BlockNetwork& net, const std::vector<std::vector<Tensor>>& stage_supports,
    std::size_t n_top, int imprint_type, const OptimizerConfig& opt,
    const LossConfig& loss, const AugmentationConfig& aug, std::uint64_t seed,
    const std::function<void(std::size_t)>& on_stage = nullptr);

/// Accuracy of base-restricted cosine argmax over the given split.
double base_accuracy(const BlockNetwork& net, const DatasetView& base,
                     Split split);

}  // namespace geofew
