#pragma once

#include <vector>

#include "geofew/geometry.hpp"
#include "geofew/tensor.hpp"

namespace geofew {

/// Knobs for the combined training objective
///   total = gamma * cls + alpha * wcfc + beta * aws.
struct LossConfig {
  double gamma = 1.0;
  double alpha = 1.0;
  double beta = 1.0;
  double margin_m = 0.6;
  int wcfc_type_stage1 = 1;
  int wcfc_type_stage2 = 2;
  double scale_init = 10.0;
  double log_clamp = 1e-7;

  void validate() const;
};

/// Learnable multiplier on cosine scores; trained in stage 1, frozen after.
/// Projected back to >= 1 after every optimizer step.
struct ScaleParameter {
  Tensor value = Tensor::scalar(10.0);
  bool learnable = true;
};

/// Mean negative log-softmax over scale * cosine scores.
///
/// features: M x d, weights: d x C, labels in [0, C). Both sides are
/// L2-normalized internally, so the loss is invariant to positive rescaling
/// of any feature row or weight column.
Tensor& cls_loss(Tape& tape, Tensor& features, const std::vector<int>& labels,
                 Tensor& weights, Tensor& scale);

/// Weight-centric feature clustering: sum over categories of
/// -log(clamp(cos(aggregate_i, normalized weight column i), log_clamp, 1)).
/// support_features holds the current k x d features of each category, in
/// weight-column order.
Tensor& wcfc_loss(Tape& tape, const std::vector<Tensor*>& support_features,
                  Tensor& novel_weights, int type, double log_clamp);

struct AwsResult {
  Tensor* loss = nullptr;  // scalar on the tape
  int active_count = 0;    // pairs above the margin this step
};

/// Angular weight separation: over the pairwise-cosine matrix of
/// [base novel] columns against novel columns (self pairs zeroed), pairs with
/// u > margin contribute -log(clamp(1 - u, log_clamp, 1)); the loss is their
/// mean. An empty active set yields exactly zero loss and zero gradient,
/// which is how the constraint switches itself off once the weights are
/// separated.
AwsResult aws_loss(Tape& tape, Tensor& base_weights, Tensor& novel_weights,
                   double margin, double log_clamp);

/// Inputs to the combined objective that already live on the tape.
struct Stage2Batch {
  Tensor* features = nullptr;              // M x d novel-stream features
  std::vector<int> labels;                 // indices into [base novel] columns
  std::vector<Tensor*> support_features;   // per novel category, k x d
};

struct TotalLossBreakdown {
  double cls = 0.0;
  double wcfc = 0.0;
  double aws = 0.0;
  int aws_active = 0;
};

struct TotalLossResult {
  Tensor* total = nullptr;
  TotalLossBreakdown parts;
};

/// gamma * cls + alpha * wcfc + beta * aws over a stage-2 batch. Every term
/// is evaluated for the breakdown; terms with a zero coefficient contribute
/// neither value nor gradient to the total.
TotalLossResult total_loss(Tape& tape, const Stage2Batch& batch,
                           Tensor& base_weights, Tensor& novel_weights,
                           Tensor& scale, const LossConfig& config);

}  // namespace geofew
