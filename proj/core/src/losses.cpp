#include "geofew/losses.hpp"

#include <cmath>
#include <string>

namespace geofew {

void LossConfig::validate() const {
  if (!(margin_m > 0.0 && margin_m < 1.0)) {
    throw ConfigError("LossConfig: margin " + std::to_string(margin_m) +
                      " outside (0, 1)");
  }
  if (gamma < 0.0 || alpha < 0.0 || beta < 0.0) {
    throw ConfigError("LossConfig: loss coefficients must be non-negative");
  }
  if (!(scale_init > 0.0)) {
    throw ConfigError("LossConfig: scale_init must be positive");
  }
  if (!(log_clamp > 0.0)) {
    throw ConfigError("LossConfig: log_clamp must be positive");
  }
  if ((wcfc_type_stage1 != 1 && wcfc_type_stage1 != 2) ||
      (wcfc_type_stage2 != 1 && wcfc_type_stage2 != 2)) {
    throw ConfigError("LossConfig: wcfc types must be 1 or 2");
  }
}

Tensor& cls_loss(Tape& tape, Tensor& features, const std::vector<int>& labels,
                 Tensor& weights, Tensor& scale) {
  if (!features.is_matrix() || features.rows() == 0) {
    throw ContractError("cls_loss: empty batch");
  }
  if (!weights.is_matrix() || weights.cols() == 0) {
    throw ContractError("cls_loss: no weight columns");
  }
  if (features.cols() != weights.rows()) {
    throw ShapeError("cls_loss: features " + shape_string(features) +
                     " vs weights " + shape_string(weights));
  }
  const std::size_t m = features.rows();
  const std::size_t n_classes = weights.cols();
  if (labels.size() != m) {
    throw ContractError("cls_loss: " + std::to_string(labels.size()) +
                        " labels for " + std::to_string(m) + " examples");
  }
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n_classes) {
      throw ContractError("cls_loss: label " + std::to_string(labels[i]) +
                          " outside [0, " + std::to_string(n_classes) + ")");
    }
  }

  Tensor& cos_scores = tape.matmul(tape.l2_normalize_rows(features),
                                   tape.l2_normalize_cols(weights));
  Tensor& logits = tape.mul_scalar(scale, cos_scores);
  Tensor& lse = tape.log_sum_exp_rows(logits);
  Tensor& picked = tape.gather_rows(logits, labels);
  Tensor& per_example = tape.sub(lse, picked);
  return tape.scale(tape.sum(per_example), 1.0 / static_cast<double>(m));
}

Tensor& wcfc_loss(Tape& tape, const std::vector<Tensor*>& support_features,
                  Tensor& novel_weights, int type, double log_clamp) {
  if (support_features.empty()) {
    throw ContractError("wcfc_loss: no categories");
  }
  if (!novel_weights.is_matrix() ||
      novel_weights.cols() != support_features.size()) {
    throw ShapeError("wcfc_loss: " + std::to_string(support_features.size()) +
                     " categories vs weights " + shape_string(novel_weights));
  }

  std::vector<Tensor*> aggregates;
  aggregates.reserve(support_features.size());
  for (Tensor* features : support_features) {
    aggregates.push_back(&aggregate_rows(tape, *features, type));
  }
  // All category cosines at once: row i of the stacked aggregates against
  // normalized weight column i is the diagonal of G * W~.
  Tensor& stacked = tape.concat_rows(aggregates);
  Tensor& cos_matrix =
      tape.matmul(stacked, tape.l2_normalize_cols(novel_weights));
  std::vector<int> diagonal(support_features.size());
  for (std::size_t i = 0; i < diagonal.size(); ++i)
    diagonal[i] = static_cast<int>(i);
  Tensor& own = tape.gather_rows(cos_matrix, diagonal);
  Tensor& clamped = tape.clamp(own, log_clamp, 1.0);
  return tape.scale(tape.sum(tape.log(clamped)), -1.0);
}

AwsResult aws_loss(Tape& tape, Tensor& base_weights, Tensor& novel_weights,
                   double margin, double log_clamp) {
  if (!(margin > 0.0 && margin < 1.0)) {
    throw ConfigError("aws_loss: margin " + std::to_string(margin) +
                      " outside (0, 1)");
  }
  if (!novel_weights.is_matrix() || novel_weights.cols() == 0) {
    throw ContractError("aws_loss: no novel weight columns");
  }
  const std::size_t n_base = base_weights.numel() > 0 ? base_weights.cols() : 0;
  const std::size_t n_novel = novel_weights.cols();

  Tensor& unit_novel = tape.l2_normalize_cols(novel_weights);
  Tensor* all_unit = &unit_novel;
  if (n_base > 0) {
    all_unit = &tape.concat_cols(tape.l2_normalize_cols(base_weights),
                                 unit_novel);
  }
  Tensor& u_full = tape.matmul(tape.transpose(*all_unit), unit_novel);

  // Zero each novel column against itself: same concatenated index, not value
  // equality, so coincidentally equal categories still repel each other.
  std::vector<double> self_mask((n_base + n_novel) * n_novel, 1.0);
  for (std::size_t j = 0; j < n_novel; ++j)
    self_mask[(n_base + j) * n_novel + j] = 0.0;
  Tensor& u = tape.hadamard_mask(u_full, std::move(self_mask));

  std::vector<double> active(u.numel(), 0.0);
  int active_count = 0;
  for (std::size_t i = 0; i < u.numel(); ++i) {
    if (u.data[i] > margin) {
      active[i] = 1.0;
      ++active_count;
    }
  }

  AwsResult result;
  result.active_count = active_count;
  if (active_count == 0) {
    // Separated: the constraint is off and contributes no gradient.
    result.loss = &tape.constant({1}, 0.0);
    return result;
  }

  Tensor& gap = tape.sub(tape.constant(u.shape(), 1.0), u);
  Tensor& clamped = tape.clamp(gap, log_clamp, 1.0);
  Tensor& neg_log = tape.scale(tape.log(clamped), -1.0);
  Tensor& masked = tape.hadamard_mask(neg_log, std::move(active));
  result.loss =
      &tape.scale(tape.sum(masked), 1.0 / static_cast<double>(active_count));
  return result;
}

TotalLossResult total_loss(Tape& tape, const Stage2Batch& batch,
                           Tensor& base_weights, Tensor& novel_weights,
                           Tensor& scale, const LossConfig& config) {
  config.validate();
  if (batch.features == nullptr) {
    throw ContractError("total_loss: batch has no features");
  }

  Tensor& all_weights = tape.concat_cols(base_weights, novel_weights);
  Tensor& cls =
      cls_loss(tape, *batch.features, batch.labels, all_weights, scale);
  Tensor& wcfc = wcfc_loss(tape, batch.support_features, novel_weights,
                           config.wcfc_type_stage2, config.log_clamp);
  AwsResult aws = aws_loss(tape, base_weights, novel_weights, config.margin_m,
                           config.log_clamp);

  TotalLossResult result;
  result.parts.cls = cls.value();
  result.parts.wcfc = wcfc.value();
  result.parts.aws = aws.loss->value();
  result.parts.aws_active = aws.active_count;

  Tensor* total = nullptr;
  auto add_term = [&](Tensor& term, double coeff) {
    if (coeff == 0.0) return;
    Tensor& weighted = tape.scale(term, coeff);
    total = total ? &tape.add(*total, weighted) : &weighted;
  };
  add_term(cls, config.gamma);
  add_term(wcfc, config.alpha);
  add_term(*aws.loss, config.beta);
  result.total = total ? total : &tape.constant({1}, 0.0);
  return result;
}

}  // namespace geofew
