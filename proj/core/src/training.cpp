#include "geofew/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "geofew/rng.hpp"
#include "json.hpp"

namespace geofew {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start)
      .count();
}

void check_finite_loss(const TotalLossBreakdown& parts, double total) {
  if (std::isfinite(total) && std::isfinite(parts.cls) &&
      std::isfinite(parts.wcfc) && std::isfinite(parts.aws)) {
    return;
  }
  std::string offender = "total";
  if (!std::isfinite(parts.cls)) offender = "cls";
  else if (!std::isfinite(parts.wcfc)) offender = "wcfc";
  else if (!std::isfinite(parts.aws)) offender = "aws";
  throw InvariantError("training aborted: non-finite " + offender +
                       " loss (cls=" + std::to_string(parts.cls) +
                       " wcfc=" + std::to_string(parts.wcfc) +
                       " aws=" + std::to_string(parts.aws) + ")");
}

void project_scale(ScaleParameter& scale) {
  scale.value.data[0] = std::max(scale.value.data[0], 1.0);
}

int argmax_row(const Tensor& scores, std::size_t row) {
  const std::size_t n = scores.cols();
  int best = 0;
  double best_v = scores.at(row, 0);
  for (std::size_t j = 1; j < n; ++j) {
    if (scores.at(row, j) > best_v) {
      best_v = scores.at(row, j);
      best = static_cast<int>(j);
    }
  }
  return best;
}

}  // namespace

// ---------------------------------------------------------------------------
// Optimizer

void OptimizerConfig::validate() const {
  if (!(lr_extractor > 0.0) || !(lr_classifier > 0.0)) {
    throw ConfigError("OptimizerConfig: learning rates must be positive");
  }
  if (!(epsilon > 0.0)) throw ConfigError("OptimizerConfig: epsilon must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("OptimizerConfig: betas outside [0, 1)");
  }
  if (batch_size == 0) throw ConfigError("OptimizerConfig: batch_size must be > 0");
}

Optimizer::Optimizer(const OptimizerConfig& config) : config_(config) {
  config_.validate();
}

void Optimizer::step(const std::vector<ParamGroup>& groups) {
  ++t_;
  for (const ParamGroup& group : groups) {
    for (Tensor* p : group.params) {
      if (!p->requires_grad()) continue;
      for (double g : p->grad) {
        if (!std::isfinite(g)) {
          throw InvariantError("optimizer: non-finite gradient in group '" +
                               group.name + "'");
        }
      }
      if (config_.kind == OptimizerKind::kSgd) {
        for (std::size_t i = 0; i < p->data.size(); ++i)
          p->data[i] -= group.lr * p->grad[i];
        continue;
      }
      AdamState& st = state_[p];
      if (st.m.empty()) {
        st.m.assign(p->data.size(), 0.0);
        st.v.assign(p->data.size(), 0.0);
      }
      const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
      const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
      for (std::size_t i = 0; i < p->data.size(); ++i) {
        st.m[i] = config_.beta1 * st.m[i] + (1.0 - config_.beta1) * p->grad[i];
        st.v[i] = config_.beta2 * st.v[i] +
                  (1.0 - config_.beta2) * p->grad[i] * p->grad[i];
        const double m_hat = st.m[i] / bc1;
        const double v_hat = st.v[i] / bc2;
        p->data[i] -= group.lr * m_hat / (std::sqrt(v_hat) + config_.epsilon);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Augmentation

void AugmentationConfig::validate() const {
  if (flip_prob < 0.0 || flip_prob > 1.0) {
    throw ConfigError("AugmentationConfig: flip_prob outside [0, 1]");
  }
  if (jitter_sigma < 0.0) {
    throw ConfigError("AugmentationConfig: negative jitter_sigma");
  }
}

Tensor pad_crop_flip(std::span<const double> grid, std::size_t height,
                     std::size_t width, std::size_t pad, std::size_t off_y,
                     std::size_t off_x, bool flip) {
  if (grid.size() != height * width) {
    throw ShapeError("pad_crop_flip: grid size " + std::to_string(grid.size()) +
                     " is not " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  if (off_y > 2 * pad || off_x > 2 * pad) {
    throw ContractError("pad_crop_flip: crop offset outside the padded frame");
  }
  Tensor out({1, height * width});
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      // position in the zero-padded frame
      const std::ptrdiff_t src_y =
          static_cast<std::ptrdiff_t>(y + off_y) - static_cast<std::ptrdiff_t>(pad);
      const std::ptrdiff_t src_x =
          static_cast<std::ptrdiff_t>(x + off_x) - static_cast<std::ptrdiff_t>(pad);
      double v = 0.0;
      if (src_y >= 0 && src_y < static_cast<std::ptrdiff_t>(height) &&
          src_x >= 0 && src_x < static_cast<std::ptrdiff_t>(width)) {
        v = grid[static_cast<std::size_t>(src_y) * width +
                 static_cast<std::size_t>(src_x)];
      }
      const std::size_t dst_x = flip ? width - 1 - x : x;
      out.data[y * width + dst_x] = v;
    }
  }
  return out;
}

std::vector<Tensor> augment(
    const std::vector<Tensor>& support_per_category,
    const AugmentationConfig& config,
    const std::optional<std::pair<std::size_t, std::size_t>>& grid_dims,
    std::uint64_t seed) {
  config.validate();
  if (config.mode == AugmentationMode::kImageGrid && !grid_dims) {
    throw ConfigError("augment: image-grid mode needs grid data");
  }
  if (config.mode == AugmentationMode::kVectorJitter && grid_dims) {
    throw ConfigError("augment: vector-jitter mode on image-grid data");
  }

  std::vector<Tensor> out;
  out.reserve(support_per_category.size());
  for (std::size_t c = 0; c < support_per_category.size(); ++c) {
    const Tensor& support = support_per_category[c];
    const std::size_t k = support.rows();
    const std::size_t d = support.cols();
    if (k == 0) {
      throw ContractError("augment: category " + std::to_string(c) +
                          " has no support examples");
    }
    if (config.mode == AugmentationMode::kNone) {
      out.push_back(support);
      continue;
    }
    if (config.target_total_per_category < k) {
      throw ConfigError("augment: target_total_per_category " +
                        std::to_string(config.target_total_per_category) +
                        " is below the shot count " + std::to_string(k));
    }
    std::mt19937_64 rng(mix_seed(seed, 0x617567ULL + c));
    Tensor expanded({config.target_total_per_category, d});
    std::copy(support.data.begin(), support.data.end(), expanded.data.begin());
    for (std::size_t e = k; e < config.target_total_per_category; ++e) {
      const std::size_t src = (e - k) % k;
      if (config.mode == AugmentationMode::kVectorJitter) {
        for (std::size_t j = 0; j < d; ++j) {
          expanded.data[e * d + j] =
              support.at(src, j) + config.jitter_sigma * rand_normal(rng);
        }
      } else {
        const auto [h, w] = *grid_dims;
        const std::size_t off_y = rand_index(rng, 2 * config.pad + 1);
        const std::size_t off_x = rand_index(rng, 2 * config.pad + 1);
        const bool flip = rand_uniform01(rng) < config.flip_prob;
        Tensor t = pad_crop_flip(
            std::span<const double>(support.data.data() + src * d, d), h, w,
            config.pad, off_y, off_x, flip);
        std::copy(t.data.begin(), t.data.end(), expanded.data.begin() + e * d);
      }
    }
    out.push_back(std::move(expanded));
  }
  return out;
}

// ---------------------------------------------------------------------------
// History

void write_history_jsonl(const TrainHistory& history, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ParseError("history: cannot open '" + path + "' to write");
  for (const StepRecord& r : history.steps) {
    nlohmann::json rec;
    rec["step"] = r.step;
    rec["L_cls"] = r.l_cls;
    rec["L_WCFC"] = r.l_wcfc;
    rec["L_AWS"] = r.l_aws;
    rec["aws_active"] = r.aws_active;
    rec["s"] = r.s;
    rec["elapsed_ms"] = r.elapsed_ms;
    os << rec.dump() << "\n";
  }
}

// ---------------------------------------------------------------------------
// Stage 1

double base_accuracy(const BlockNetwork& net, const DatasetView& base,
                     Split split) {
  std::size_t correct = 0, total = 0;
  std::vector<std::size_t> all;
  std::vector<int> truth;
  for (std::size_t c = 0; c < base.category_ids.size(); ++c) {
    for (std::size_t i : base.indices(base.category_ids[c], split)) {
      all.push_back(i);
      truth.push_back(static_cast<int>(c));
    }
  }
  if (all.empty()) return 0.0;
  const Tensor batch = base.gather(all);
  const Tensor scores = net.scores_base(batch);
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (argmax_row(scores, i) == truth[i]) ++correct;
    ++total;
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

TrainHistory train_stage1(BlockNetwork& net, const DatasetView& base,
                          const OptimizerConfig& opt, const LossConfig& loss,
                          std::uint64_t seed) {
  opt.validate();
  loss.validate();
  if (net.n_base() != base.n_categories()) {
    throw ContractError("train_stage1: network has " +
                        std::to_string(net.n_base()) +
                        " base columns for " +
                        std::to_string(base.n_categories()) + " categories");
  }

  net.set_stage1_trainable();
  net.classifier().scale.value.data[0] = loss.scale_init;

  // train rows, labeled with their base column index
  std::vector<std::size_t> rows;
  std::vector<int> row_labels;
  for (std::size_t c = 0; c < base.category_ids.size(); ++c) {
    for (std::size_t i : base.indices(base.category_ids[c], Split::kTrain)) {
      rows.push_back(i);
      row_labels.push_back(static_cast<int>(c));
    }
  }
  if (rows.empty()) throw ContractError("train_stage1: empty train split");

  Optimizer optimizer(opt);
  std::vector<ParamGroup> groups;
  groups.push_back({"extractor", net.all_block_params(), opt.lr_extractor});
  groups.push_back({"classifier",
                    {&net.classifier().w_base, &net.classifier().scale.value},
                    opt.lr_classifier});

  std::mt19937_64 shuffle_rng(mix_seed(seed, 0x73687566ULL));
  TrainHistory history;
  const auto t0 = Clock::now();
  std::size_t step = 0;
  std::vector<std::size_t> order(rows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    shuffle_inplace(order, shuffle_rng);
    for (std::size_t start = 0; start < order.size();
         start += opt.batch_size) {
      const std::size_t count = std::min(opt.batch_size, order.size() - start);
      std::vector<std::size_t> batch_rows(count);
      std::vector<int> batch_labels(count);
      for (std::size_t i = 0; i < count; ++i) {
        batch_rows[i] = rows[order[start + i]];
        batch_labels[i] = row_labels[order[start + i]];
      }
      const Tensor batch = base.gather(batch_rows);

      for (Tensor* p : net.all_block_params()) p->zero_grad();
      net.classifier().w_base.zero_grad();
      net.classifier().scale.value.zero_grad();

      Tape tape;
      std::mt19937_64 dropout_rng(mix_seed(seed, 0xd0d0ULL + step));
      Tensor& features = net.forward_on_tape(tape, batch, Stream::kBase, true,
                                             &dropout_rng);
      Tensor& cls = cls_loss(tape, features, batch_labels,
                             net.classifier().w_base,
                             net.classifier().scale.value);

      // clustering over each category present in this batch
      std::vector<Tensor*> per_cat_features;
      std::vector<int> present;
      for (std::size_t c = 0; c < base.n_categories(); ++c) {
        std::vector<std::size_t> in_batch;
        for (std::size_t i = 0; i < count; ++i) {
          if (batch_labels[i] == static_cast<int>(c)) in_batch.push_back(i);
        }
        if (in_batch.empty()) continue;
        per_cat_features.push_back(&tape.take_rows(features, in_batch));
        present.push_back(static_cast<int>(c));
      }
      Tensor* aggregates = nullptr;
      {
        std::vector<Tensor*> parts;
        for (std::size_t p = 0; p < per_cat_features.size(); ++p) {
          parts.push_back(&aggregate_rows(tape, *per_cat_features[p],
                                          loss.wcfc_type_stage1));
        }
        aggregates = &tape.concat_rows(parts);
      }
      Tensor& cos_matrix = tape.matmul(
          *aggregates, tape.l2_normalize_cols(net.classifier().w_base));
      Tensor& own = tape.gather_rows(cos_matrix, present);
      Tensor& clamped = tape.clamp(own, loss.log_clamp, 1.0);
      Tensor& wcfc = tape.scale(tape.sum(tape.log(clamped)), -1.0);

      Tensor& total = tape.add(cls, wcfc);
      TotalLossBreakdown parts;
      parts.cls = cls.value();
      parts.wcfc = wcfc.value();
      check_finite_loss(parts, total.value());
      tape.backward(total);
      optimizer.step(groups);
      project_scale(net.classifier().scale);

      history.steps.push_back({step, parts.cls, parts.wcfc, 0.0, 0,
                               net.classifier().scale.value.data[0],
                               ms_since(t0)});
      ++step;
    }
    history.epoch_val_accuracy.push_back(base_accuracy(net, base, Split::kVal));
  }
  history.final_val_accuracy = history.epoch_val_accuracy.empty()
                                   ? 0.0
                                   : history.epoch_val_accuracy.back();
  net.clear_grad_flags();
  return history;
}

// ---------------------------------------------------------------------------
// Stage 2

void imprint_novel(BlockNetwork& net,
                   const std::vector<Tensor>& support_per_category, int type) {
  if (!net.has_novel_stream()) {
    throw StateError("imprint_novel: duplication has not happened");
  }
  std::vector<Tensor> features;
  features.reserve(support_per_category.size());
  for (const Tensor& support : support_per_category) {
    features.push_back(net.forward_novel(support));
  }
  net.classifier().w_novel = imprint_novel_weights(features, type);
}

TrainHistory finetune_stage2(BlockNetwork& net,
                             const std::vector<Tensor>& support_per_category,
                             const OptimizerConfig& opt, const LossConfig& loss,
                             const AugmentationConfig& aug,
                             std::uint64_t seed) {
  opt.validate();
  loss.validate();
  if (!net.has_novel_stream()) {
    throw StateError("finetune_stage2: duplicate_top_blocks first");
  }
  if (!net.classifier().w_novel) {
    throw StateError("finetune_stage2: imprint_novel first");
  }
  if (support_per_category.empty()) {
    throw ContractError("finetune_stage2: no novel categories");
  }
  const std::uint64_t checksum_before = net.base_checksum();
  if (net.recorded_base_checksum() != checksum_before) {
    throw InvariantError(
        "finetune_stage2: base parameters changed since duplication");
  }

  net.set_stage2_trainable();

  // One batch per step: the whole augmented support set, grouped per category
  // with the k originals first in each group.
  const std::vector<Tensor> augmented =
      augment(support_per_category, aug, std::nullopt, mix_seed(seed, 1));
  const std::size_t n_novel = support_per_category.size();
  const std::size_t n_base = net.n_base();

  std::vector<std::size_t> group_offset(n_novel);
  std::size_t total_rows = 0;
  for (std::size_t c = 0; c < n_novel; ++c) {
    group_offset[c] = total_rows;
    total_rows += augmented[c].rows();
  }
  Tensor batch({total_rows, net.spec().input_dim});
  std::vector<int> labels(total_rows);
  for (std::size_t c = 0; c < n_novel; ++c) {
    std::copy(augmented[c].data.begin(), augmented[c].data.end(),
              batch.data.begin() + group_offset[c] * net.spec().input_dim);
    for (std::size_t i = 0; i < augmented[c].rows(); ++i)
      labels[group_offset[c] + i] = static_cast<int>(n_base + c);
  }

  // The bottom blocks are frozen, so their output for this fixed batch is a
  // constant; compute it once and train only the duplicated top.
  const Tensor bottom = net.forward_bottom(batch);

  Optimizer optimizer(opt);
  std::vector<ParamGroup> groups;
  groups.push_back({"novel_top", net.novel_top_params(), opt.lr_extractor});
  groups.push_back(
      {"novel_classifier", {&*net.classifier().w_novel}, opt.lr_classifier});

  TrainHistory history;
  const auto t0 = Clock::now();
  for (std::size_t step = 0; step < opt.iterations; ++step) {
    for (Tensor* p : net.novel_top_params()) p->zero_grad();
    net.classifier().w_novel->zero_grad();

    Tape tape;
    std::mt19937_64 dropout_rng(mix_seed(seed, 0xd2d2ULL + step));
    Tensor& bottom_leaf = tape.leaf(bottom.shape(), bottom.data, false);
    Tensor& features = net.forward_top_on_tape(tape, bottom_leaf,
                                               Stream::kNovel, true,
                                               &dropout_rng);

    Stage2Batch stage2;
    stage2.features = &features;
    stage2.labels = labels;
    std::vector<Tensor*> support_slices;
    for (std::size_t c = 0; c < n_novel; ++c) {
      support_slices.push_back(&tape.slice_rows(
          features, group_offset[c], support_per_category[c].rows()));
    }
    stage2.support_features = support_slices;

    TotalLossResult result =
        total_loss(tape, stage2, net.classifier().w_base,
                   *net.classifier().w_novel,
                   net.classifier().scale.value, loss);
    check_finite_loss(result.parts, result.total->value());
    tape.backward(*result.total);
    optimizer.step(groups);

    history.steps.push_back({step, result.parts.cls, result.parts.wcfc,
                             result.parts.aws, result.parts.aws_active,
                             net.classifier().scale.value.data[0],
                             ms_since(t0)});
  }

  if (net.base_checksum() != checksum_before) {
    throw InvariantError(
        "finetune_stage2: base parameter checksum changed during fine-tuning");
  }
  net.clear_grad_flags();
  return history;
}

std::vector<TrainHistory> incremental_finetune(
    BlockNetwork& net, const std::vector<std::vector<Tensor>>& stage_supports,
    std::size_t n_top, int imprint_type, const OptimizerConfig& opt,
    const LossConfig& loss, const AugmentationConfig& aug, std::uint64_t seed,
    const std::function<void(std::size_t)>& on_stage) {
  if (stage_supports.empty()) {
    throw ContractError("incremental_finetune: no stages");
  }
  // Each stage's support must be a prefix of the next stage's.
  for (std::size_t t = 0; t + 1 < stage_supports.size(); ++t) {
    const auto& cur = stage_supports[t];
    const auto& next = stage_supports[t + 1];
    if (cur.size() != next.size()) {
      throw ContractError("incremental_finetune: category count changes at "
                          "stage " + std::to_string(t + 1));
    }
    for (std::size_t c = 0; c < cur.size(); ++c) {
      if (cur[c].rows() > next[c].rows()) {
        throw ContractError("incremental_finetune: stage " +
                            std::to_string(t + 1) + " shrinks category " +
                            std::to_string(c));
      }
      const std::size_t prefix = cur[c].numel();
      if (!std::equal(cur[c].data.begin(), cur[c].data.end(),
                      next[c].data.begin(), next[c].data.begin() + prefix)) {
        throw ContractError("incremental_finetune: stage " +
                            std::to_string(t + 1) +
                            " support is not nested for category " +
                            std::to_string(c));
      }
    }
  }

  if (!net.has_novel_stream()) net.duplicate_top_blocks(n_top);
  if (!net.classifier().w_novel) {
    imprint_novel(net, stage_supports.front(), imprint_type);
  }

  std::vector<TrainHistory> histories;
  for (std::size_t t = 0; t < stage_supports.size(); ++t) {
    histories.push_back(finetune_stage2(net, stage_supports[t], opt, loss, aug,
                                        t == 0 ? seed : mix_seed(seed, t)));
    if (on_stage) on_stage(t);
  }
  return histories;
}

}  // namespace geofew
