#include "geofew/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <mutex>
#include <sstream>
#include <thread>

#include "geofew/rng.hpp"

namespace geofew {

namespace {

int argmax_masked(const Tensor& scores, std::size_t row, std::size_t first,
                  std::size_t last) {
  int best = static_cast<int>(first);
  double best_v = scores.at(row, first);
  for (std::size_t j = first + 1; j < last; ++j) {
    if (scores.at(row, j) > best_v) {
      best_v = scores.at(row, j);
      best = static_cast<int>(j);
    }
  }
  return best;
}

double accuracy_in_range(const Tensor& scores, const std::vector<int>& labels,
                         std::size_t first, std::size_t last) {
  if (labels.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (argmax_masked(scores, i, first, last) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

void append_f64(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
  out += ',';
}

/// Scores an adapted network against an episode's query sets: restricted
/// novel/base accuracies, the full-union accuracy, and the prior-aware one.
EpisodeResult score_episode(const BlockNetwork& net, const Episode& episode,
                            double p_base, double p_novel) {
  EpisodeResult result;
  result.seed = episode.seed;

  const std::size_t n_base = net.n_base();
  const std::size_t n_novel = episode.novel_category_ids.size();

  std::vector<int> novel_labels;
  std::size_t novel_rows = 0;
  for (const Tensor& q : episode.query_novel) novel_rows += q.rows();
  Tensor novel_batch({novel_rows, net.spec().input_dim});
  std::size_t row = 0;
  for (std::size_t c = 0; c < n_novel; ++c) {
    const Tensor& q = episode.query_novel[c];
    std::copy(q.data.begin(), q.data.end(),
              novel_batch.data.begin() + row * net.spec().input_dim);
    for (std::size_t i = 0; i < q.rows(); ++i)
      novel_labels.push_back(static_cast<int>(n_base + c));
    row += q.rows();
  }

  const Tensor novel_scores = net.scores_two_stream(novel_batch);
  const Tensor base_scores = net.scores_two_stream(episode.query_base);

  std::size_t correct = 0;
  for (std::size_t i = 0; i < novel_labels.size(); ++i) {
    if (argmax_masked(novel_scores, i, n_base, n_base + n_novel) ==
        novel_labels[i]) {
      ++correct;
    }
  }
  result.acc_novel =
      static_cast<double>(correct) / static_cast<double>(novel_labels.size());

  result.acc_base =
      accuracy_in_range(base_scores, episode.query_base_labels, 0, n_base);

  auto both_accuracy = [&](const Tensor& base_s, const Tensor& novel_s) {
    std::size_t ok = 0, total = 0;
    for (std::size_t i = 0; i < episode.query_base_labels.size();
         ++i, ++total) {
      if (argmax_masked(base_s, i, 0, n_base + n_novel) ==
          episode.query_base_labels[i]) {
        ++ok;
      }
    }
    for (std::size_t i = 0; i < novel_labels.size(); ++i, ++total) {
      if (argmax_masked(novel_s, i, 0, n_base + n_novel) == novel_labels[i]) {
        ++ok;
      }
    }
    return static_cast<double>(ok) / static_cast<double>(total);
  };
  result.acc_both = both_accuracy(base_scores, novel_scores);

  const double s = net.classifier().scale.value.data[0];
  result.acc_both_prior = both_accuracy(
      apply_prior(base_scores, n_base, s, p_base, p_novel),
      apply_prior(novel_scores, n_base, s, p_base, p_novel));

  return result;
}

}  // namespace

// ---------------------------------------------------------------------------
// Episode sampling

void EpisodeParams::validate() const {
  if (c_novel == 0 || k == 0 || t_novel == 0 || t_base == 0) {
    throw ConfigError("EpisodeParams: all counts must be positive");
  }
}

std::string Episode::serialize() const {
  std::string out;
  out += "seed=" + std::to_string(seed) + ";ids=";
  for (int id : novel_category_ids) out += std::to_string(id) + ",";
  out += ";support=";
  for (const Tensor& t : support)
    for (double v : t.data) append_f64(out, v);
  out += ";query_novel=";
  for (const Tensor& t : query_novel)
    for (double v : t.data) append_f64(out, v);
  out += ";query_base=";
  for (double v : query_base.data) append_f64(out, v);
  out += ";query_base_labels=";
  for (int l : query_base_labels) out += std::to_string(l) + ",";
  return out;
}

Episode sample_episode(const DatasetView& novel_pool, const DatasetView& base,
                       const EpisodeParams& params, std::uint64_t seed) {
  params.validate();
  if (novel_pool.n_categories() < params.c_novel) {
    throw ContractError("sample_episode: novel pool has " +
                        std::to_string(novel_pool.n_categories()) +
                        " categories, need " + std::to_string(params.c_novel));
  }

  Episode episode;
  episode.seed = seed;
  std::mt19937_64 rng(mix_seed(seed, 0x657069ULL));

  // novel categories
  const auto cat_picks = sample_without_replacement(
      rng, novel_pool.n_categories(), params.c_novel);
  for (std::size_t p : cat_picks)
    episode.novel_category_ids.push_back(novel_pool.category_ids[p]);

  // disjoint support/query draws per novel category
  for (int id : episode.novel_category_ids) {
    const auto pool = novel_pool.indices(id, std::nullopt);
    if (pool.size() < params.k + params.t_novel) {
      throw ContractError("sample_episode: category " + std::to_string(id) +
                          " has " + std::to_string(pool.size()) +
                          " examples, need " +
                          std::to_string(params.k + params.t_novel));
    }
    const auto picks =
        sample_without_replacement(rng, pool.size(), params.k + params.t_novel);
    std::vector<std::size_t> support_rows, query_rows;
    for (std::size_t i = 0; i < params.k; ++i)
      support_rows.push_back(pool[picks[i]]);
    for (std::size_t i = params.k; i < picks.size(); ++i)
      query_rows.push_back(pool[picks[i]]);
    episode.support.push_back(novel_pool.gather(support_rows));
    episode.query_novel.push_back(novel_pool.gather(query_rows));
  }

  // base queries from the base test split
  std::vector<std::size_t> base_rows;
  for (std::size_t c = 0; c < base.category_ids.size(); ++c) {
    const auto pool = base.indices(base.category_ids[c], Split::kTest);
    if (pool.size() < params.t_base) {
      throw ContractError("sample_episode: base category " +
                          std::to_string(base.category_ids[c]) + " has " +
                          std::to_string(pool.size()) +
                          " test examples, need " +
                          std::to_string(params.t_base));
    }
    const auto picks =
        sample_without_replacement(rng, pool.size(), params.t_base);
    for (std::size_t p : picks) {
      base_rows.push_back(pool[p]);
      episode.query_base_labels.push_back(static_cast<int>(c));
    }
  }
  episode.query_base = base.gather(base_rows);
  return episode;
}

// ---------------------------------------------------------------------------
// Scoring

Tensor apply_prior(const Tensor& scores, std::size_t n_base, double scale,
                   double p_base, double p_novel) {
  if (p_base < 0.0 || p_novel < 0.0 ||
      std::abs(p_base + p_novel - 1.0) > 1e-9) {
    throw ConfigError("apply_prior: prior (" + std::to_string(p_base) + ", " +
                      std::to_string(p_novel) + ") is not a distribution");
  }
  if (n_base > scores.cols()) {
    throw ContractError("apply_prior: n_base exceeds column count");
  }
  const std::size_t m = scores.rows(), n = scores.cols();
  Tensor probs({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = scores.at(i, 0) * scale;
    for (std::size_t j = 1; j < n; ++j)
      mx = std::max(mx, scores.at(i, j) * scale);
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      probs.at(i, j) = std::exp(scores.at(i, j) * scale - mx);
      acc += probs.at(i, j);
    }
    double reweighted = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      probs.at(i, j) /= acc;
      probs.at(i, j) *= (j < n_base) ? p_base : p_novel;
      reweighted += probs.at(i, j);
    }
    for (std::size_t j = 0; j < n; ++j) probs.at(i, j) /= reweighted;
  }
  return probs;
}

EpisodeResult evaluate_episode(const BlockNetwork& snapshot,
                               const Episode& episode, EvalMode mode,
                               const EvalConfig& config) {
  BlockNetwork net = snapshot;  // private clone; the snapshot stays untouched
  net.duplicate_top_blocks(config.n_top);

  TrainHistory history;
  if (mode == EvalMode::kFinetune) {
    imprint_novel(net, episode.support, config.loss.wcfc_type_stage2);
    history = finetune_stage2(net, episode.support, config.opt, config.loss,
                              config.aug, episode.seed);
  } else {
    // no training: type-2 imprinting is the whole adaptation
    imprint_novel(net, episode.support, 2);
  }

  EpisodeResult result =
      score_episode(net, episode, config.p_base, config.p_novel);
  result.history = std::move(history);
  return result;
}

// ---------------------------------------------------------------------------
// Aggregation

MetricStats aggregate_metric(const std::vector<double>& values) {
  if (values.empty()) throw ContractError("aggregate: no episode results");
  MetricStats stats;
  stats.n = values.size();
  double acc = 0.0;
  for (double v : values) acc += v;
  stats.mean = acc / static_cast<double>(values.size());
  if (values.size() < 2) {
    stats.degenerate_n = true;
    return stats;
  }
  double ss = 0.0;
  for (double v : values) ss += (v - stats.mean) * (v - stats.mean);
  stats.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  stats.ci95 =
      1.96 * stats.stddev / std::sqrt(static_cast<double>(values.size()));
  return stats;
}

AggregateReport aggregate(const std::vector<EpisodeResult>& results) {
  if (results.empty()) throw ContractError("aggregate: no episode results");
  std::vector<double> novel, both, base, prior;
  for (const EpisodeResult& r : results) {
    novel.push_back(r.acc_novel);
    both.push_back(r.acc_both);
    base.push_back(r.acc_base);
    prior.push_back(r.acc_both_prior);
  }
  return {aggregate_metric(novel), aggregate_metric(both),
          aggregate_metric(base), aggregate_metric(prior)};
}

double topk_accuracy(const Tensor& scores, const std::vector<int>& labels,
                     std::size_t k) {
  const std::size_t m = scores.rows(), n = scores.cols();
  if (k < 1 || k > n) {
    throw ContractError("topk_accuracy: k " + std::to_string(k) +
                        " outside [1, " + std::to_string(n) + "]");
  }
  if (labels.size() != m) {
    throw ContractError("topk_accuracy: label count mismatch");
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const auto label = static_cast<std::size_t>(labels[i]);
    const double own = scores.at(i, label);
    std::size_t rank = 0;  // columns ranked strictly ahead of the label
    for (std::size_t j = 0; j < n; ++j) {
      if (scores.at(i, j) > own || (scores.at(i, j) == own && j < label)) {
        ++rank;
      }
    }
    if (rank < k) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(m);
}

// ---------------------------------------------------------------------------
// Diagnostics

FiveNumberSummary five_number_summary(std::vector<double> values) {
  if (values.empty()) {
    throw ContractError("five_number_summary: empty distribution");
  }
  std::sort(values.begin(), values.end());
  auto quantile = [&values](double q) {
    // linear interpolation between order statistics
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
  };
  return {values.front(), quantile(0.25), quantile(0.5), quantile(0.75),
          values.back()};
}

namespace {

std::vector<double> normalized_median(const Tensor& features) {
  const std::size_t k = features.rows(), d = features.cols();
  std::vector<double> median(d);
  std::vector<double> column(k);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < k; ++i) column[i] = features.at(i, j);
    std::sort(column.begin(), column.end());
    median[j] = (k % 2 == 1)
                    ? column[k / 2]
                    : 0.5 * (column[k / 2 - 1] + column[k / 2]);
  }
  double ss = 0.0;
  for (double x : median) ss += x * x;
  const double nrm = std::sqrt(ss);
  if (nrm <= kNormEpsilon) {
    throw DegenerateInputError("cosine_diagnostics: degenerate median");
  }
  for (double& x : median) x /= nrm;
  return median;
}

FiveNumberSummary pairwise_cosine_summary(
    const std::vector<std::vector<double>>& units) {
  std::vector<double> cosines;
  for (std::size_t a = 0; a < units.size(); ++a) {
    for (std::size_t b = a + 1; b < units.size(); ++b) {
      double dot = 0.0;
      for (std::size_t j = 0; j < units[a].size(); ++j)
        dot += units[a][j] * units[b][j];
      cosines.push_back(std::min(1.0, std::max(-1.0, dot)));
    }
  }
  if (cosines.empty()) cosines.push_back(1.0);  // single category: self only
  return five_number_summary(std::move(cosines));
}

}  // namespace

CosineDiagnostics cosine_diagnostics(const BlockNetwork& net,
                                     const DatasetView& base,
                                     const DatasetView& novel) {
  CosineDiagnostics diag;

  std::vector<double> within;
  std::vector<std::vector<double>> base_medians;
  for (int id : base.category_ids) {
    auto rows = base.indices(id, std::nullopt);
    if (rows.size() < 2) {
      diag.skipped_categories.push_back(id);
      continue;
    }
    const Tensor features = net.forward_base(base.gather(rows));
    // normalize rows once, then all pairs
    std::vector<std::vector<double>> units(features.rows());
    for (std::size_t i = 0; i < features.rows(); ++i) {
      units[i].resize(features.cols());
      double ss = 0.0;
      for (std::size_t j = 0; j < features.cols(); ++j)
        ss += features.at(i, j) * features.at(i, j);
      const double nrm = std::sqrt(std::max(ss, kNormEpsilon));
      for (std::size_t j = 0; j < features.cols(); ++j)
        units[i][j] = features.at(i, j) / nrm;
    }
    for (std::size_t a = 0; a < units.size(); ++a) {
      for (std::size_t b = a + 1; b < units.size(); ++b) {
        double dot = 0.0;
        for (std::size_t j = 0; j < units[a].size(); ++j)
          dot += units[a][j] * units[b][j];
        within.push_back(std::min(1.0, std::max(-1.0, dot)));
      }
    }
    base_medians.push_back(normalized_median(features));
  }
  if (within.empty()) {
    throw ContractError(
        "cosine_diagnostics: every base category has fewer than 2 examples");
  }
  diag.within_base = five_number_summary(std::move(within));
  diag.base_medians = pairwise_cosine_summary(base_medians);

  std::vector<std::vector<double>> novel_medians;
  for (int id : novel.category_ids) {
    auto rows = novel.indices(id, std::nullopt);
    if (rows.empty()) continue;
    const Tensor features = net.forward_base(novel.gather(rows));
    novel_medians.push_back(normalized_median(features));
  }
  diag.novel_medians = pairwise_cosine_summary(novel_medians);
  return diag;
}

// ---------------------------------------------------------------------------
// Episode fan-out

std::vector<EpisodeResult> run_episodes(const BlockNetwork& snapshot,
                                        const DatasetView& novel_pool,
                                        const DatasetView& base,
                                        const EpisodeParams& params,
                                        EvalMode mode, const EvalConfig& config,
                                        std::size_t n_episodes,
                                        std::uint64_t base_seed,
                                        std::size_t jobs) {
  if (n_episodes == 0) throw ContractError("run_episodes: zero episodes");
  jobs = std::max<std::size_t>(1, std::min(jobs, n_episodes));

  std::vector<EpisodeResult> results(n_episodes);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;

  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n_episodes) return;
      try {
        const Episode episode = sample_episode(novel_pool, base, params,
                                               mix_seed(base_seed, i));
        results[i] = evaluate_episode(snapshot, episode, mode, config);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };

  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t j = 0; j < jobs; ++j) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return results;
}

std::vector<IncrementalStageResult> evaluate_incremental(
    const BlockNetwork& snapshot, const Episode& episode,
    const std::vector<std::size_t>& schedule, const EvalConfig& config) {
  if (schedule.empty()) {
    throw ContractError("evaluate_incremental: empty schedule");
  }
  for (std::size_t t = 0; t + 1 < schedule.size(); ++t) {
    if (schedule[t] >= schedule[t + 1]) {
      throw ContractError("evaluate_incremental: schedule must increase");
    }
  }
  const std::size_t max_shots = schedule.back();
  for (const Tensor& support : episode.support) {
    if (support.rows() < max_shots) {
      throw ContractError("evaluate_incremental: episode has " +
                          std::to_string(support.rows()) +
                          " shots, schedule needs " +
                          std::to_string(max_shots));
    }
  }

  BlockNetwork net = snapshot;
  std::vector<std::vector<Tensor>> stage_supports;
  for (std::size_t shots : schedule) {
    std::vector<Tensor> supports;
    for (const Tensor& full : episode.support) {
      Tensor prefix({shots, full.cols()});
      std::copy(full.data.begin(), full.data.begin() + shots * full.cols(),
                prefix.data.begin());
      supports.push_back(std::move(prefix));
    }
    stage_supports.push_back(std::move(supports));
  }

  std::vector<IncrementalStageResult> out;
  std::vector<TrainHistory> histories = incremental_finetune(
      net, stage_supports, config.n_top, config.loss.wcfc_type_stage2,
      config.opt, config.loss, config.aug, episode.seed,
      [&](std::size_t stage) {
        // score with the carried-forward network after each stage
        out.push_back({schedule[stage], score_episode(net, episode,
                                                      config.p_base,
                                                      config.p_novel)});
      });

  for (std::size_t t = 0; t < out.size() && t < histories.size(); ++t) {
    out[t].result.history = std::move(histories[t]);
  }
  return out;
}

}  // namespace geofew
