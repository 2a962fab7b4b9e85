#pragma once

#include <cstdint>
#include <string>

#include "geofew/datasets.hpp"
#include "geofew/evaluation.hpp"
#include "geofew/losses.hpp"
#include "geofew/model.hpp"
#include "geofew/training.hpp"

namespace geofew {

/// One JSON document drives a whole run; unknown keys are rejected so typos
/// fail loudly. Every emitted artifact embeds the resolved form.
struct RunConfig {
  std::uint64_t seed = 7;

  BlobSpec data;
  std::size_t n_base = 10;  // first n_base categories are base, rest novel pool

  BlockSpec model;
  std::size_t n_top = 1;

  LossConfig loss;
  OptimizerConfig stage1;
  OptimizerConfig stage2;
  AugmentationConfig augment;
  EpisodeParams episodes;
  std::size_t n_episodes = 20;
  double p_base = 0.2;
  double p_novel = 0.8;

  void validate() const;

  /// Canonical JSON (sorted keys) of the resolved configuration.
  std::string resolved_json() const;
  /// FNV-1a over the canonical JSON; stamped into checkpoints.
  std::uint64_t hash() const;

  std::vector<int> base_ids() const;
  std::vector<int> novel_ids() const;
  EvalConfig eval_config() const;
};

/// Defaults for the synthetic desk-scale benchmark.
RunConfig default_run_config();

/// Parses and validates a config document. ParseError carries the JSON
/// location for malformed text; ConfigError names unknown or invalid keys.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

}  // namespace geofew
