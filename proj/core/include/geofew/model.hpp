#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "geofew/losses.hpp"
#include "geofew/tensor.hpp"

namespace geofew {

/// Feed-forward feature extractor layout: a list of blocks, each a list of
/// linear layer widths. ReLU follows every layer except the network's last.
/// When dropout_rate > 0, an inverted-dropout mask follows the penultimate
/// linear layer, which must therefore sit inside the last block.
struct BlockSpec {
  std::size_t input_dim = 0;
  std::vector<std::vector<std::size_t>> blocks;
  double dropout_rate = 0.0;

  void validate() const;
  std::size_t feature_dim() const;
  std::size_t layer_count() const;
};

struct LinearLayer {
  Tensor weight;  // in x out
  Tensor bias;    // {out}
};

struct Block {
  std::vector<LinearLayer> layers;
};

struct CosineClassifier {
  Tensor w_base;                  // d x n_base
  std::optional<Tensor> w_novel;  // d x n_novel, absent before stage 2
  ScaleParameter scale;
};

enum class Stream { kBase, kNovel };

/// Two-stream network: shared frozen bottom blocks, a base top that is frozen
/// after stage 1, and a novel top duplicated from it at stage-2 start.
class BlockNetwork {
 public:
  BlockNetwork(BlockSpec spec, std::size_t n_base, std::uint64_t seed);

  const BlockSpec& spec() const { return spec_; }
  std::size_t n_base() const;
  std::size_t n_novel() const;
  std::size_t feature_dim() const { return spec_.feature_dim(); }
  bool has_novel_stream() const { return !top_novel_.empty(); }
  std::size_t n_top() const { return n_top_; }

  CosineClassifier& classifier() { return classifier_; }
  const CosineClassifier& classifier() const { return classifier_; }

  /// Deep value-copy of the last n_top blocks into the novel top; records the
  /// base-side checksum against which later training runs are verified.
  void duplicate_top_blocks(std::size_t n_top);

  // --- deterministic eval-mode forwards (dropout off) ----------------------
  Tensor forward_base(const Tensor& x) const;
  Tensor forward_novel(const Tensor& x) const;
  /// Shared frozen prefix of both streams (everything below the duplicated
  /// blocks); requires duplication.
  Tensor forward_bottom(const Tensor& x) const;

  /// Cosine scores of forward_base features against normalized base columns.
  Tensor scores_base(const Tensor& x) const;
  /// Base cosine columns then novel cosine columns: M x (n_base + n_novel).
  /// No scale is applied; argmax over cosines is scale-invariant.
  Tensor scores_two_stream(const Tensor& x) const;

  // --- training-mode forwards on a tape ------------------------------------
  /// Full forward from the input batch. Dropout draws from rng when train is
  /// set and the spec has a dropout layer.
  Tensor& forward_on_tape(Tape& tape, const Tensor& x, Stream stream,
                          bool train, std::mt19937_64* rng);
  /// Forward from precomputed bottom features (leaf already on the tape)
  /// through the requested top; requires duplication.
  Tensor& forward_top_on_tape(Tape& tape, Tensor& bottom_features,
                              Stream stream, bool train, std::mt19937_64* rng);

  // --- parameter plumbing ---------------------------------------------------
  std::vector<Tensor*> all_block_params();
  std::vector<Tensor*> novel_top_params();
  void set_stage1_trainable();
  void set_stage2_trainable();
  void clear_grad_flags();

  /// FNV-1a over the bit patterns of every stage-2-frozen parameter: bottom
  /// blocks, base top blocks, base weights and the scale.
  std::uint64_t base_checksum() const;
  std::uint64_t recorded_base_checksum() const { return recorded_checksum_; }

  const std::vector<Block>& blocks() const { return blocks_; }
  std::vector<Block>& mutable_blocks() { return blocks_; }
  const std::vector<Block>& novel_top() const { return top_novel_; }
  std::vector<Block>& mutable_novel_top() { return top_novel_; }
  std::size_t bottom_block_count() const;

  void set_n_top_for_load(std::size_t n_top, std::vector<Block> novel_top);

 private:
  Tensor forward_blocks_eval(const Tensor& x, std::size_t first_block,
                             std::size_t last_block,
                             const std::vector<Block>* top_override) const;

  BlockSpec spec_;
  std::vector<Block> blocks_;      // bottom + base top, in order
  std::vector<Block> top_novel_;   // duplicated top blocks, empty before stage 2
  std::size_t n_top_ = 0;
  CosineClassifier classifier_;
  std::uint64_t recorded_checksum_ = 0;
};

/// Checkpoint: one-line JSON header (format version, layout, scale, config
/// hash, seed, array directory) followed by the raw little-endian float64
/// arrays in directory order. Round-trips byte-exactly.
void save_checkpoint(const BlockNetwork& net, const std::string& path,
                     std::uint64_t config_hash, std::uint64_t seed);

struct LoadedCheckpoint {
  BlockNetwork net;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace geofew
