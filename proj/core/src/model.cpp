#include "geofew/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "geofew/rng.hpp"
#include "json.hpp"

namespace geofew {

namespace {

using json = nlohmann::json;

constexpr int kCheckpointVersion = 1;

std::uint64_t fnv1a_doubles(std::uint64_t hash, const std::vector<double>& v) {
  for (double x : v) {
    std::uint64_t bits;
    std::memcpy(&bits, &x, sizeof(bits));
    for (int b = 0; b < 8; ++b) {
      hash ^= (bits >> (8 * b)) & 0xffULL;
      hash *= 0x100000001b3ULL;
    }
  }
  return hash;
}

void write_f64_le(std::ostream& os, const std::vector<double>& values) {
  for (double x : values) {
    std::uint64_t bits;
    std::memcpy(&bits, &x, sizeof(bits));
    unsigned char buf[8];
    for (int b = 0; b < 8; ++b)
      buf[b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xffULL);
    os.write(reinterpret_cast<const char*>(buf), 8);
  }
}

std::vector<double> read_f64_le(std::istream& is, std::size_t count) {
  std::vector<double> values(count);
  for (std::size_t i = 0; i < count; ++i) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    if (!is) throw ParseError("checkpoint: truncated float array");
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b)
      bits |= static_cast<std::uint64_t>(buf[b]) << (8 * b);
    double x;
    std::memcpy(&x, &bits, sizeof(x));
    values[i] = x;
  }
  return values;
}

struct LayerRef {
  Tensor* weight;
  Tensor* bias;
  bool relu_after;
  bool dropout_after;
};

}  // namespace

// ---------------------------------------------------------------------------
// BlockSpec

void BlockSpec::validate() const {
  if (input_dim == 0) throw ConfigError("BlockSpec: input_dim must be > 0");
  if (blocks.empty()) throw ConfigError("BlockSpec: at least one block");
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    if (blocks[b].empty()) {
      throw ConfigError("BlockSpec: block " + std::to_string(b) +
                        " has no layers");
    }
    for (std::size_t w : blocks[b]) {
      if (w == 0) {
        throw ConfigError("BlockSpec: zero-width layer in block " +
                          std::to_string(b));
      }
    }
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw ConfigError("BlockSpec: dropout_rate outside [0, 1)");
  }
  if (dropout_rate > 0.0 && (blocks.back().size() < 2 || layer_count() < 2)) {
    throw ConfigError(
        "BlockSpec: dropout follows the penultimate linear layer, so the last "
        "block needs at least two layers");
  }
}

std::size_t BlockSpec::feature_dim() const { return blocks.back().back(); }

std::size_t BlockSpec::layer_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.size();
  return n;
}

// ---------------------------------------------------------------------------
// BlockNetwork

BlockNetwork::BlockNetwork(BlockSpec spec, std::size_t n_base,
                           std::uint64_t seed)
    : spec_(std::move(spec)) {
  spec_.validate();
  if (n_base == 0) throw ConfigError("BlockNetwork: n_base must be > 0");

  std::mt19937_64 rng(mix_seed(seed, 0x6c6179657273ULL));
  auto init_uniform = [&rng](Tensor& t, double bound) {
    for (double& x : t.data) x = (2.0 * rand_uniform01(rng) - 1.0) * bound;
  };

  std::size_t in = spec_.input_dim;
  for (const auto& widths : spec_.blocks) {
    Block block;
    for (std::size_t out : widths) {
      LinearLayer layer;
      layer.weight = Tensor({in, out});
      layer.bias = Tensor({out});
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      init_uniform(layer.weight, bound);
      init_uniform(layer.bias, bound);
      block.layers.push_back(std::move(layer));
      in = out;
    }
    blocks_.push_back(std::move(block));
  }

  classifier_.w_base = Tensor({spec_.feature_dim(), n_base});
  init_uniform(classifier_.w_base,
               1.0 / std::sqrt(static_cast<double>(spec_.feature_dim())));
  classifier_.scale.value = Tensor::scalar(10.0);
  classifier_.scale.learnable = true;
}

std::size_t BlockNetwork::n_base() const { return classifier_.w_base.cols(); }

std::size_t BlockNetwork::n_novel() const {
  return classifier_.w_novel ? classifier_.w_novel->cols() : 0;
}

std::size_t BlockNetwork::bottom_block_count() const {
  return blocks_.size() - n_top_;
}

void BlockNetwork::duplicate_top_blocks(std::size_t n_top) {
  if (has_novel_stream()) {
    throw StateError("duplicate_top_blocks: novel stream already exists");
  }
  if (n_top < 1 || n_top >= blocks_.size()) {
    throw ConfigError("duplicate_top_blocks: n_top " + std::to_string(n_top) +
                      " must leave at least one frozen bottom block (have " +
                      std::to_string(blocks_.size()) + " blocks)");
  }
  n_top_ = n_top;
  top_novel_.assign(blocks_.end() - static_cast<std::ptrdiff_t>(n_top),
                    blocks_.end());
  for (Block& block : top_novel_)
    for (LinearLayer& layer : block.layers) {
      layer.weight.set_requires_grad(false);
      layer.bias.set_requires_grad(false);
    }
  recorded_checksum_ = base_checksum();
}

void BlockNetwork::set_n_top_for_load(std::size_t n_top,
                                      std::vector<Block> novel_top) {
  n_top_ = n_top;
  top_novel_ = std::move(novel_top);
  recorded_checksum_ = base_checksum();
}

Tensor& BlockNetwork::forward_on_tape(Tape& tape, const Tensor& x,
                                      Stream stream, bool train,
                                      std::mt19937_64* rng) {
  if (!x.is_matrix() || x.cols() != spec_.input_dim) {
    throw ShapeError("forward: input " + shape_string(x) +
                     " does not match input_dim " +
                     std::to_string(spec_.input_dim));
  }
  Tensor& input = tape.leaf(x.shape(), x.data, false);
  if (stream == Stream::kNovel && !has_novel_stream()) {
    throw StateError("forward: novel stream requested before duplication");
  }

  const std::size_t total_layers = spec_.layer_count();
  std::size_t global = 0;
  Tensor* h = &input;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const bool use_novel =
        stream == Stream::kNovel && b >= bottom_block_count();
    Block& block =
        use_novel ? top_novel_[b - bottom_block_count()] : blocks_[b];
    for (LinearLayer& layer : block.layers) {
      h = &tape.add_bias(tape.matmul(*h, layer.weight), layer.bias);
      const bool last_layer = (global == total_layers - 1);
      if (!last_layer) h = &tape.relu(*h);
      const bool penultimate = (global + 2 == total_layers);
      if (penultimate && spec_.dropout_rate > 0.0 && train) {
        if (rng == nullptr) {
          throw ContractError("forward: dropout needs an rng in train mode");
        }
        h = &tape.dropout(*h, spec_.dropout_rate, *rng);
      }
      ++global;
    }
  }
  return *h;
}

Tensor& BlockNetwork::forward_top_on_tape(Tape& tape, Tensor& bottom_features,
                                          Stream stream, bool train,
                                          std::mt19937_64* rng) {
  if (!has_novel_stream()) {
    throw StateError("forward_top_on_tape: duplication has not happened");
  }
  const std::size_t total_layers = spec_.layer_count();
  std::size_t global = 0;
  for (std::size_t b = 0; b < bottom_block_count(); ++b)
    global += blocks_[b].layers.size();

  Tensor* h = &bottom_features;
  for (std::size_t b = bottom_block_count(); b < blocks_.size(); ++b) {
    Block& block = stream == Stream::kNovel
                       ? top_novel_[b - bottom_block_count()]
                       : blocks_[b];
    for (LinearLayer& layer : block.layers) {
      h = &tape.add_bias(tape.matmul(*h, layer.weight), layer.bias);
      const bool last_layer = (global == total_layers - 1);
      if (!last_layer) h = &tape.relu(*h);
      const bool penultimate = (global + 2 == total_layers);
      if (penultimate && spec_.dropout_rate > 0.0 && train) {
        if (rng == nullptr) {
          throw ContractError("forward: dropout needs an rng in train mode");
        }
        h = &tape.dropout(*h, spec_.dropout_rate, *rng);
      }
      ++global;
    }
  }
  return *h;
}

Tensor BlockNetwork::forward_base(const Tensor& x) const {
  Tape tape;
  auto& self = const_cast<BlockNetwork&>(*this);
  Tensor& out = self.forward_on_tape(tape, x, Stream::kBase, false, nullptr);
  return Tensor::matrix(out.rows(), out.cols(), out.data);
}

Tensor BlockNetwork::forward_novel(const Tensor& x) const {
  Tape tape;
  auto& self = const_cast<BlockNetwork&>(*this);
  Tensor& out = self.forward_on_tape(tape, x, Stream::kNovel, false, nullptr);
  return Tensor::matrix(out.rows(), out.cols(), out.data);
}

Tensor BlockNetwork::forward_bottom(const Tensor& x) const {
  if (!has_novel_stream()) {
    throw StateError("forward_bottom: duplication has not happened");
  }
  if (!x.is_matrix() || x.cols() != spec_.input_dim) {
    throw ShapeError("forward_bottom: input " + shape_string(x) +
                     " does not match input_dim " +
                     std::to_string(spec_.input_dim));
  }
  Tape tape;
  auto& self = const_cast<BlockNetwork&>(*this);
  Tensor& input = tape.leaf(x.shape(), x.data, false);
  Tensor* h = &input;
  for (std::size_t b = 0; b < bottom_block_count(); ++b) {
    for (LinearLayer& layer : self.blocks_[b].layers) {
      h = &tape.add_bias(tape.matmul(*h, layer.weight), layer.bias);
      // never the network's last layer: the top has at least one block
      h = &tape.relu(*h);
    }
  }
  return Tensor::matrix(h->rows(), h->cols(), h->data);
}

Tensor BlockNetwork::scores_base(const Tensor& x) const {
  const Tensor features = forward_base(x);
  Tape tape;
  Tensor& f = tape.leaf(features.shape(), features.data, false);
  Tensor& w = tape.leaf(classifier_.w_base.shape(), classifier_.w_base.data,
                        false);
  Tensor& scores =
      tape.matmul(tape.l2_normalize_rows(f), tape.l2_normalize_cols(w));
  return Tensor::matrix(scores.rows(), scores.cols(), scores.data);
}

Tensor BlockNetwork::scores_two_stream(const Tensor& x) const {
  if (!classifier_.w_novel) {
    throw StateError("scores_two_stream: novel weights are absent");
  }
  if (classifier_.w_novel->cols() == 0) {
    return scores_base(x);  // no novel categories yet
  }
  const Tensor f_base = forward_base(x);
  const Tensor f_novel = forward_novel(x);
  Tape tape;
  Tensor& fb = tape.leaf(f_base.shape(), f_base.data, false);
  Tensor& fn = tape.leaf(f_novel.shape(), f_novel.data, false);
  Tensor& wb = tape.leaf(classifier_.w_base.shape(), classifier_.w_base.data,
                         false);
  Tensor& wn = tape.leaf(classifier_.w_novel->shape(),
                         classifier_.w_novel->data, false);
  Tensor& base_scores =
      tape.matmul(tape.l2_normalize_rows(fb), tape.l2_normalize_cols(wb));
  Tensor& novel_scores =
      tape.matmul(tape.l2_normalize_rows(fn), tape.l2_normalize_cols(wn));
  Tensor& both = tape.concat_cols(base_scores, novel_scores);
  return Tensor::matrix(both.rows(), both.cols(), both.data);
}

std::vector<Tensor*> BlockNetwork::all_block_params() {
  std::vector<Tensor*> params;
  for (Block& block : blocks_)
    for (LinearLayer& layer : block.layers) {
      params.push_back(&layer.weight);
      params.push_back(&layer.bias);
    }
  return params;
}

std::vector<Tensor*> BlockNetwork::novel_top_params() {
  std::vector<Tensor*> params;
  for (Block& block : top_novel_)
    for (LinearLayer& layer : block.layers) {
      params.push_back(&layer.weight);
      params.push_back(&layer.bias);
    }
  return params;
}

void BlockNetwork::clear_grad_flags() {
  for (Tensor* t : all_block_params()) t->set_requires_grad(false);
  for (Tensor* t : novel_top_params()) t->set_requires_grad(false);
  classifier_.w_base.set_requires_grad(false);
  if (classifier_.w_novel) classifier_.w_novel->set_requires_grad(false);
  classifier_.scale.value.set_requires_grad(false);
}

void BlockNetwork::set_stage1_trainable() {
  clear_grad_flags();
  for (Tensor* t : all_block_params()) t->set_requires_grad(true);
  classifier_.w_base.set_requires_grad(true);
  classifier_.scale.learnable = true;
  classifier_.scale.value.set_requires_grad(true);
}

void BlockNetwork::set_stage2_trainable() {
  if (!has_novel_stream()) {
    throw StateError("set_stage2_trainable: duplication has not happened");
  }
  if (!classifier_.w_novel) {
    throw StateError("set_stage2_trainable: novel weights are absent");
  }
  clear_grad_flags();
  for (Tensor* t : novel_top_params()) t->set_requires_grad(true);
  classifier_.w_novel->set_requires_grad(true);
  classifier_.scale.learnable = false;
}

std::uint64_t BlockNetwork::base_checksum() const {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (const Block& block : blocks_)
    for (const LinearLayer& layer : block.layers) {
      hash = fnv1a_doubles(hash, layer.weight.data);
      hash = fnv1a_doubles(hash, layer.bias.data);
    }
  hash = fnv1a_doubles(hash, classifier_.w_base.data);
  hash = fnv1a_doubles(hash, classifier_.scale.value.data);
  return hash;
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

void append_array(json& dir, std::vector<const Tensor*>& order,
                  const std::string& name, const Tensor& t) {
  json entry;
  entry["name"] = name;
  entry["shape"] = t.shape();
  dir.push_back(entry);
  order.push_back(&t);
}

void directory_for(const BlockNetwork& net, json& dir,
                   std::vector<const Tensor*>& order) {
  const auto& blocks = net.blocks();
  for (std::size_t b = 0; b < blocks.size(); ++b)
    for (std::size_t l = 0; l < blocks[b].layers.size(); ++l) {
      const std::string stem =
          "block" + std::to_string(b) + ".layer" + std::to_string(l);
      append_array(dir, order, stem + ".weight", blocks[b].layers[l].weight);
      append_array(dir, order, stem + ".bias", blocks[b].layers[l].bias);
    }
  const auto& novel = net.novel_top();
  for (std::size_t b = 0; b < novel.size(); ++b)
    for (std::size_t l = 0; l < novel[b].layers.size(); ++l) {
      const std::string stem =
          "novel_top" + std::to_string(b) + ".layer" + std::to_string(l);
      append_array(dir, order, stem + ".weight", novel[b].layers[l].weight);
      append_array(dir, order, stem + ".bias", novel[b].layers[l].bias);
    }
  append_array(dir, order, "w_base", net.classifier().w_base);
  if (net.classifier().w_novel)
    append_array(dir, order, "w_novel", *net.classifier().w_novel);
  append_array(dir, order, "scale", net.classifier().scale.value);
}

}  // namespace

void save_checkpoint(const BlockNetwork& net, const std::string& path,
                     std::uint64_t config_hash, std::uint64_t seed) {
  json header;
  header["format_version"] = kCheckpointVersion;
  header["input_dim"] = net.spec().input_dim;
  header["blocks"] = net.spec().blocks;
  header["dropout_rate"] = net.spec().dropout_rate;
  header["n_base"] = net.n_base();
  header["n_novel"] = net.n_novel();
  header["n_top"] = net.n_top();
  header["feature_dim"] = net.feature_dim();
  header["s"] = net.classifier().scale.value.data[0];
  header["config_hash"] = config_hash;
  header["seed"] = seed;

  json dir = json::array();
  std::vector<const Tensor*> order;
  directory_for(net, dir, order);
  header["arrays"] = dir;

  std::ofstream os(path, std::ios::binary);
  if (!os) throw ParseError("checkpoint: cannot open '" + path + "' to write");
  os << header.dump() << "\n";
  for (const Tensor* t : order) write_f64_le(os, t->data);
  if (!os) throw ParseError("checkpoint: write to '" + path + "' failed");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("checkpoint: cannot open '" + path + "'");
  std::string header_line;
  if (!std::getline(is, header_line)) {
    throw ParseError("checkpoint: missing header line in '" + path + "'");
  }
  json header;
  try {
    header = json::parse(header_line);
  } catch (const json::exception& e) {
    throw ParseError("checkpoint: bad header in '" + path + "': " + e.what());
  }
  if (header.value("format_version", -1) != kCheckpointVersion) {
    throw ParseError("checkpoint: unsupported format_version in '" + path +
                     "'");
  }

  BlockSpec spec;
  spec.input_dim = header.at("input_dim").get<std::size_t>();
  spec.blocks = header.at("blocks").get<std::vector<std::vector<std::size_t>>>();
  spec.dropout_rate = header.at("dropout_rate").get<double>();

  const auto n_base = header.at("n_base").get<std::size_t>();
  const auto n_novel = header.at("n_novel").get<std::size_t>();
  const auto n_top = header.at("n_top").get<std::size_t>();
  const auto seed = header.at("seed").get<std::uint64_t>();

  LoadedCheckpoint loaded{BlockNetwork(spec, n_base, seed),
                          header.at("config_hash").get<std::uint64_t>(), seed};
  BlockNetwork& net = loaded.net;

  std::vector<Block> novel_top;
  if (n_top > 0) {
    novel_top.assign(net.blocks().end() - static_cast<std::ptrdiff_t>(n_top),
                     net.blocks().end());
  }
  if (n_novel > 0) {
    net.classifier().w_novel = Tensor({net.feature_dim(), n_novel});
  }

  // Rebuild the expected directory over the fresh net and require the header
  // to match it name-for-name, then fill arrays in declared order.
  std::vector<std::pair<std::string, Tensor*>> expected;
  for (std::size_t b = 0; b < net.mutable_blocks().size(); ++b)
    for (std::size_t l = 0; l < net.mutable_blocks()[b].layers.size(); ++l) {
      const std::string stem =
          "block" + std::to_string(b) + ".layer" + std::to_string(l);
      expected.emplace_back(stem + ".weight",
                            &net.mutable_blocks()[b].layers[l].weight);
      expected.emplace_back(stem + ".bias",
                            &net.mutable_blocks()[b].layers[l].bias);
    }
  for (std::size_t b = 0; b < novel_top.size(); ++b)
    for (std::size_t l = 0; l < novel_top[b].layers.size(); ++l) {
      const std::string stem =
          "novel_top" + std::to_string(b) + ".layer" + std::to_string(l);
      expected.emplace_back(stem + ".weight", &novel_top[b].layers[l].weight);
      expected.emplace_back(stem + ".bias", &novel_top[b].layers[l].bias);
    }
  expected.emplace_back("w_base", &net.classifier().w_base);
  if (n_novel > 0) expected.emplace_back("w_novel", &*net.classifier().w_novel);
  expected.emplace_back("scale", &net.classifier().scale.value);

  const json& arrays = header.at("arrays");
  if (arrays.size() != expected.size()) {
    throw ParseError("checkpoint: array directory size mismatch in '" + path +
                     "'");
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const json& entry = arrays[i];
    const std::string name = entry.at("name").get<std::string>();
    if (name != expected[i].first) {
      throw ParseError("checkpoint: unexpected array '" + name +
                       "' (wanted '" + expected[i].first + "') in '" + path +
                       "'");
    }
    Tensor* target = expected[i].second;
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    std::size_t count = shape.empty() ? 0 : 1;
    for (std::size_t d : shape) count *= d;
    if (target->numel() != count) {
      throw ParseError("checkpoint: array '" + name + "' size mismatch in '" +
                       path + "'");
    }
    target->data = read_f64_le(is, count);
  }
  if (n_top > 0) net.set_n_top_for_load(n_top, std::move(novel_top));
  net.classifier().scale.learnable = false;
  net.clear_grad_flags();
  return loaded;
}

}  // namespace geofew
