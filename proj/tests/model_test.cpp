#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "geofew/model.hpp"
#include "geofew/rng.hpp"
#include "support/gradcheck.hpp"

using geofew::BlockNetwork;
using geofew::BlockSpec;
using geofew::Stream;
using geofew::Tape;
using geofew::Tensor;

namespace {

BlockSpec small_spec() {
  BlockSpec spec;
  spec.input_dim = 6;
  spec.blocks = {{8}, {8}, {5}};
  return spec;
}

Tensor random_batch(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor x({rows, cols}, 0.0);
  gradcheck::fill_random(x, rng);
  return x;
}

std::string read_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("block spec validation") {
  BlockSpec spec = small_spec();
  CHECK_NOTHROW(spec.validate());
  CHECK(spec.feature_dim() == 5);
  CHECK(spec.layer_count() == 3);

  spec.blocks.clear();
  CHECK_THROWS_AS(spec.validate(), geofew::ConfigError);

  spec = small_spec();
  spec.dropout_rate = 0.5;  // last block has one layer: nowhere to put it
  CHECK_THROWS_AS(spec.validate(), geofew::ConfigError);
  spec.blocks.back() = {8, 5};
  CHECK_NOTHROW(spec.validate());
}

TEST_CASE("identity-initialized single layer passes input through") {
  BlockSpec spec;
  spec.input_dim = 3;
  spec.blocks = {{3}, {3}};
  BlockNetwork net(spec, 2, 1);
  // make both layers the identity
  for (auto& block : net.mutable_blocks())
    for (auto& layer : block.layers) {
      std::fill(layer.weight.data.begin(), layer.weight.data.end(), 0.0);
      for (std::size_t i = 0; i < 3; ++i) layer.weight.at(i, i) = 1.0;
      std::fill(layer.bias.data.begin(), layer.bias.data.end(), 0.0);
    }
  Tensor x = Tensor::matrix(2, 3, {0.5, 0.25, 1.0, 2.0, 0.125, 0.75});
  const Tensor y = net.forward_base(x);
  CHECK(y.data == x.data);  // positive inputs pass relu unchanged
}

TEST_CASE("eval-mode forward is deterministic") {
  BlockNetwork net(small_spec(), 4, 9);
  const Tensor x = random_batch(5, 6, 3);
  const Tensor y1 = net.forward_base(x);
  const Tensor y2 = net.forward_base(x);
  CHECK(y1.data == y2.data);
}

TEST_CASE("train-mode dropout is reproducible under a fixed seed") {
  BlockSpec spec;
  spec.input_dim = 6;
  spec.blocks = {{8}, {8, 5}};
  spec.dropout_rate = 0.5;
  BlockNetwork net(spec, 4, 9);
  const Tensor x = random_batch(7, 6, 4);

  std::vector<double> first, second;
  for (int run = 0; run < 2; ++run) {
    Tape tape;
    std::mt19937_64 rng(77);
    Tensor& y = net.forward_on_tape(tape, x, Stream::kBase, true, &rng);
    (run == 0 ? first : second) = y.data;
  }
  CHECK(first == second);

  // and differs from the eval path (a mask actually fired)
  const Tensor eval_out = net.forward_base(x);
  CHECK(first != eval_out.data);
}

TEST_CASE("tape and eval forwards agree bit for bit") {
  BlockNetwork net(small_spec(), 4, 5);
  const Tensor x = random_batch(6, 6, 8);
  Tape tape;
  Tensor& tape_out = net.forward_on_tape(tape, x, Stream::kBase, false, nullptr);
  const Tensor eval_out = net.forward_base(x);
  CHECK(tape_out.data == eval_out.data);
}

TEST_CASE("top-block duplication") {
  BlockNetwork net(small_spec(), 4, 11);
  const Tensor x = random_batch(4, 6, 21);

  SUBCASE("novel stream before duplication is a state error") {
    CHECK_THROWS_AS(net.forward_novel(x), geofew::StateError);
  }

  SUBCASE("n_top must leave a frozen bottom block") {
    CHECK_THROWS_AS(net.duplicate_top_blocks(0), geofew::ConfigError);
    CHECK_THROWS_AS(net.duplicate_top_blocks(3), geofew::ConfigError);
  }

  SUBCASE("copy is exact and does not disturb the source") {
    const std::uint64_t checksum_before = net.base_checksum();
    net.duplicate_top_blocks(1);
    CHECK(net.base_checksum() == checksum_before);
    CHECK(net.recorded_base_checksum() == checksum_before);

    const Tensor base_out = net.forward_base(x);
    const Tensor novel_out = net.forward_novel(x);
    CHECK(base_out.data == novel_out.data);  // max abs diff exactly 0
  }

  SUBCASE("novel-side updates leave the base stream fixed") {
    net.duplicate_top_blocks(1);
    const Tensor base_before = net.forward_base(x);
    for (Tensor* p : net.novel_top_params())
      for (double& v : p->data) v += 0.01;
    const Tensor base_after = net.forward_base(x);
    const Tensor novel_after = net.forward_novel(x);
    CHECK(base_before.data == base_after.data);
    CHECK(novel_after.data != base_after.data);
  }
}

TEST_CASE("stage-2 gradients flow only into the novel side") {
  BlockNetwork net(small_spec(), 3, 13);
  net.duplicate_top_blocks(1);
  net.classifier().w_novel = Tensor({net.feature_dim(), 2}, 0.1);
  std::mt19937_64 rng(31);
  gradcheck::fill_random(*net.classifier().w_novel, rng);
  net.set_stage2_trainable();

  const Tensor x = random_batch(4, 6, 77);
  Tape tape;
  Tensor& features = net.forward_on_tape(tape, x, Stream::kNovel, false,
                                         nullptr);
  Tensor& scores = tape.matmul(tape.l2_normalize_rows(features),
                               tape.l2_normalize_cols(*net.classifier().w_novel));
  Tensor& loss = tape.sum(scores);
  tape.backward(loss);

  // novel top got gradient mass
  double novel_mass = 0.0;
  for (Tensor* p : net.novel_top_params())
    for (double g : p->grad) novel_mass += std::abs(g);
  CHECK(novel_mass > 0.0);
  for (double g : net.classifier().w_novel->grad) novel_mass += std::abs(g);
  CHECK(novel_mass > 0.0);

  // frozen parameters have no gradient buffers at all
  for (Tensor* p : net.all_block_params()) CHECK(p->grad.empty());
  CHECK(net.classifier().w_base.grad.empty());
  CHECK(net.classifier().scale.value.grad.empty());
}

TEST_CASE("two-stream scores") {
  BlockNetwork net(small_spec(), 4, 17);
  const Tensor x = random_batch(3, 6, 5);

  SUBCASE("novel weights must exist") {
    net.duplicate_top_blocks(1);
    CHECK_THROWS_AS(net.scores_two_stream(x), geofew::StateError);
  }

  SUBCASE("column layout and cosine range") {
    net.duplicate_top_blocks(1);
    net.classifier().w_novel = Tensor({net.feature_dim(), 2}, 0.0);
    std::mt19937_64 rng(3);
    gradcheck::fill_random(*net.classifier().w_novel, rng);

    const Tensor scores = net.scores_two_stream(x);
    CHECK(scores.shape() == std::vector<std::size_t>{3, 6});
    for (double v : scores.data) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
    }

    // base columns equal the base-only scores (shared frozen path)
    const Tensor base_scores = net.scores_base(x);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 4; ++j)
        CHECK(scores.at(i, j) == base_scores.at(i, j));
  }

  SUBCASE("zero novel categories reduce to base-only classification") {
    net.duplicate_top_blocks(1);
    net.classifier().w_novel = Tensor({net.feature_dim(), 0});
    const Tensor scores = net.scores_two_stream(x);
    CHECK(scores.data == net.scores_base(x).data);
    CHECK(scores.cols() == 4);
  }

  SUBCASE("prediction is invariant to positive column rescaling") {
    net.duplicate_top_blocks(1);
    net.classifier().w_novel = Tensor({net.feature_dim(), 2}, 0.0);
    std::mt19937_64 rng(41);
    gradcheck::fill_random(*net.classifier().w_novel, rng);

    const Tensor before = net.scores_two_stream(x);
    for (std::size_t i = 0; i < net.feature_dim(); ++i)
      net.classifier().w_novel->at(i, 1) *= 8.0;  // power of two: exact
    const Tensor after = net.scores_two_stream(x);
    CHECK(before.data == after.data);
  }
}

TEST_CASE("checkpoint round-trips byte-exactly") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "geofew_model_test";
  fs::create_directories(dir);
  const std::string path1 = (dir / "net1.ckpt").string();
  const std::string path2 = (dir / "net2.ckpt").string();

  SUBCASE("stage-1 network") {
    BlockNetwork net(small_spec(), 4, 23);
    geofew::save_checkpoint(net, path1, 0xabcdef, 23);
    auto loaded = geofew::load_checkpoint(path1);
    CHECK(loaded.config_hash == 0xabcdef);
    CHECK(loaded.seed == 23);
    geofew::save_checkpoint(loaded.net, path2, 0xabcdef, 23);
    CHECK(read_bytes(path1) == read_bytes(path2));

    const Tensor x = random_batch(3, 6, 2);
    CHECK(net.forward_base(x).data == loaded.net.forward_base(x).data);
  }

  SUBCASE("stage-2 network with novel stream") {
    BlockNetwork net(small_spec(), 4, 29);
    net.duplicate_top_blocks(1);
    net.classifier().w_novel = Tensor({net.feature_dim(), 3}, 0.25);
    for (Tensor* p : net.novel_top_params())
      for (double& v : p->data) v *= 1.5;
    geofew::save_checkpoint(net, path1, 7, 29);
    auto loaded = geofew::load_checkpoint(path1);
    CHECK(loaded.net.n_novel() == 3);
    CHECK(loaded.net.n_top() == 1);
    geofew::save_checkpoint(loaded.net, path2, 7, 29);
    CHECK(read_bytes(path1) == read_bytes(path2));

    const Tensor x = random_batch(3, 6, 2);
    CHECK(net.forward_novel(x).data == loaded.net.forward_novel(x).data);
    CHECK(net.scores_two_stream(x).data ==
          loaded.net.scores_two_stream(x).data);
  }

  SUBCASE("missing file and bad header are parse errors") {
    CHECK_THROWS_AS(geofew::load_checkpoint((dir / "absent.ckpt").string()),
                    geofew::ParseError);
    const std::string bad = (dir / "bad.ckpt").string();
    std::ofstream(bad) << "not json\n";
    CHECK_THROWS_AS(geofew::load_checkpoint(bad), geofew::ParseError);
  }
}

TEST_CASE("base checksum tracks every frozen parameter") {
  BlockNetwork net(small_spec(), 4, 31);
  const std::uint64_t before = net.base_checksum();

  net.mutable_blocks()[0].layers[0].weight.data[0] += 1e-12;
  CHECK(net.base_checksum() != before);
  net.mutable_blocks()[0].layers[0].weight.data[0] -= 1e-12;

  net.classifier().w_base.data[3] += 1.0;
  CHECK(net.base_checksum() != before);
  net.classifier().w_base.data[3] -= 1.0;

  net.classifier().scale.value.data[0] += 0.5;
  CHECK(net.base_checksum() != before);
}
