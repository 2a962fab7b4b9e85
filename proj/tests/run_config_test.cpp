#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "geofew/run_config.hpp"

using geofew::RunConfig;

TEST_CASE("defaults validate and hash deterministically") {
  const RunConfig cfg = geofew::default_run_config();
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.hash() == geofew::default_run_config().hash());
  CHECK(cfg.resolved_json() == geofew::default_run_config().resolved_json());

  CHECK(cfg.loss.gamma == 1.0);
  CHECK(cfg.loss.alpha == 1.0);
  CHECK(cfg.loss.beta == 1.0);
  CHECK(cfg.loss.margin_m == 0.6);
  CHECK(cfg.p_base == 0.2);
  CHECK(cfg.p_novel == 0.8);
  CHECK(cfg.augment.target_total_per_category == 20);
  CHECK(cfg.stage2.iterations == 300);
}

TEST_CASE("partial documents override defaults") {
  const RunConfig cfg = geofew::parse_run_config(R"({
    "seed": 99,
    "data": {"n_categories": 12, "dim": 8, "train_per_category": 30,
             "val_per_category": 10, "test_per_category": 10},
    "n_base": 6,
    "model": {"blocks": [[16],[16]]},
    "loss": {"margin": 0.4, "beta": 0},
    "episodes": {"count": 5, "c_novel": 3, "k": 2}
  })");
  CHECK(cfg.seed == 99);
  CHECK(cfg.data.n_categories == 12);
  CHECK(cfg.data.dim == 8);
  CHECK(cfg.model.input_dim == 8);  // follows the data dim
  CHECK(cfg.n_base == 6);
  CHECK(cfg.loss.margin_m == 0.4);
  CHECK(cfg.loss.beta == 0.0);
  CHECK(cfg.n_episodes == 5);
  CHECK(cfg.episodes.c_novel == 3);
  CHECK(cfg.base_ids() == std::vector<int>{0, 1, 2, 3, 4, 5});
  CHECK(cfg.novel_ids().size() == 6);
}

TEST_CASE("unknown keys are rejected at every level") {
  CHECK_THROWS_WITH_AS(geofew::parse_run_config(R"({"sneed": 1})"),
                       doctest::Contains("sneed"), geofew::ConfigError);
  CHECK_THROWS_WITH_AS(
      geofew::parse_run_config(R"({"loss": {"margin_value": 0.5}})"),
      doctest::Contains("margin_value"), geofew::ConfigError);
  CHECK_THROWS_WITH_AS(
      geofew::parse_run_config(R"({"episodes": {"shots": 5}})"),
      doctest::Contains("shots"), geofew::ConfigError);
}

TEST_CASE("malformed json carries the parse location") {
  CHECK_THROWS_AS(geofew::parse_run_config("{\"seed\": }"),
                  geofew::ParseError);
  CHECK_THROWS_AS(geofew::parse_run_config(""), geofew::ParseError);
}

TEST_CASE("cross-field validation") {
  CHECK_THROWS_AS(geofew::parse_run_config(R"({"n_base": 18})"),
                  geofew::ConfigError);  // empty novel pool
  CHECK_THROWS_AS(
      geofew::parse_run_config(R"({"model": {"input_dim": 5}})"),
      geofew::ConfigError);  // disagrees with data dim
  CHECK_THROWS_AS(
      geofew::parse_run_config(R"({"episodes": {"c_novel": 9}})"),
      geofew::ConfigError);  // pool too small
  CHECK_THROWS_AS(
      geofew::parse_run_config(R"({"prior": {"p_base": 0.5, "p_novel": 0.6}})"),
      geofew::ConfigError);
  CHECK_THROWS_AS(geofew::parse_run_config(R"({"n_top": 4})"),
                  geofew::ConfigError);  // no bottom block left
}

TEST_CASE("planted pairs parse and reset with the data section") {
  // a custom data section drops the benchmark pairs unless it plants its own
  const RunConfig bare = geofew::parse_run_config(R"({
    "data": {"n_categories": 12, "dim": 8, "train_per_category": 30,
             "val_per_category": 10, "test_per_category": 10},
    "n_base": 6
  })");
  CHECK(bare.data.planted_pairs.empty());

  const RunConfig planted = geofew::parse_run_config(R"({
    "data": {"n_categories": 12, "dim": 8, "train_per_category": 30,
             "val_per_category": 10, "test_per_category": 10,
             "planted_pairs": [{"target": 11, "source": 10, "cosine": 0.92}]},
    "n_base": 6
  })");
  REQUIRE(planted.data.planted_pairs.size() == 1);
  CHECK(planted.data.planted_pairs[0].target == 11);
  CHECK(planted.data.planted_pairs[0].source == 10);
  CHECK(planted.data.planted_pairs[0].cosine == 0.92);

  CHECK_THROWS_WITH_AS(
      geofew::parse_run_config(R"({
        "data": {"planted_pairs": [{"target": 17, "victim": 3}]}
      })"),
      doctest::Contains("victim"), geofew::ConfigError);

  // a custom model resets the duplicated-block count to the minimal default
  const RunConfig shallow = geofew::parse_run_config(R"({
    "model": {"blocks": [[16], [16]]}
  })");
  CHECK(shallow.n_top == 1);
}

TEST_CASE("optimizer sections parse both kinds") {
  const RunConfig cfg = geofew::parse_run_config(R"({
    "stage1": {"optimizer": "sgd", "lr_extractor": 0.5},
    "stage2": {"optimizer": "adam", "iterations": 10}
  })");
  CHECK(cfg.stage1.kind == geofew::OptimizerKind::kSgd);
  CHECK(cfg.stage1.lr_extractor == 0.5);
  CHECK(cfg.stage2.kind == geofew::OptimizerKind::kAdam);
  CHECK(cfg.stage2.iterations == 10);
  CHECK_THROWS_AS(
      geofew::parse_run_config(R"({"stage1": {"optimizer": "lbfgs"}})"),
      geofew::ConfigError);
}

TEST_CASE("eval config mirrors the run settings") {
  RunConfig cfg = geofew::default_run_config();
  cfg.p_base = 0.3;
  cfg.p_novel = 0.7;
  const geofew::EvalConfig eval = cfg.eval_config();
  CHECK(eval.p_base == 0.3);
  CHECK(eval.n_top == cfg.n_top);
  CHECK(eval.loss.margin_m == cfg.loss.margin_m);
  CHECK(eval.opt.iterations == cfg.stage2.iterations);
}
