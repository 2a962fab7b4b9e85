#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

#include "geofew/datasets.hpp"
#include "geofew/model.hpp"
#include "geofew/run_config.hpp"
#include "geofew/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const char* kTinyConfig = R"({
  "seed": 11,
  "data": {"n_categories": 8, "dim": 8, "train_per_category": 30,
           "val_per_category": 10, "test_per_category": 10,
           "max_pairwise_cosine": 0.4, "noise_sigma": 0.1},
  "n_base": 5,
  "model": {"blocks": [[16], [16]]},
  "n_top": 1,
  "stage1": {"epochs": 4, "batch_size": 64},
  "stage2": {"iterations": 15},
  "augment": {"target_total_per_category": 6, "jitter_sigma": 0.05},
  "episodes": {"count": 2, "c_novel": 2, "k": 2, "t_novel": 3, "t_base": 2}
})";

struct Workdir {
  fs::path dir;
  Workdir() {
    dir = fs::temp_directory_path() /
          ("geofew_cli_test_" + std::to_string(::getpid()));
    fs::create_directories(dir);
  }
  std::string path(const std::string& name) const {
    return (dir / name).string();
  }
};

int run(const std::string& args) {
  const std::string cmd =
      std::string(GEOFEW_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

int run_logged(const std::string& args, const std::string& log_path) {
  const std::string cmd = std::string(GEOFEW_CLI_PATH) + " " + args + " >" +
                          log_path + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string read_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::size_t line_count(const std::string& path) {
  std::ifstream is(path);
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line))
    if (!line.empty()) ++n;
  return n;
}

}  // namespace

TEST_CASE("cli pipeline") {
  Workdir work;
  const std::string config = work.path("config.json");
  std::ofstream(config) << kTinyConfig;
  const std::string data = work.path("data.csv");
  const std::string ckpt = work.path("net.ckpt");

  SUBCASE("bad invocations exit with the usage code") {
    CHECK(run("definitely-not-a-command") == 2);
    CHECK(run("gen-data") == 2);  // missing required flags

    const std::string broken = work.path("broken.json");
    std::ofstream(broken) << "{\"seed\": }";
    CHECK(run("gen-data --config " + broken + " --out " + data) == 2);

    const std::string unknown_key = work.path("unknown.json");
    std::ofstream(unknown_key) << "{\"sneed\": 5}";
    CHECK(run("gen-data --config " + unknown_key + " --out " + data) == 2);
  }

  SUBCASE("full run") {
    // gen-data is deterministic
    REQUIRE(run("gen-data --config " + config + " --out " + data) == 0);
    REQUIRE(fs::exists(data));
    const std::string second = work.path("data2.csv");
    REQUIRE(run("gen-data --config " + config + " --out " + second) == 0);
    CHECK(read_bytes(data) == read_bytes(second));

    // train-base writes a checkpoint and a per-step history
    const std::string train_log = work.path("train.log");
    REQUIRE(run_logged("train-base --config " + config + " --data " + data +
                           " --out-checkpoint " + ckpt,
                       train_log) == 0);
    REQUIRE(fs::exists(ckpt));
    const std::string history = ckpt + ".history.jsonl";
    REQUIRE(fs::exists(history));

    // the reported validation accuracy matches a recomputation from the
    // written checkpoint exactly
    {
      const std::string banner = read_bytes(train_log);
      const std::string needle = "final base val accuracy ";
      const std::size_t at = banner.find(needle);
      REQUIRE(at != std::string::npos);
      const double reported = std::stod(banner.substr(at + needle.size()));

      const geofew::RunConfig cfg = geofew::load_run_config(config);
      geofew::LabeledDataset dataset = geofew::load_csv(data);
      geofew::assign_splits(dataset, cfg.data.train_per_category,
                            cfg.data.val_per_category,
                            cfg.data.test_per_category);
      const auto split =
          geofew::split_base_novel(dataset, cfg.base_ids(), cfg.novel_ids());
      const auto loaded = geofew::load_checkpoint(ckpt);
      const double recomputed =
          geofew::base_accuracy(loaded.net, split.base, geofew::Split::kVal);
      CHECK(reported == recomputed);
    }
    // 150 train rows -> 3 batches per epoch, 4 epochs
    CHECK(line_count(history) == 12);
    {
      std::ifstream is(history);
      std::string line;
      while (std::getline(is, line)) {
        const json rec = json::parse(line);
        CHECK(rec.contains("step"));
        CHECK(rec.contains("L_cls"));
        CHECK(rec.contains("L_WCFC"));
        CHECK(rec.contains("L_AWS"));
        CHECK(rec.contains("aws_active"));
        CHECK(rec.contains("s"));
        CHECK(rec.contains("elapsed_ms"));
      }
    }

    // a single-episode evaluation flags its degenerate interval
    const std::string report1 = work.path("report1.json");
    REQUIRE(run("evaluate --checkpoint " + ckpt + " --config " + config +
                " --data " + data + " --episodes 1 --mode ablation --out " +
                report1) == 0);
    {
      const json report = json::parse(read_bytes(report1));
      CHECK(report.at("aggregate").at("novel").at("degenerate_n") == true);
      CHECK(report.at("aggregate").at("novel").at("ci95") == 0.0);
      CHECK(report.at("episodes").size() == 1);
      CHECK(report.at("config").at("seed") == 11);
    }

    // a uniform prior changes nothing
    const std::string no_prior = work.path("no_prior.json");
    const std::string uniform = work.path("uniform.json");
    REQUIRE(run("evaluate --checkpoint " + ckpt + " --config " + config +
                " --data " + data + " --mode ablation --out " + no_prior) == 0);
    REQUIRE(run("evaluate --checkpoint " + ckpt + " --config " + config +
                " --data " + data + " --mode ablation --prior 0.5 --out " +
                uniform) == 0);
    {
      const json a = json::parse(read_bytes(no_prior));
      const json b = json::parse(read_bytes(uniform));
      REQUIRE(a.at("episodes").size() == b.at("episodes").size());
      for (std::size_t i = 0; i < a.at("episodes").size(); ++i) {
        // same episodes either way, and the uniform prior leaves every
        // prediction where the raw argmax put it
        CHECK(a.at("episodes")[i].at("acc_both") ==
              b.at("episodes")[i].at("acc_both"));
        CHECK(b.at("episodes")[i].at("acc_both_prior") ==
              b.at("episodes")[i].at("acc_both"));
      }
    }

    // csv flattening has one row per episode plus a header
    const std::string flat = work.path("episodes.csv");
    REQUIRE(run("evaluate --checkpoint " + ckpt + " --config " + config +
                " --data " + data + " --mode ablation --csv " + flat +
                " --out " + work.path("r.json")) == 0);
    CHECK(line_count(flat) == 3);

    // a one-stage schedule equals a plain fine-tune evaluation
    const std::string inc_report = work.path("incremental.json");
    const std::string ft_report = work.path("finetune.json");
    REQUIRE(run("incremental --checkpoint " + ckpt + " --config " + config +
                " --data " + data + " --schedule 2 --out " + inc_report) == 0);
    REQUIRE(run("evaluate --checkpoint " + ckpt + " --config " + config +
                " --data " + data + " --mode finetune --out " + ft_report) ==
            0);
    {
      const json inc = json::parse(read_bytes(inc_report));
      const json ft = json::parse(read_bytes(ft_report));
      REQUIRE(inc.at("stages").size() == 1);
      CHECK(inc.at("stages")[0].at("aggregate").at("novel").at("mean") ==
            ft.at("aggregate").at("novel").at("mean"));
      CHECK(inc.at("stages")[0].at("aggregate").at("both").at("mean") ==
            ft.at("aggregate").at("both").at("mean"));
    }

    // malformed schedules exit with the usage code
    CHECK(run("incremental --checkpoint " + ckpt + " --config " + config +
              " --data " + data + " --schedule 5,abc") == 2);
    CHECK(run("incremental --checkpoint " + ckpt + " --config " + config +
              " --data " + data + " --schedule 5,2") == 2);

    // stage means grow with available shots, within a small noise band
    const std::string multi_report = work.path("multi.json");
    REQUIRE(run("incremental --checkpoint " + ckpt + " --config " + config +
                " --data " + data + " --schedule 1,2,4 --out " +
                multi_report) == 0);
    {
      const json inc = json::parse(read_bytes(multi_report));
      REQUIRE(inc.at("stages").size() == 3);
      double previous = 0.0;
      for (const json& stage : inc.at("stages")) {
        const double novel =
            stage.at("aggregate").at("novel").at("mean").get<double>();
        CHECK(novel >= previous - 0.02);
        previous = novel;
      }
    }

    // diagnostics: ordered summaries, full embedding dump, reruns identical
    const std::string diag1 = work.path("diag1.json");
    const std::string diag2 = work.path("diag2.json");
    const std::string dump = work.path("embed.csv");
    REQUIRE(run("diagnose --checkpoint " + ckpt + " --config " + config +
                " --data " + data + " --out " + diag1 + " --dump-csv " +
                dump) == 0);
    REQUIRE(run("diagnose --checkpoint " + ckpt + " --config " + config +
                " --data " + data + " --out " + diag2) == 0);
    CHECK(read_bytes(diag1) == read_bytes(diag2));
    CHECK(line_count(dump) == 400);  // one row per example
    {
      const json diag = json::parse(read_bytes(diag1));
      for (const char* key : {"within_base", "base_medians", "novel_medians"}) {
        const json& s = diag.at(key);
        CHECK(s.at("min").get<double>() <= s.at("q1").get<double>());
        CHECK(s.at("q1").get<double>() <= s.at("median").get<double>());
        CHECK(s.at("median").get<double>() <= s.at("q3").get<double>());
        CHECK(s.at("q3").get<double>() <= s.at("max").get<double>());
      }
    }
  }
}
