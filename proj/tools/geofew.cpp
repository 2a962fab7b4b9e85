// Command-line driver: data generation, two-stage training, episodic
// evaluation, incremental fine-tuning and feature-space diagnostics.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "geofew/datasets.hpp"
#include "geofew/evaluation.hpp"
#include "geofew/model.hpp"
#include "geofew/rng.hpp"
#include "geofew/run_config.hpp"
#include "geofew/training.hpp"

namespace {

using geofew::RunConfig;
using json = nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitInvariant = 1;
constexpr int kExitUsage = 2;

json metric_json(const geofew::MetricStats& m) {
  return json{{"mean", m.mean},
              {"std", m.stddev},
              {"ci95", m.ci95},
              {"n", m.n},
              {"degenerate_n", m.degenerate_n}};
}

json episode_json(const geofew::EpisodeResult& r) {
  return json{{"seed", r.seed},
              {"acc_novel", r.acc_novel},
              {"acc_both", r.acc_both},
              {"acc_base", r.acc_base},
              {"acc_both_prior", r.acc_both_prior}};
}

json aggregate_json(const geofew::AggregateReport& agg) {
  return json{{"novel", metric_json(agg.novel)},
              {"both", metric_json(agg.both)},
              {"base", metric_json(agg.base)},
              {"both_prior", metric_json(agg.both_prior)}};
}

json summary_json(const geofew::FiveNumberSummary& s) {
  return json{{"min", s.min},
              {"q1", s.q1},
              {"median", s.median},
              {"q3", s.q3},
              {"max", s.max}};
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw geofew::ParseError("cannot open '" + path + "' to write");
  os << text;
  if (!os) throw geofew::ParseError("write to '" + path + "' failed");
}

geofew::LabeledDataset load_dataset(const RunConfig& cfg,
                                    const std::string& path) {
  geofew::LabeledDataset dataset = geofew::load_csv(path);
  if (dataset.n_categories() != cfg.data.n_categories) {
    throw geofew::ConfigError(
        "dataset has " + std::to_string(dataset.n_categories()) +
        " categories but the config declares " +
        std::to_string(cfg.data.n_categories));
  }
  geofew::assign_splits(dataset, cfg.data.train_per_category,
                        cfg.data.val_per_category, cfg.data.test_per_category);
  return dataset;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_path) {
  const RunConfig cfg = geofew::load_run_config(config_path);
  const geofew::LabeledDataset dataset = geofew::generate_blobs(cfg.data);
  geofew::save_csv(dataset, out_path);

  const auto means = geofew::blob_class_means(cfg.data);
  double max_cos = -1.0;
  for (std::size_t a = 0; a < means.size(); ++a) {
    for (std::size_t b = a + 1; b < means.size(); ++b) {
      double dot = 0.0;
      for (std::size_t j = 0; j < means[a].size(); ++j)
        dot += means[a][j] * means[b][j];
      max_cos = std::max(max_cos, dot);
    }
  }
  std::cout << "wrote " << out_path << ": " << dataset.n_categories()
            << " categories, " << dataset.size() << " examples, dim "
            << dataset.dim() << ", max pairwise class-mean cosine "
            << max_cos << "\n";
  return kExitOk;
}

int cmd_train_base(const std::string& config_path, const std::string& data_path,
                   const std::string& checkpoint_path,
                   std::string history_path) {
  const RunConfig cfg = geofew::load_run_config(config_path);
  const geofew::LabeledDataset dataset = load_dataset(cfg, data_path);
  const geofew::BaseNovelSplit split =
      geofew::split_base_novel(dataset, cfg.base_ids(), cfg.novel_ids());

  geofew::BlockNetwork net(cfg.model, cfg.n_base, cfg.seed);
  const geofew::TrainHistory history =
      geofew::train_stage1(net, split.base, cfg.stage1, cfg.loss, cfg.seed);

  geofew::save_checkpoint(net, checkpoint_path, cfg.hash(), cfg.seed);
  if (history_path.empty()) history_path = checkpoint_path + ".history.jsonl";
  geofew::write_history_jsonl(history, history_path);

  char acc[32];
  std::snprintf(acc, sizeof(acc), "%.17g", history.final_val_accuracy);
  std::cout << "stage-1 training done: " << history.steps.size()
            << " steps, final base val accuracy " << acc << "\n"
            << "checkpoint: " << checkpoint_path << "\n"
            << "history: " << history_path << "\n";
  return kExitOk;
}

int cmd_evaluate(const std::string& checkpoint_path,
                 const std::string& config_path, const std::string& data_path,
                 std::size_t episodes_override, const std::string& mode_name,
                 double prior_base, bool prior_set, std::size_t jobs,
                 const std::string& out_path, const std::string& csv_path) {
  RunConfig cfg = geofew::load_run_config(config_path);
  if (episodes_override > 0) cfg.n_episodes = episodes_override;
  if (prior_set) {
    cfg.p_base = prior_base;
    cfg.p_novel = 1.0 - prior_base;
  }

  const geofew::LabeledDataset dataset = load_dataset(cfg, data_path);
  const geofew::BaseNovelSplit split =
      geofew::split_base_novel(dataset, cfg.base_ids(), cfg.novel_ids());
  const geofew::LoadedCheckpoint loaded =
      geofew::load_checkpoint(checkpoint_path);

  const geofew::EvalMode mode = mode_name == "ablation"
                                    ? geofew::EvalMode::kAblationNoFinetune
                                    : geofew::EvalMode::kFinetune;
  const std::vector<geofew::EpisodeResult> results = geofew::run_episodes(
      loaded.net, split.novel_pool, split.base, cfg.episodes, mode,
      cfg.eval_config(), cfg.n_episodes, cfg.seed, jobs);
  const geofew::AggregateReport agg = geofew::aggregate(results);

  json report;
  report["config"] = json::parse(cfg.resolved_json());
  report["mode"] = mode_name;
  report["episodes"] = json::array();
  for (const auto& r : results) report["episodes"].push_back(episode_json(r));
  report["aggregate"] = aggregate_json(agg);

  const std::string text = report.dump(2) + "\n";
  if (out_path.empty()) {
    std::cout << text;
  } else {
    write_text(out_path, text);
    std::cout << "novel " << agg.novel.mean << " +- " << agg.novel.ci95
              << ", both " << agg.both.mean << " +- " << agg.both.ci95
              << ", base " << agg.base.mean << ", both+prior "
              << agg.both_prior.mean << " over " << results.size()
              << " episodes\n"
              << "report: " << out_path << "\n";
  }

  if (!csv_path.empty()) {
    std::ostringstream os;
    os << "episode,seed,acc_novel,acc_both,acc_base,acc_both_prior\n";
    char buf[192];
    for (std::size_t i = 0; i < results.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%zu,%llu,%.17g,%.17g,%.17g,%.17g\n", i,
                    static_cast<unsigned long long>(results[i].seed),
                    results[i].acc_novel, results[i].acc_both,
                    results[i].acc_base, results[i].acc_both_prior);
      os << buf;
    }
    write_text(csv_path, os.str());
  }
  return kExitOk;
}

int cmd_incremental(const std::string& checkpoint_path,
                    const std::string& config_path,
                    const std::string& data_path,
                    const std::string& schedule_text,
                    std::size_t episodes_override,
                    const std::string& out_path) {
  RunConfig cfg = geofew::load_run_config(config_path);
  if (episodes_override > 0) cfg.n_episodes = episodes_override;

  std::vector<std::size_t> schedule;
  {
    std::stringstream ss(schedule_text);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t pos = 0;
        const long v = std::stol(cell, &pos);
        if (pos != cell.size() || v <= 0) throw std::invalid_argument(cell);
        schedule.push_back(static_cast<std::size_t>(v));
      } catch (const std::exception&) {
        throw geofew::ConfigError("incremental: bad schedule entry '" + cell +
                                  "'");
      }
    }
    if (schedule.empty()) {
      throw geofew::ConfigError("incremental: empty schedule");
    }
  }

  const geofew::LabeledDataset dataset = load_dataset(cfg, data_path);
  const geofew::BaseNovelSplit split =
      geofew::split_base_novel(dataset, cfg.base_ids(), cfg.novel_ids());
  const geofew::LoadedCheckpoint loaded =
      geofew::load_checkpoint(checkpoint_path);

  geofew::EpisodeParams params = cfg.episodes;
  params.k = schedule.back();
  geofew::AugmentationConfig aug = cfg.augment;
  aug.target_total_per_category =
      std::max(aug.target_total_per_category, params.k);
  geofew::EvalConfig eval_cfg = cfg.eval_config();
  eval_cfg.aug = aug;

  // per-stage accuracy lists across episodes
  std::vector<std::vector<geofew::EpisodeResult>> per_stage(schedule.size());
  for (std::size_t e = 0; e < cfg.n_episodes; ++e) {
    const geofew::Episode episode = geofew::sample_episode(
        split.novel_pool, split.base, params, geofew::mix_seed(cfg.seed, e));
    const auto stages =
        geofew::evaluate_incremental(loaded.net, episode, schedule, eval_cfg);
    for (std::size_t t = 0; t < stages.size(); ++t)
      per_stage[t].push_back(stages[t].result);
  }

  json report;
  report["config"] = json::parse(cfg.resolved_json());
  report["schedule"] = schedule;
  report["stages"] = json::array();
  for (std::size_t t = 0; t < schedule.size(); ++t) {
    const geofew::AggregateReport agg = geofew::aggregate(per_stage[t]);
    json stage;
    stage["shots"] = schedule[t];
    stage["aggregate"] = aggregate_json(agg);
    stage["episodes"] = json::array();
    for (const auto& r : per_stage[t])
      stage["episodes"].push_back(episode_json(r));
    report["stages"].push_back(stage);
    std::cout << "shots " << schedule[t] << ": novel " << agg.novel.mean
              << ", both " << agg.both.mean << ", base " << agg.base.mean
              << "\n";
  }

  const std::string text = report.dump(2) + "\n";
  if (out_path.empty()) {
    std::cout << text;
  } else {
    write_text(out_path, text);
    std::cout << "report: " << out_path << "\n";
  }
  return kExitOk;
}

int cmd_diagnose(const std::string& checkpoint_path,
                 const std::string& config_path, const std::string& data_path,
                 const std::string& out_path, const std::string& dump_path) {
  const RunConfig cfg = geofew::load_run_config(config_path);
  const geofew::LabeledDataset dataset = load_dataset(cfg, data_path);
  const geofew::BaseNovelSplit split =
      geofew::split_base_novel(dataset, cfg.base_ids(), cfg.novel_ids());
  const geofew::LoadedCheckpoint loaded =
      geofew::load_checkpoint(checkpoint_path);

  const geofew::CosineDiagnostics diag =
      geofew::cosine_diagnostics(loaded.net, split.base, split.novel_pool);

  json report;
  report["config"] = json::parse(cfg.resolved_json());
  report["within_base"] = summary_json(diag.within_base);
  report["base_medians"] = summary_json(diag.base_medians);
  report["novel_medians"] = summary_json(diag.novel_medians);
  report["skipped_categories"] = diag.skipped_categories;

  const std::string text = report.dump(2) + "\n";
  if (out_path.empty()) {
    std::cout << text;
  } else {
    write_text(out_path, text);
    std::cout << "report: " << out_path << "\n";
  }

  if (!dump_path.empty()) {
    // one row per example: label, then the stage-1 features
    std::ofstream os(dump_path);
    if (!os) {
      throw geofew::ParseError("cannot open '" + dump_path + "' to write");
    }
    const geofew::Tensor features =
        loaded.net.forward_base(dataset.examples);
    char buf[32];
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      os << dataset.labels[i];
      for (std::size_t j = 0; j < features.cols(); ++j) {
        std::snprintf(buf, sizeof(buf), "%.17g", features.at(i, j));
        os << "," << buf;
      }
      os << "\n";
    }
    std::cout << "embedding dump: " << dump_path << " (" << dataset.size()
              << " rows)\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "geofew: few-shot classification with geometric constraints on the "
      "unit hypersphere"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  std::string gen_config, gen_out;
  gen->add_option("--config", gen_config, "Run config JSON")->required();
  gen->add_option("--out", gen_out, "Output CSV path")->required();

  // train-base
  auto* train = app.add_subcommand("train-base", "Stage-1 base training");
  std::string tr_config, tr_data, tr_ckpt, tr_history;
  train->add_option("--config", tr_config, "Run config JSON")->required();
  train->add_option("--data", tr_data, "Dataset CSV")->required();
  train->add_option("--out-checkpoint", tr_ckpt, "Checkpoint path")->required();
  train->add_option("--out-history", tr_history,
                    "History JSONL path (default: <checkpoint>.history.jsonl)");

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Episodic two-stream evaluation");
  std::string ev_ckpt, ev_config, ev_data, ev_mode = "finetune", ev_out,
              ev_csv;
  std::size_t ev_episodes = 0, ev_jobs = 1;
  double ev_prior = 0.5;
  eval->add_option("--checkpoint", ev_ckpt, "Stage-1 checkpoint")->required();
  eval->add_option("--config", ev_config, "Run config JSON")->required();
  eval->add_option("--data", ev_data, "Dataset CSV")->required();
  eval->add_option("--episodes", ev_episodes, "Episode count override");
  eval->add_option("--mode", ev_mode, "finetune | ablation")
      ->check(CLI::IsMember({"finetune", "ablation"}));
  auto* prior_opt =
      eval->add_option("--prior", ev_prior, "Base prior p_base (novel gets 1-p)");
  eval->add_option("--jobs", ev_jobs, "Worker threads for episodes");
  eval->add_option("--out", ev_out, "Report JSON path (default: stdout)");
  eval->add_option("--csv", ev_csv, "Per-episode CSV flattening path");

  // incremental
  auto* inc = app.add_subcommand("incremental",
                                 "Shot-schedule incremental fine-tuning");
  std::string in_ckpt, in_config, in_data, in_schedule, in_out;
  std::size_t in_episodes = 0;
  inc->add_option("--checkpoint", in_ckpt, "Stage-1 checkpoint")->required();
  inc->add_option("--config", in_config, "Run config JSON")->required();
  inc->add_option("--data", in_data, "Dataset CSV")->required();
  inc->add_option("--schedule", in_schedule, "Comma-separated shots, e.g. 1,2,5,10,20")
      ->required();
  inc->add_option("--episodes", in_episodes, "Episode count override");
  inc->add_option("--out", in_out, "Report JSON path (default: stdout)");

  // diagnose
  auto* diag = app.add_subcommand("diagnose", "Feature-space cosine diagnostics");
  std::string dg_ckpt, dg_config, dg_data, dg_out, dg_dump;
  diag->add_option("--checkpoint", dg_ckpt, "Stage-1 checkpoint")->required();
  diag->add_option("--config", dg_config, "Run config JSON")->required();
  diag->add_option("--data", dg_data, "Dataset CSV")->required();
  diag->add_option("--out", dg_out, "Report JSON path (default: stdout)");
  diag->add_option("--dump-csv", dg_dump, "Embedding dump CSV path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_config, gen_out);
    if (train->parsed())
      return cmd_train_base(tr_config, tr_data, tr_ckpt, tr_history);
    if (eval->parsed())
      return cmd_evaluate(ev_ckpt, ev_config, ev_data, ev_episodes, ev_mode,
                          ev_prior, prior_opt->count() > 0, ev_jobs, ev_out,
                          ev_csv);
    if (inc->parsed())
      return cmd_incremental(in_ckpt, in_config, in_data, in_schedule,
                             in_episodes, in_out);
    if (diag->parsed())
      return cmd_diagnose(dg_ckpt, dg_config, dg_data, dg_out, dg_dump);
  } catch (const geofew::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const geofew::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const geofew::ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const geofew::Error& e) {
    std::cerr << "invariant breach: " << e.what() << "\n";
    return kExitInvariant;
  } catch (const std::exception& e) {
    std::cerr << "fatal: " << e.what() << "\n";
    return kExitInvariant;
  }
  return kExitUsage;
}
