// Experiment driver: data preparation, training, evaluation, the property
// check suite, and the timing harness. Exit codes: 0 success, 1 runtime
// failure, 2 usage / config error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>

#include "CLI11.hpp"
#include "genatt/bench.hpp"
#include "genatt/checks.hpp"
#include "genatt/config.hpp"
#include "genatt/metrics.hpp"
#include "genatt/synthetic.hpp"
#include "genatt/train.hpp"

namespace fs = std::filesystem;
using namespace genatt;

namespace {

// Collects string-valued flags and replays the ones actually given onto the
// config, so flags always win over the config file.
struct FlagBinder {
  explicit FlagBinder(CLI::App* app) : cmd(app) {}

  CLI::App* cmd;
  std::vector<std::function<void(ExperimentConfig&)>> setters;

  void bind(const std::string& flag, const std::string& key,
            const std::string& desc) {
    auto value = std::make_shared<std::string>();
    CLI::Option* opt = cmd->add_option(flag, *value, desc);
    setters.push_back([opt, value, key](ExperimentConfig& cfg) {
      if (opt->count() > 0) cfg.apply(key, *value);
    });
  }

  void bind_flag(const std::string& flag, const std::string& key,
                 const std::string& desc) {
    auto value = std::make_shared<bool>(false);
    CLI::Option* opt = cmd->add_flag(flag, *value, desc);
    setters.push_back([opt, value, key](ExperimentConfig& cfg) {
      if (opt->count() > 0) cfg.apply(key, *value ? "true" : "false");
    });
  }

  void apply(ExperimentConfig& cfg) const {
    for (const auto& s : setters) s(cfg);
  }
};

void bind_model_flags(FlagBinder& b) {
  b.bind("--mode", "mode", "deterministic | vae | diffusion");
  b.bind("--d", "d", "item embedding dimension");
  b.bind("--n", "n", "maximum sequence length");
  b.bind("--layers", "layers", "transformer blocks");
  b.bind("--heads", "heads", "attention heads per layer");
  b.bind("--d-h", "d_h", "encoder/latent dimension (0 = 2d)");
  b.bind("--T", "t_steps", "diffusion steps (0 = n)");
  b.bind("--beta-start", "beta_start", "first beta of the noise schedule");
  b.bind("--beta-end", "beta_end", "last beta of the noise schedule");
  b.bind("--gamma", "gamma", "generative loss weight");
  b.bind("--dropout", "dropout", "dropout rate");
  b.bind("--seed", "seed", "master seed");
}

ExperimentConfig resolve_config(const std::string& config_path,
                                const FlagBinder& flags) {
  ExperimentConfig cfg;
  if (!config_path.empty()) cfg.load_file(config_path);
  flags.apply(cfg);
  return cfg;
}

fs::path require_out_dir(const ExperimentConfig& cfg) {
  if (cfg.out_dir.empty()) throw ConfigError("--out is required");
  fs::create_directories(cfg.out_dir);
  return cfg.out_dir;
}

// Prepared data is canonical: `prepare` already filtered it, so consumers
// load it as-is.
InteractionLog load_prepared(const ExperimentConfig& cfg) {
  if (cfg.data_dir.empty()) throw ConfigError("--data is required");
  const fs::path dir = cfg.data_dir;
  const fs::path inter = dir / "interactions.tsv";
  const fs::path cats = dir / "categories.tsv";
  return load_interactions(inter.string(),
                           fs::exists(cats) ? cats.string() : "");
}

int cmd_prepare(const std::string& config_path, const FlagBinder& flags) {
  ExperimentConfig cfg = resolve_config(config_path, flags);
  const fs::path out = require_out_dir(cfg);

  InteractionLog raw;
  if (cfg.synthetic) {
    SyntheticSpec spec;
    spec.users = cfg.users;
    spec.items = cfg.items;
    spec.cats = cfg.cats;
    spec.seed = cfg.seed;
    raw = make_synthetic_corpus(spec);
  } else {
    if (cfg.interactions.empty()) {
      throw ConfigError("--interactions is required unless --synthetic");
    }
    raw = load_interactions(cfg.interactions, cfg.categories);
  }
  const InteractionLog filtered =
      filter_min_interactions(raw, cfg.min_interactions);
  const SplitSet split = leave_one_out_split(filtered, cfg.n);

  write_interactions(filtered, (out / "interactions.tsv").string(),
                     (out / "categories.tsv").string());
  write_split_manifest(split, filtered, (out / "split_manifest.json").string());
  write_dataset_stats(filtered, split, (out / "stats.json").string());
  cfg.write_resolved((out / "config.resolved").string());
  std::printf("prepared %zu users, %d items, %zu interactions -> %s\n",
              filtered.users.size(), filtered.num_items,
              filtered.num_interactions(), out.string().c_str());
  return 0;
}

int cmd_train(const std::string& config_path, const FlagBinder& flags) {
  ExperimentConfig cfg = resolve_config(config_path, flags);
  const fs::path out = require_out_dir(cfg);
  const InteractionLog log = load_prepared(cfg);
  const SplitSet split = leave_one_out_split(log, cfg.n);

  Model model = init_model(cfg.model_config(log.num_items));
  TrainOptions opts = cfg.train_options();
  opts.verbose = true;
  const FitResult result = fit(model, split, log, opts);

  save_checkpoint(model, (out / "checkpoint").string());
  write_train_log(result.log, (out / "train_log.csv").string());
  cfg.write_resolved((out / "config.resolved").string());
  std::printf("best val ndcg@20 %.6f at epoch %d (%zu epochs run)\n",
              result.best_metric, result.best_epoch, result.log.size());
  return 0;
}

int cmd_eval(const std::string& config_path, const FlagBinder& flags,
             const std::string& checkpoint_path) {
  ExperimentConfig cfg = resolve_config(config_path, flags);
  const fs::path out = require_out_dir(cfg);
  if (checkpoint_path.empty()) throw ConfigError("--checkpoint is required");
  Model model = load_checkpoint(checkpoint_path);
  const InteractionLog log = load_prepared(cfg);
  if (log.num_items != model.config.num_items) {
    throw ConfigError("checkpoint/config mismatch: checkpoint built for " +
                      std::to_string(model.config.num_items) +
                      " items, data has " + std::to_string(log.num_items));
  }
  const SplitSet split = leave_one_out_split(log, model.config.n);

  EvalOptions eopts;
  eopts.avg_count = cfg.eval_avg;
  eopts.seed = cfg.seed;
  const MetricTable table = evaluate(model, split.test, log, eopts);
  write_metrics_csv(table, (out / "metrics.csv").string());
  write_metrics_json(table, (out / "metrics.json").string());
  cfg.write_resolved((out / "config.resolved").string());
  for (const auto& [key, value] : table.values) {
    std::printf("%-10s %.6f\n", key.c_str(), value);
  }
  return 0;
}

int cmd_check(const std::vector<std::string>& only,
              const std::string& inject_failure, const std::string& out_dir) {
  const auto results = run_checks(only, inject_failure);
  bool all = true;
  for (const CheckResult& r : results) {
    std::printf("[%s] %-32s %6.2fs  %s\n", r.pass ? "PASS" : "FAIL",
                r.name.c_str(), r.seconds, r.detail.c_str());
    all = all && r.pass;
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_checks_json(results, (fs::path(out_dir) / "checks.json").string());
    ExperimentConfig cfg;  // checks run on fixed self-contained instances
    cfg.out_dir = out_dir;
    cfg.write_resolved((fs::path(out_dir) / "config.resolved").string());
  }
  return all ? 0 : 1;
}

int cmd_bench_impl(const std::string& config_path, const FlagBinder& flags,
                   const BenchOptions& bench_opts) {
  ExperimentConfig cfg = resolve_config(config_path, flags);
  const fs::path out = require_out_dir(cfg);
  const InteractionLog log = load_prepared(cfg);
  const BenchReport report = run_bench(log, bench_opts);
  write_bench_csv(report, (out / "bench.csv").string());
  cfg.write_resolved((out / "config.resolved").string());
  for (const BenchRow& r : report.rows) {
    std::printf("%-14s n=%-4d T=%-3d %8.4fs/epoch  %s\n", r.mode.c_str(), r.n,
                r.T, r.seconds_per_epoch, r.complexity.c_str());
  }
  if (!report.diffusion_monotone_in_T) {
    std::fprintf(stderr, "bench: diffusion epoch time not monotone in T\n");
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"generative-attention sequential recommender"};
  app.require_subcommand(1);

  std::string config_path;

  CLI::App* prepare = app.add_subcommand(
      "prepare", "load, filter, split and export a dataset");
  FlagBinder prepare_flags(prepare);
  prepare->add_option("--config", config_path, "config file");
  prepare_flags.bind("--interactions", "interactions",
                     "user<TAB>item<TAB>timestamp file");
  prepare_flags.bind("--categories", "categories", "item<TAB>category file");
  prepare_flags.bind("--out", "out_dir", "output directory");
  prepare_flags.bind("--min-interactions", "min_interactions",
                     "filter threshold");
  prepare_flags.bind("--n", "n", "maximum sequence length");
  prepare_flags.bind("--seed", "seed", "corpus seed");
  prepare_flags.bind_flag("--synthetic", "synthetic",
                          "generate the bundled preference-cluster corpus");
  prepare_flags.bind("--users", "users", "synthetic user count");
  prepare_flags.bind("--items", "items", "synthetic item count");
  prepare_flags.bind("--cats", "cats", "synthetic category count");

  CLI::App* train = app.add_subcommand("train", "fit a model on prepared data");
  FlagBinder train_flags(train);
  train->add_option("--config", config_path, "config file");
  train_flags.bind("--data", "data_dir", "prepared data directory");
  train_flags.bind("--out", "out_dir", "output directory");
  bind_model_flags(train_flags);
  train_flags.bind("--lr", "lr", "learning rate");
  train_flags.bind("--batch", "batch", "batch size");
  train_flags.bind("--max-epochs", "max_epochs", "epoch cap");
  train_flags.bind("--patience", "patience", "early-stopping patience");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  FlagBinder eval_flags(eval);
  std::string checkpoint_path;
  eval->add_option("--config", config_path, "config file");
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint file");
  eval_flags.bind("--data", "data_dir", "prepared data directory");
  eval_flags.bind("--out", "out_dir", "output directory");
  eval_flags.bind("--eval-avg", "eval_avg",
                  "stochastic passes averaged per user");
  eval_flags.bind("--seed", "seed", "evaluation seed");

  CLI::App* check = app.add_subcommand("check", "run the property suite");
  std::vector<std::string> only;
  std::string inject_failure;
  std::string check_out;
  check->add_option("--only", only, "run only the named checks");
  check->add_option("--out", check_out, "directory for checks.json");
  check->add_option("--inject-failure", inject_failure,
                    "corrupt a gradient inside the named check (self-test)");

  CLI::App* bench = app.add_subcommand("bench", "per-epoch timing grid");
  FlagBinder bench_flags(bench);
  BenchOptions bench_opts;
  bench->add_option("--config", config_path, "config file");
  bench_flags.bind("--data", "data_dir", "prepared data directory");
  bench_flags.bind("--out", "out_dir", "output directory");
  bench->add_option("--n-grid", bench_opts.n_grid, "sequence lengths to time");
  bench->add_option("--t-grid", bench_opts.t_grid, "diffusion steps to time");
  bench->add_option("--bench-T", bench_opts.fixed_T,
                    "diffusion steps for the n sweep");
  bench->add_option("--bench-d", bench_opts.d, "embedding dim for timing");
  bench->add_option("--max-users", bench_opts.max_users, "users to time on");
  bench->add_option("--bench-batch", bench_opts.batch, "timing batch size");
  bench->add_option("--reps", bench_opts.reps, "repetitions (min taken)");

  try {
    app.parse(argc, argv);
    if (prepare->parsed()) return cmd_prepare(config_path, prepare_flags);
    if (train->parsed()) return cmd_train(config_path, train_flags);
    if (eval->parsed()) {
      return cmd_eval(config_path, eval_flags, checkpoint_path);
    }
    if (check->parsed()) return cmd_check(only, inject_failure, check_out);
    if (bench->parsed()) {
      return cmd_bench_impl(config_path, bench_flags, bench_opts);
    }
    return 2;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
