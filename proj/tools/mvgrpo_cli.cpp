// Command-line front end: pretrain, train, eval, drift, plotdata.

#include <csignal>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mvgrpo/harness.hpp"

namespace {

volatile std::sig_atomic_t g_interrupted = 0;

void on_sigint(int) { g_interrupted = 1; }

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

mvgrpo::ExperimentConfig load(const Common& c) {
  if (c.config.empty()) return mvgrpo::ExperimentConfig{};
  return mvgrpo::load_config(c.config);
}

void write_or_print(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  mvgrpo::detail::write_file_atomic(p, text);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view GRPO on a synthetic flow-matching task"};
  app.require_subcommand(1);

  Common common;
  auto add_common = [&common](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON experiment config");
    sub->add_option("--seed", common.seed, "override the seed");
  };

  auto* pretrain = app.add_subcommand("pretrain", "fit the flow-matching velocity field and write a checkpoint");
  add_common(pretrain);
  pretrain->add_option("--out", common.out, "checkpoint path (default <output_dir>/pretrained.ckpt)");

  bool baseline = false;
  bool resume = false;
  auto* train = app.add_subcommand("train", "run GRPO fine-tuning from the pretrained checkpoint");
  add_common(train);
  train->add_option("--out", common.out, "output directory (overrides output_dir)");
  train->add_flag("--baseline", baseline, "single-view baseline (K = 0)");
  train->add_flag("--resume", resume, "continue from <output_dir>/state.ckpt");

  std::string checkpoint;
  std::optional<std::size_t> n_conditions, n_samples;
  auto* eval = app.add_subcommand("eval", "mean reward of fresh ODE samples on held-out conditions");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "policy checkpoint (default <output_dir>/policy.ckpt)");
  eval->add_option("--conditions", n_conditions, "held-out condition count");
  eval->add_option("--samples", n_samples, "samples per condition");
  eval->add_option("--out", common.out, "report path (default stdout)");

  std::string enhancer;
  std::optional<std::size_t> pairs, bins;
  auto* drift = app.add_subcommand("drift", "probability drift histograms per SDE step");
  add_common(drift);
  drift->add_option("--checkpoint", checkpoint, "policy checkpoint (default <output_dir>/pretrained.ckpt)");
  drift->add_option("--enhancer", enhancer, "posterior, prior, identity, random or remote");
  drift->add_option("--pairs", pairs, "number of (anchor, augmented) pairs");
  drift->add_option("--bins", bins, "histogram bins");
  drift->add_option("--out", common.out, "directory for the tables (default <output_dir>/drift)");

  std::string metrics;
  auto* plot = app.add_subcommand("plotdata", "reward-curve table from a metrics file");
  plot->add_option("--config", common.config, "JSON experiment config (locates metrics.jsonl)");
  plot->add_option("--metrics", metrics, "metrics file (default <output_dir>/metrics.jsonl)");
  plot->add_option("--out", common.out, "CSV path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    mvgrpo::ExperimentConfig cfg = load(common);

    if (*pretrain) {
      if (common.seed) cfg.pretrain.seed = *common.seed;
      if (!common.out.empty()) cfg.pretrained_checkpoint = common.out;
      const auto res = mvgrpo::run_pretrain(cfg);
      std::printf("checkpoint %s\ndigest %s\nloss %.6f -> %.6f\n", res.path.c_str(), res.digest.c_str(),
                  res.initial_loss, res.final_loss);
      return 0;
    }

    if (*train) {
      if (common.seed) cfg.seed = *common.seed;
      if (!common.out.empty()) {
        if (cfg.pretrained_checkpoint.empty()) cfg.pretrained_checkpoint = cfg.pretrained_path().string();
        cfg.output_dir = common.out;
      }
      cfg.validate();
      std::signal(SIGINT, on_sigint);
      mvgrpo::TrainOptions opt;
      opt.baseline = baseline;
      opt.resume = resume;
      opt.should_stop = [] { return g_interrupted != 0; };
      opt.on_iteration = [](const mvgrpo::IterationReport& r) {
        std::fprintf(stderr, "iter %zu reward %.4f loss %.6f clip %.3f nfe %zu (%.2fs)\n", r.iteration,
                     r.anchor_mean_reward, r.loss, r.clip_fraction, r.nfe, r.wall_seconds);
      };
      const auto res = mvgrpo::run_train(cfg, opt);
      std::printf("iterations %zu\npolicy %s\ndigest %s\n", res.next_iteration,
                  (cfg.out() / "policy.ckpt").c_str(), res.policy_digest.c_str());
      if (res.interrupted && g_interrupted) {
        std::fprintf(stderr, "interrupted after %zu iterations; continue with --resume\n", res.next_iteration);
        return 3;
      }
      return 0;
    }

    if (*eval) {
      if (common.seed) cfg.eval.seed = *common.seed;
      if (n_conditions) cfg.eval.n_conditions = *n_conditions;
      if (n_samples) cfg.eval.n_samples = *n_samples;
      cfg.validate();
      const auto path = checkpoint.empty() ? cfg.out() / "policy.ckpt" : std::filesystem::path(checkpoint);
      const auto rep = mvgrpo::run_eval(cfg, path);
      write_or_print(common.out, mvgrpo::eval_report_json(rep));
      return 0;
    }

    if (*drift) {
      if (common.seed) cfg.seed = *common.seed;
      if (pairs) cfg.drift.n_pairs = *pairs;
      if (bins) cfg.drift.bins = *bins;
      if (!enhancer.empty()) cfg.drift.enhancer = mvgrpo::parse_enhancer_kind(enhancer);
      cfg.validate();
      const auto path = checkpoint.empty() ? cfg.pretrained_path() : std::filesystem::path(checkpoint);
      const auto rep = mvgrpo::run_drift(cfg, path, cfg.drift.enhancer);
      const auto dir = common.out.empty() ? cfg.out() / "drift" : std::filesystem::path(common.out);
      const auto grid = cfg.grid();
      for (const auto& p : mvgrpo::write_drift_tables(rep, grid, dir)) std::printf("%s\n", p.c_str());
      for (const auto& st : rep.steps)
        std::printf("step %zu median %.6g p90 %.6g\n", st.step, st.median, st.p90);
      return 0;
    }

    if (*plot) {
      const auto path = metrics.empty() ? cfg.out() / "metrics.jsonl" : std::filesystem::path(metrics);
      write_or_print(common.out, mvgrpo::plot_table(mvgrpo::read_metrics(path), path.string()));
      return 0;
    }
  } catch (const mvgrpo::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return mvgrpo::exit_code_for(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "error: io: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}
