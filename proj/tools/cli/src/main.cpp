#include <exception>
#include <iostream>

#include <CLI11.hpp>

#include "eptlab/errors.hpp"
#include "eptlab_cli/commands.hpp"

namespace cli = eptlab::cli;

int main(int argc, char** argv) {
  CLI::App app{"eptlab: embedded prompt tuning lab"};
  app.require_subcommand(1);

  cli::VerifyOptions verify;
  auto* verify_cmd = app.add_subcommand("verify", "Run the invariant suite (exit 0 iff every check passes)");
  verify_cmd->add_option("--only", verify.only, "Run a single named check");
  verify_cmd->add_option("--inject", verify.inject, "Fault injection for mutation testing")->group("");

  std::string train_config;
  std::optional<std::string> train_out;
  auto* train_cmd = app.add_subcommand("train", "Train and evaluate every configured run");
  train_cmd->add_option("--config", train_config, "Experiment config (JSON)")->required();
  train_cmd->add_option("--output-dir", train_out, "Override output_dir from the config");

  std::string sweep_config, sweep_axis;
  std::optional<std::string> sweep_out;
  auto* sweep_cmd = app.add_subcommand("sweep", "Sweep one axis and emit a CSV");
  sweep_cmd->add_option("--config", sweep_config, "Experiment config (JSON)")->required();
  sweep_cmd->add_option("--axis", sweep_axis, "prompt_length | depth | embedding_way | shots")->required();
  sweep_cmd->add_option("--output-dir", sweep_out, "Override output_dir from the config");

  cli::AnalyzeOptions analyze;
  std::string analyze_ckpt, analyze_data, analyze_out = "analysis";
  auto* analyze_cmd = app.add_subcommand("analyze", "Feature-distribution analysis of a checkpoint");
  analyze_cmd->add_option("--checkpoint", analyze_ckpt, "Weight file written by train")->required();
  analyze_cmd->add_option("--data", analyze_data, "Dataset manifest CSV")->required();
  analyze_cmd->add_option("--out", analyze_out, "Output directory");
  analyze_cmd->add_option("--task-type", analyze.task_type, "single_label | multi_label (default: from checkpoint)");
  analyze_cmd->add_option("--bins", analyze.bins, "PC1 histogram bins")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::kOk : cli::kConfigError;
  }

  try {
    if (*verify_cmd) return cli::cmd_verify(verify, std::cout);
    if (*train_cmd) return cli::cmd_train(train_config, std::cout, train_out);
    if (*sweep_cmd) return cli::cmd_sweep(sweep_config, sweep_axis, std::cout, sweep_out);
    analyze.checkpoint = analyze_ckpt;
    analyze.data = analyze_data;
    analyze.out_dir = analyze_out;
    return cli::cmd_analyze(analyze, std::cout);
  } catch (const eptlab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return cli::kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::kRuntimeError;
  }
}
