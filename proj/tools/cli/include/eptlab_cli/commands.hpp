#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>

#include "eptlab_cli/checks.hpp"
#include "eptlab_cli/experiment.hpp"

namespace eptlab::cli {

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kConfigError = 2, kRuntimeError = 3 };

struct VerifyOptions {
  std::optional<std::string> only;
  /// Fault injection for mutation testing: "" or "softmax-sign".
  std::string inject;
};

int cmd_verify(const VerifyOptions& options, std::ostream& out);

/// Trains every (method, sampling seed, train seed) cell and writes, under
/// the output directory: resolved_config.json, data/ manifests, and per
/// method runs.csv, summary.json, run_*.json metrics and run_*.ckpt weights.
int cmd_train(const std::filesystem::path& config, std::ostream& out,
              const std::optional<std::string>& output_dir = std::nullopt);

/// One CSV row per axis value per (method, sampling seed, train seed).
int cmd_sweep(const std::filesystem::path& config, const std::string& axis, std::ostream& out,
              const std::optional<std::string>& output_dir = std::nullopt);

struct AnalyzeOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path data;
  std::filesystem::path out_dir = "analysis";
  std::optional<std::string> task_type;
  int bins = 20;
};

int cmd_analyze(const AnalyzeOptions& options, std::ostream& out);

}  // namespace eptlab::cli
