#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "eptlab/fewshot.hpp"
#include "eptlab/io.hpp"
#include "eptlab/peft.hpp"
#include "eptlab/vit.hpp"

namespace eptlab::cli {

struct DatasetSource {
  std::optional<SynthSpec> synthetic;  // exactly one of synthetic / manifest
  std::uint64_t seed = 0;
  std::optional<std::string> manifest;
  TaskType task_type = TaskType::SingleLabel;  // manifests only
};

/// Axis values for `sweep`. Absent lists fall back to per-axis defaults.
struct SweepValues {
  std::optional<std::vector<int>> prompt_length;
  std::optional<std::vector<double>> relative_prompt_length;
  std::optional<std::vector<int>> depth;
  std::optional<std::vector<DepthOrder>> orders;
  std::optional<std::vector<EmbeddingWay>> embedding_way;
  std::optional<std::vector<int>> shots;
};

struct ExperimentConfig {
  BackboneConfig backbone;
  std::uint64_t backbone_seed = 0;
  std::vector<PeftMethod> methods = {PeftMethod::simple(MethodTag::Linear)};
  DatasetSource dataset{SynthSpec::toy_colon()};
  int shots = 1;
  std::vector<std::uint64_t> sampling_seeds = {0};
  std::vector<std::uint64_t> train_seeds = {0};
  TrainConfig train;
  std::string output_dir = "eptlab-out";
  SweepValues sweep;
};

/// Parses and cross-validates a config document. Every default is
/// materialized, so `to_json` of the result is the resolved config and
/// re-parsing it yields an equal config. Errors are ConfigError with the
/// field path.
ExperimentConfig parse_experiment(const Json& j);
ExperimentConfig load_experiment(const std::filesystem::path& path);
Json to_json(const ExperimentConfig& cfg);

/// Dataset named by the config (synthesized or read from its manifest).
Dataset load_dataset(const ExperimentConfig& cfg);

MultiRunSpec run_spec(const ExperimentConfig& cfg, const PeftMethod& method, unsigned threads);

/// Worker cap: hardware concurrency, lowered by EPTLAB_THREADS when set.
unsigned worker_threads();

}  // namespace eptlab::cli
