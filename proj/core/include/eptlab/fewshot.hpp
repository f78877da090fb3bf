#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "eptlab/gradcheck.hpp"
#include "eptlab/io.hpp"
#include "eptlab/peft.hpp"
#include "eptlab/tensor.hpp"

namespace eptlab {

enum class TaskType { SingleLabel, MultiLabel };
std::string_view to_string(TaskType t);
TaskType parse_task_type(std::string_view s);

struct Sample {
  Tensor image;             // channels x side x side
  std::vector<int> labels;  // 0/1 per class
  int primary_label() const;
};

struct Dataset {
  std::vector<Sample> samples;
  TaskType task_type = TaskType::SingleLabel;
  int num_classes = 0;
  /// Throws ConfigError when labels break the task type's invariant.
  void validate() const;
};

/// Class-conditioned Gaussian blobs rendered into an image grid. Class k owns
/// a blob center on a circle around the image center and a width growing
/// from blob_sigma to 1.5 blob_sigma with k; a sample's image is the
/// sum of its classes' blobs times `margin`, plus unit Gaussian noise. An
/// infinite margin renders noiseless blobs truncated to disjoint discs.
struct SynthSpec {
  std::string name = "toy-colon";
  int num_classes = 2;
  int samples_per_class = 30;
  int image_side = 16;
  int channels = 1;
  double margin = 3.0;
  double blob_sigma = 1.5;
  /// Per-sample jitter (pixels) of each blob center.
  double jitter = 1.0;
  TaskType task_type = TaskType::SingleLabel;

  static SynthSpec toy_colon();
  static SynthSpec toy_endo();
  void validate() const;
};

Dataset synth_dataset(const SynthSpec& spec, std::uint64_t seed);

Json to_json(const SynthSpec& spec);
SynthSpec synth_spec_from_json(const Json& j, const std::string& path = "dataset.synthetic");

/// Manifest CSV (sample_id,label_vector,path) with one payload per sample: a
/// text line "shape c h w" then little-endian fp64 values. Paths are relative
/// to the manifest's directory.
void write_manifest(const std::filesystem::path& manifest, const Dataset& data,
                    const std::vector<std::size_t>& indices, const std::filesystem::path& payload_dir);
Dataset read_manifest(const std::filesystem::path& manifest, TaskType task_type);

struct Episode {
  std::vector<std::size_t> train;
  std::vector<std::size_t> eval;
  int shots = 0;
  std::uint64_t seed = 0;
};

/// K per class without replacement; for multi-label data each class in turn
/// draws K not-yet-drawn samples carrying that label. Remaining samples form
/// the eval split. Throws SamplingError on short classes or an empty eval split.
Episode sample_episode(const Dataset& data, int shots, std::uint64_t seed);

enum class OptimizerKind { Adam, Sgd };
enum class LossKind { CrossEntropy, BinaryCrossEntropy };

struct TrainConfig {
  double learning_rate = 6e-4;
  int epochs = 20;
  int batch_size = 4;
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::uint64_t seed = 0;
  std::optional<LossKind> loss;  // derived from the task type when absent
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate(TaskType task) const;
};

LossKind loss_for(TaskType task);
Json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const Json& j, const std::string& path = "train");

struct TrainResult {
  std::vector<double> epoch_loss;
};

/// Mean loss of `indices` under `model`, with gradients of `mask`.
Evaluation batch_objective(const Model& model, const ParameterStore& params, const Dataset& data,
                           const std::vector<std::size_t>& indices, const TrainableMask& mask, LossKind loss);

/// Mini-batch training of the method's trainable mask. Parameters outside the
/// mask are never written. Throws DivergenceError on a non-finite loss.
TrainResult train(Model& model, const Dataset& data, const Episode& episode, const TrainConfig& cfg);

/// All-points average precision: mean over positive ranks of precision at that
/// rank, ties in stable input order. nullopt when there are no positives.
std::optional<double> average_precision(const std::vector<double>& scores, const std::vector<int>& labels);

struct EvalResult {
  double metric = 0.0;
  std::string metric_name;
  std::vector<std::string> warnings;
};

/// Accuracy for single-label splits, mAP over sigmoid scores for multi-label.
EvalResult evaluate(const Model& model, const Dataset& data, const std::vector<std::size_t>& split);

/// Final CLS features of `indices`.
std::vector<std::vector<double>> extract_features(const Model& model, const Dataset& data,
                                                  const std::vector<std::size_t>& indices);

struct RunRecord {
  std::uint64_t sampling_seed = 0;
  std::uint64_t train_seed = 0;
  double metric = 0.0;
  std::vector<double> epoch_loss;
};

struct RunSummary {
  std::vector<RunRecord> runs;
  double mean = 0.0;
  double variance = 0.0;  // population variance
  double min = 0.0;
  double max = 0.0;
};

RunSummary summarize(std::vector<RunRecord> runs);

struct MultiRunSpec {
  BackboneConfig backbone;
  PeftMethod method;
  std::uint64_t backbone_seed = 0;
  int shots = 1;
  std::vector<std::uint64_t> sampling_seeds = {0};
  std::vector<std::uint64_t> train_seeds = {0};
  TrainConfig train;
  unsigned threads = 1;
};

/// Trains and evaluates every (sampling, train seed) cell. Records come back
/// in sampling-major order regardless of thread count.
RunSummary multi_run(const MultiRunSpec& spec, const Dataset& data);

/// One cell of multi_run; exposed so callers can keep the trained model.
struct CellResult {
  RunRecord record;
  EvalResult eval;
  Episode episode;
  Model model;
};
CellResult run_cell(const MultiRunSpec& spec, const Dataset& data, std::uint64_t sampling_seed,
                    std::uint64_t train_seed);

std::string runs_csv(const RunSummary& summary, const std::string& metric_name);

}  // namespace eptlab
