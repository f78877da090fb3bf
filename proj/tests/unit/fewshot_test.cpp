#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "eptlab/errors.hpp"
#include "eptlab/fewshot.hpp"
#include "eptlab/rng.hpp"
#include "eptlab/serialization.hpp"
#include "support/oracles.hpp"

using namespace eptlab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("eptlab_fewshot_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string image_bytes(const Dataset& d) {
  std::string out;
  for (const auto& s : d.samples) {
    out.append(reinterpret_cast<const char*>(s.image.data().data()), s.image.size() * sizeof(double));
    for (int l : s.labels) out.push_back(static_cast<char>(l));
  }
  return out;
}

Dataset small_dataset(int classes, int per_class) {
  SynthSpec spec = SynthSpec::toy_colon();
  spec.num_classes = classes;
  spec.samples_per_class = per_class;
  return synth_dataset(spec, 0);
}

TrainConfig quick(int epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  return cfg;
}

// Perceptron on raw pixels with a bias term; converges iff the data are
// linearly separable, so reaching zero errors certifies separability.
bool perceptron_separates(const Dataset& d, int max_epochs) {
  const std::size_t dim = d.samples.front().image.size();
  std::vector<double> w(dim + 1, 0.0);
  for (int epoch = 0; epoch < max_epochs; ++epoch) {
    int errors = 0;
    for (const auto& s : d.samples) {
      const double y = s.primary_label() == 1 ? 1.0 : -1.0;
      double a = w[dim];
      for (std::size_t i = 0; i < dim; ++i) a += w[i] * s.image[i];
      if (y * a <= 0.0) {
        ++errors;
        for (std::size_t i = 0; i < dim; ++i) w[i] += y * s.image[i];
        w[dim] += y;
      }
    }
    if (errors == 0) return true;
  }
  return false;
}

}  // namespace

TEST(Synthetic, SameSeedGivesIdenticalBytes) {
  EXPECT_EQ(image_bytes(synth_dataset(SynthSpec::toy_colon(), 3)), image_bytes(synth_dataset(SynthSpec::toy_colon(), 3)));
  EXPECT_NE(image_bytes(synth_dataset(SynthSpec::toy_colon(), 3)), image_bytes(synth_dataset(SynthSpec::toy_colon(), 4)));
}

TEST(Synthetic, InvalidSpecIsAConfigError) {
  SynthSpec s = SynthSpec::toy_colon();
  s.num_classes = 1;
  EXPECT_THROW(s.validate(), ConfigError);
  s = SynthSpec::toy_colon();
  s.margin = -1.0;
  EXPECT_THROW(synth_dataset(s, 0), ConfigError);
  s = SynthSpec::toy_colon();
  s.blob_sigma = 0.0;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Synthetic, PresetsHaveTheDocumentedShape) {
  const Dataset colon = synth_dataset(SynthSpec::toy_colon(), 0);
  EXPECT_EQ(colon.num_classes, 2);
  EXPECT_EQ(colon.task_type, TaskType::SingleLabel);
  EXPECT_EQ(colon.samples.size(), 60u);
  EXPECT_EQ(colon.samples[0].image.shape(), (Shape{1, 16, 16}));
  const Dataset endo = synth_dataset(SynthSpec::toy_endo(), 0);
  EXPECT_EQ(endo.num_classes, 4);
  EXPECT_EQ(endo.task_type, TaskType::MultiLabel);
  EXPECT_NO_THROW(endo.validate());
}

TEST(Synthetic, InfiniteMarginIsLinearlySeparableOnRawPixels) {
  SynthSpec s = SynthSpec::toy_colon();
  s.margin = std::numeric_limits<double>::infinity();
  const Dataset d = synth_dataset(s, 0);
  EXPECT_TRUE(perceptron_separates(d, 1000));
}

TEST(Synthetic, SpecJsonRoundTrips) {
  SynthSpec s = SynthSpec::toy_endo();
  s.margin = std::numeric_limits<double>::infinity();
  const SynthSpec back = synth_spec_from_json(to_json(s));
  EXPECT_EQ(back.name, s.name);
  EXPECT_EQ(back.num_classes, s.num_classes);
  EXPECT_TRUE(std::isinf(back.margin));
  EXPECT_EQ(back.task_type, TaskType::MultiLabel);
}

TEST(Synthetic, UnknownSpecKeyNamesThePath) {
  try {
    synth_spec_from_json(Json{{"blob", 1}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("dataset.synthetic"), std::string::npos) << e.what();
  }
}

TEST(Episode, AllSamplesPerClassLeavesNothingToEvaluate) {
  EXPECT_THROW(sample_episode(small_dataset(2, 10), 10, 0), SamplingError);
}

TEST(Episode, TooFewSamplesIsASamplingError) {
  EXPECT_THROW(sample_episode(small_dataset(2, 10), 11, 0), SamplingError);
}

TEST(Episode, OneShotTwoClassesOfTen) {
  const Dataset d = small_dataset(2, 10);
  const Episode e = sample_episode(d, 1, 0);
  EXPECT_EQ(e.train.size(), 2u);
  EXPECT_EQ(e.eval.size(), 18u);
  std::set<int> labels;
  for (auto i : e.train) labels.insert(d.samples[i].primary_label());
  EXPECT_EQ(labels, (std::set<int>{0, 1}));
  std::set<std::size_t> all(e.train.begin(), e.train.end());
  all.insert(e.eval.begin(), e.eval.end());
  EXPECT_EQ(all.size(), 20u);
}

TEST(Episode, SeedsDrawTrainSetsUniformlyOverTheUniverse) {
  // 1-shot on two classes of ten: 100 equally likely train sets, so two
  // independent seeds agree with probability 1/100 and each sample is drawn
  // with probability 1/10.
  const Dataset d = small_dataset(2, 10);
  constexpr int kSeeds = 4000;
  std::vector<std::vector<std::size_t>> draws;
  std::map<std::size_t, int> counts;
  for (int s = 0; s < kSeeds; ++s) {
    auto t = sample_episode(d, 1, static_cast<std::uint64_t>(s)).train;
    std::sort(t.begin(), t.end());
    for (auto i : t) ++counts[i];
    draws.push_back(t);
  }
  int same = 0;
  for (int s = 0; s + 1 < kSeeds; s += 2) same += draws[static_cast<std::size_t>(s)] == draws[static_cast<std::size_t>(s) + 1];
  const double pairs = kSeeds / 2.0, p = 0.01;
  EXPECT_NEAR(same / pairs, p, 4.0 * std::sqrt(p * (1 - p) / pairs));
  EXPECT_EQ(counts.size(), 20u);
  for (const auto& [i, c] : counts) EXPECT_NEAR(c / double(kSeeds), 0.1, 4.0 * std::sqrt(0.09 / kSeeds)) << i;
}

TEST(Episode, MultiLabelDrawsKCarriersPerClass) {
  const Dataset d = synth_dataset(SynthSpec::toy_endo(), 0);
  const Episode e = sample_episode(d, 2, 5);
  std::set<std::size_t> unique(e.train.begin(), e.train.end());
  EXPECT_EQ(unique.size(), e.train.size());
  for (int k = 0; k < d.num_classes; ++k) {
    int carriers = 0;
    for (auto i : e.train) carriers += d.samples[i].labels[static_cast<std::size_t>(k)];
    EXPECT_GE(carriers, 2);
  }
}

TEST(Manifest, RoundTripsImagesAndLabels) {
  const fs::path dir = scratch("manifest");
  const Dataset d = synth_dataset(SynthSpec::toy_endo(), 1);
  const std::vector<std::size_t> idx = {3, 0, 7, 12};
  write_manifest(dir / "m.csv", d, idx, "payload");
  const Dataset back = read_manifest(dir / "m.csv", TaskType::MultiLabel);
  ASSERT_EQ(back.samples.size(), idx.size());
  EXPECT_EQ(back.num_classes, 4);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    EXPECT_EQ(back.samples[i].image, d.samples[idx[i]].image);
    EXPECT_EQ(back.samples[i].labels, d.samples[idx[i]].labels);
  }
}

TEST(Manifest, MissingOrTruncatedPayloadIsAnIngestionError) {
  const fs::path dir = scratch("manifest_bad");
  const Dataset d = small_dataset(2, 3);
  write_manifest(dir / "m.csv", d, {0, 1}, "payload");
  EXPECT_THROW(read_manifest(dir / "absent.csv", TaskType::SingleLabel), IngestionError);
  fs::path payload;
  for (const auto& e : fs::directory_iterator(dir / "payload")) payload = e.path();
  fs::resize_file(payload, fs::file_size(payload) - 8);
  EXPECT_THROW(read_manifest(dir / "m.csv", TaskType::SingleLabel), IngestionError);
}

TEST(Train, ZeroLearningRateLeavesParametersUntouched) {
  const Dataset d = synth_dataset(SynthSpec::toy_colon(), 0);
  const Episode e = sample_episode(d, 2, 0);
  Model m = Model::create(BackboneConfig{}, PeftMethod::ept(2), 0, 1);
  const ParameterStore before = m.parameters();
  TrainConfig cfg = quick(2);
  cfg.learning_rate = 0.0;
  train(m, d, e, cfg);
  EXPECT_EQ(m.parameters(), before);
}

TEST(Train, PropertyFreezeContractForEveryMethod) {
  const Dataset d = synth_dataset(SynthSpec::toy_colon(), 0);
  const Episode e = sample_episode(d, 2, 0);
  const std::vector<PeftMethod> methods = {
      PeftMethod::ept(2), PeftMethod::ept(2, EmbeddingWay::MultiCat), PeftMethod::vpt(2), PeftMethod::vp(),
      PeftMethod::lora(2), PeftMethod::adapter(4), PeftMethod::simple(MethodTag::Bias),
      PeftMethod::simple(MethodTag::Linear), PeftMethod::simple(MethodTag::Partial1),
      PeftMethod::simple(MethodTag::MLP3), PeftMethod::simple(MethodTag::Full)};
  for (const auto& method : methods) {
    Model m = Model::create(BackboneConfig{}, method, 0, 1);
    const ParameterStore before = m.parameters();
    const TrainableMask mask = m.trainable();
    train(m, d, e, quick(1));
    bool any_moved = false;
    for (const auto& [name, t] : before) {
      if (mask.contains(name)) {
        any_moved = any_moved || m.parameters().at(name) != t;
      } else {
        ASSERT_EQ(m.parameters().at(name), t) << method.label() << " changed frozen " << name;
      }
    }
    EXPECT_TRUE(any_moved) << method.label();
  }
}

TEST(Train, EptLossStrictlyDecreasesOverFirstFiveEpochs) {
  const Dataset d = synth_dataset(SynthSpec::toy_colon(), 0);
  const Episode e = sample_episode(d, 10, 0);
  Model m = Model::create(BackboneConfig{}, PeftMethod::ept(2), 0, 0);
  const TrainResult r = train(m, d, e, TrainConfig{});
  ASSERT_EQ(r.epoch_loss.size(), 20u);
  for (std::size_t i = 1; i < 5; ++i) EXPECT_LT(r.epoch_loss[i], r.epoch_loss[i - 1]) << "epoch " << i + 1;
}

TEST(Train, NanLossNamesTheEpoch) {
  Dataset d = synth_dataset(SynthSpec::toy_colon(), 0);
  const Episode e = sample_episode(d, 2, 0);
  for (auto i : e.train) d.samples[i].image[0] = std::numeric_limits<double>::quiet_NaN();
  Model m = Model::create(BackboneConfig{}, PeftMethod::simple(MethodTag::Linear), 0, 1);
  try {
    train(m, d, e, quick(3));
    FAIL() << "no divergence reported";
  } catch (const DivergenceError& err) {
    EXPECT_NE(std::string(err.what()).find("epoch 1"), std::string::npos) << err.what();
  }
}

TEST(Train, ConfigMustMatchTaskType) {
  TrainConfig cfg;
  cfg.loss = LossKind::BinaryCrossEntropy;
  EXPECT_THROW(cfg.validate(TaskType::SingleLabel), ConfigError);
  cfg.loss = LossKind::CrossEntropy;
  EXPECT_THROW(cfg.validate(TaskType::MultiLabel), ConfigError);
  EXPECT_EQ(loss_for(TaskType::MultiLabel), LossKind::BinaryCrossEntropy);
  TrainConfig bad;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(TaskType::SingleLabel), ConfigError);
}

TEST(Train, ConfigJsonRoundTripsAndReportsFieldPaths) {
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::Sgd;
  cfg.learning_rate = 0.125;
  const TrainConfig back = train_config_from_json(to_json(cfg));
  EXPECT_EQ(back.optimizer, OptimizerKind::Sgd);
  EXPECT_EQ(back.learning_rate, 0.125);
  try {
    train_config_from_json(Json{{"epochs", "many"}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.epochs"), std::string::npos) << e.what();
  }
}

TEST(Metrics, PerfectAndInvertedPredictions) {
  // Split the eval pool by whether the model's argmax agrees with the label:
  // the agreeing part scores accuracy 1, a balanced disagreeing part 0.
  const Dataset d = synth_dataset(SynthSpec::toy_colon(), 0);
  const Model m = Model::create(BackboneConfig{}, PeftMethod::simple(MethodTag::Linear), 0, 1);
  std::vector<std::size_t> right, wrong_by_class[2];
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const Tensor z = m.logits(d.samples[i].image);
    const int pred = z[1] > z[0] ? 1 : 0;
    const int label = d.samples[i].primary_label();
    if (pred == label) {
      right.push_back(i);
    } else {
      wrong_by_class[label].push_back(i);
    }
  }
  ASSERT_FALSE(right.empty());
  EXPECT_EQ(evaluate(m, d, right).metric, 1.0);
  const std::size_t k = std::min(wrong_by_class[0].size(), wrong_by_class[1].size());
  if (k > 0) {
    std::vector<std::size_t> wrong(wrong_by_class[0].begin(), wrong_by_class[0].begin() + static_cast<long>(k));
    wrong.insert(wrong.end(), wrong_by_class[1].begin(), wrong_by_class[1].begin() + static_cast<long>(k));
    EXPECT_EQ(evaluate(m, d, wrong).metric, 0.0);
  }
  EXPECT_EQ(*average_precision({0.9, 0.2, 0.8}, {1, 0, 1}), 1.0);
}

TEST(Metrics, InvertedRankingHasWorstAveragePrecision) {
  const std::vector<double> scores = {0.1, 0.2, 0.9, 0.8};
  const std::vector<int> labels = {1, 1, 0, 0};
  EXPECT_NEAR(*average_precision(scores, labels), (1.0 / 3.0 + 2.0 / 4.0) / 2.0, 1e-15);
}

TEST(Metrics, AveragePrecisionByHand) {
  EXPECT_NEAR(*average_precision({0.9, 0.8, 0.3}, {1, 0, 1}), 5.0 / 6.0, 1e-15);
  EXPECT_NEAR(oracle::average_precision({0.9, 0.8, 0.3}, {1, 0, 1}), 5.0 / 6.0, 1e-15);
}

TEST(Metrics, AllPositivesFirstIsOne) { EXPECT_EQ(*average_precision({5, 4, 3, 2, 1}, {1, 1, 0, 0, 0}), 1.0); }

TEST(Metrics, SinglePositiveLastIsOneOverM) {
  for (int m = 1; m <= 8; ++m) {
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < m; ++i) {
      scores.push_back(m - i);
      labels.push_back(i == m - 1);
    }
    EXPECT_NEAR(*average_precision(scores, labels), 1.0 / m, 1e-15);
  }
}

TEST(Metrics, NoPositivesGivesNoValue) { EXPECT_FALSE(average_precision({0.3, 0.2}, {0, 0}).has_value()); }

TEST(Metrics, PropertyRandomApMatchesOracleAndBounds) {
  Rng rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t m = 1 + rng.below(15);
    std::vector<double> scores(m);
    std::vector<int> labels(m);
    int pos = 0;
    for (std::size_t i = 0; i < m; ++i) {
      scores[i] = static_cast<double>(rng.below(6));  // ties on purpose
      labels[i] = rng.uniform() < 0.4;
      pos += labels[i];
    }
    const auto ap = average_precision(scores, labels);
    if (pos == 0) {
      ASSERT_FALSE(ap.has_value());
      continue;
    }
    ASSERT_NEAR(*ap, oracle::average_precision(scores, labels), 1e-15);
    ASSERT_GT(*ap, 0.0);
    ASSERT_LE(*ap, 1.0);
    // AP = 1 iff every positive precedes every negative in the stable ranking.
    std::vector<std::size_t> order(m);
    for (std::size_t i = 0; i < m; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
    bool separated = true;
    for (std::size_t r = 0; r < static_cast<std::size_t>(pos); ++r) separated = separated && labels[order[r]];
    ASSERT_EQ(*ap == 1.0, separated);
  }
}

TEST(Metrics, EvaluateAccuracyAndMapBounds) {
  const Dataset colon = synth_dataset(SynthSpec::toy_colon(), 0);
  const Model m = Model::create(BackboneConfig{}, PeftMethod::simple(MethodTag::Linear), 0, 1);
  const Episode e = sample_episode(colon, 1, 0);
  const EvalResult acc = evaluate(m, colon, e.eval);
  EXPECT_EQ(acc.metric_name, "accuracy");
  EXPECT_GE(acc.metric, 0.0);
  EXPECT_LE(acc.metric, 1.0);
  const Dataset endo = synth_dataset(SynthSpec::toy_endo(), 0);
  BackboneConfig cfg;
  cfg.num_classes = 4;
  const Model m4 = Model::create(cfg, PeftMethod::simple(MethodTag::Linear), 0, 1);
  const EvalResult map = evaluate(m4, endo, sample_episode(endo, 1, 0).eval);
  EXPECT_EQ(map.metric_name, "mAP");
  EXPECT_GT(map.metric, 0.0);
  EXPECT_LE(map.metric, 1.0);
  EXPECT_THROW(evaluate(m, colon, {}), EvaluationError);
}

TEST(Metrics, ClassWithoutPositivesIsSkippedWithWarning) {
  Dataset endo = synth_dataset(SynthSpec::toy_endo(), 0);
  std::vector<std::size_t> split;
  for (std::size_t i = 0; i < endo.samples.size() && split.size() < 10; ++i)
    if (!endo.samples[i].labels[3]) split.push_back(i);
  BackboneConfig cfg;
  cfg.num_classes = 4;
  const Model m = Model::create(cfg, PeftMethod::simple(MethodTag::Linear), 0, 1);
  const EvalResult r = evaluate(m, endo, split);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("3"), std::string::npos);
}

TEST(Runs, SingleRunHasZeroVariance) {
  const auto s = summarize({RunRecord{0, 0, 0.7, {}}});
  EXPECT_EQ(s.variance, 0.0);
  EXPECT_EQ(s.mean, 0.7);
}

TEST(Runs, IdenticalSeedsGiveIdenticalMetrics) {
  const Dataset d = synth_dataset(SynthSpec::toy_colon(), 0);
  MultiRunSpec spec;
  spec.method = PeftMethod::ept(2);
  spec.shots = 2;
  spec.sampling_seeds = {3, 3};
  spec.train_seeds = {1};
  spec.train = quick(2);
  const RunSummary s = multi_run(spec, d);
  ASSERT_EQ(s.runs.size(), 2u);
  EXPECT_EQ(s.runs[0].metric, s.runs[1].metric);
  EXPECT_EQ(s.runs[0].epoch_loss, s.runs[1].epoch_loss);
  EXPECT_EQ(s.variance, 0.0);
}

TEST(Runs, SummaryMatchesRecomputationFromCsv) {
  const Dataset d = synth_dataset(SynthSpec::toy_colon(), 0);
  MultiRunSpec spec;
  spec.shots = 2;
  spec.sampling_seeds = {0, 1, 2, 3, 4};
  spec.train_seeds = {0, 1, 2, 3};
  spec.train = quick(2);
  spec.threads = 2;
  const RunSummary s = multi_run(spec, d);
  ASSERT_EQ(s.runs.size(), 20u);
  std::istringstream csv(runs_csv(s, "accuracy"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "sampling_seed,train_seed,accuracy,final_loss");
  std::vector<double> metrics;
  while (std::getline(csv, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    ASSERT_EQ(cells.size(), 4u);
    metrics.push_back(std::stod(cells[2]));
  }
  ASSERT_EQ(metrics.size(), 20u);
  double mean = 0.0;
  for (double v : metrics) mean += v / 20.0;
  double var = 0.0;
  for (double v : metrics) var += (v - mean) * (v - mean) / 20.0;
  EXPECT_NEAR(s.mean, mean, 1e-15);
  EXPECT_NEAR(s.variance, var, 1e-15);
  EXPECT_EQ(s.min, *std::min_element(metrics.begin(), metrics.end()));
  EXPECT_EQ(s.max, *std::max_element(metrics.begin(), metrics.end()));
}

TEST(Runs, ThreadCountDoesNotChangeResults) {
  const Dataset d = synth_dataset(SynthSpec::toy_colon(), 0);
  MultiRunSpec spec;
  spec.method = PeftMethod::vpt(1);
  spec.shots = 2;
  spec.sampling_seeds = {0, 1};
  spec.train_seeds = {0, 1};
  spec.train = quick(1);
  const RunSummary one = multi_run(spec, d);
  spec.threads = 3;
  const RunSummary three = multi_run(spec, d);
  ASSERT_EQ(one.runs.size(), three.runs.size());
  for (std::size_t i = 0; i < one.runs.size(); ++i) {
    EXPECT_EQ(one.runs[i].sampling_seed, three.runs[i].sampling_seed);
    EXPECT_EQ(one.runs[i].metric, three.runs[i].metric);
    EXPECT_EQ(one.runs[i].epoch_loss, three.runs[i].epoch_loss);
  }
}

TEST(Runs, ZeroMarginIsChanceLevel) {
  SynthSpec s = SynthSpec::toy_colon();
  s.margin = 0.0;
  s.samples_per_class = 200;
  const Dataset d = synth_dataset(s, 0);
  MultiRunSpec spec;
  spec.shots = 10;
  spec.sampling_seeds = {0, 1, 2, 3};
  spec.train = quick(5);
  EXPECT_NEAR(multi_run(spec, d).mean, 0.5, 0.05);
}
