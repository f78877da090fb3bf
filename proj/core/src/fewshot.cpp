#include "eptlab/fewshot.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <thread>

#include "eptlab/errors.hpp"
#include "eptlab/rng.hpp"
#include "eptlab/serialization.hpp"

namespace eptlab {

namespace fs = std::filesystem;

std::string_view to_string(TaskType t) { return t == TaskType::SingleLabel ? "single_label" : "multi_label"; }

TaskType parse_task_type(std::string_view s) {
  if (s == "single_label") return TaskType::SingleLabel;
  if (s == "multi_label") return TaskType::MultiLabel;
  throw ConfigError("unknown task type '" + std::string(s) + "'");
}

int Sample::primary_label() const {
  for (std::size_t k = 0; k < labels.size(); ++k)
    if (labels[k] != 0) return static_cast<int>(k);
  return -1;
}

void Dataset::validate() const {
  if (num_classes < 1) throw ConfigError("dataset needs at least one class");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& labels = samples[i].labels;
    if (labels.size() != static_cast<std::size_t>(num_classes)) {
      throw ConfigError("sample " + std::to_string(i) + " has " + std::to_string(labels.size()) +
                        " labels, expected " + std::to_string(num_classes));
    }
    int positives = 0;
    for (int v : labels) {
      if (v != 0 && v != 1) throw ConfigError("sample " + std::to_string(i) + " has a non-binary label");
      positives += v;
    }
    if (task_type == TaskType::SingleLabel && positives != 1) {
      throw ConfigError("sample " + std::to_string(i) + " must have exactly one positive label");
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic data

SynthSpec SynthSpec::toy_colon() { return SynthSpec{}; }

SynthSpec SynthSpec::toy_endo() {
  SynthSpec s;
  s.name = "toy-endo";
  s.num_classes = 4;
  s.samples_per_class = 20;
  s.task_type = TaskType::MultiLabel;
  return s;
}

void SynthSpec::validate() const {
  if (num_classes < 2) throw ConfigError("dataset.synthetic.num_classes must be >= 2");
  if (samples_per_class < 1) throw ConfigError("dataset.synthetic.samples_per_class must be >= 1");
  if (image_side < 4) throw ConfigError("dataset.synthetic.image_side must be >= 4");
  if (channels < 1) throw ConfigError("dataset.synthetic.channels must be >= 1");
  if (std::isnan(margin) || margin < 0.0) throw ConfigError("dataset.synthetic.margin must be >= 0");
  if (!(blob_sigma > 0.0) || !std::isfinite(blob_sigma)) throw ConfigError("dataset.synthetic.blob_sigma must be > 0");
  if (!(jitter >= 0.0) || !std::isfinite(jitter)) throw ConfigError("dataset.synthetic.jitter must be >= 0");
}

namespace {

struct Point {
  double x;
  double y;
};

std::vector<Point> class_centers(const SynthSpec& spec) {
  const double mid = (spec.image_side - 1) / 2.0;
  const double radius = spec.image_side / 4.0;
  std::vector<Point> out;
  for (int k = 0; k < spec.num_classes; ++k) {
    const double a = 2.0 * std::numbers::pi * k / spec.num_classes;
    out.push_back({mid + radius * std::cos(a), mid + radius * std::sin(a)});
  }
  return out;
}

// Support radius for the noiseless case: neighbouring discs stay disjoint
// even after jitter moves both centers.
double disc_radius(const SynthSpec& spec) {
  const double spacing = 2.0 * (spec.image_side / 4.0) * std::sin(std::numbers::pi / spec.num_classes);
  return std::max(0.5, spacing / 2.0 - spec.jitter - 0.25);
}

// Widths differ per class so a class is recognizable from patch content, not
// only from where its blob sits.
double class_sigma(const SynthSpec& spec, int k) {
  return spec.blob_sigma * (1.0 + 0.5 * k / std::max(1, spec.num_classes - 1));
}

std::vector<int> draw_label_set(const SynthSpec& spec, int anchor, Rng& rng) {
  std::vector<int> labels(spec.num_classes, 0);
  labels[anchor] = 1;
  if (spec.task_type == TaskType::MultiLabel) {
    for (int k = 0; k < spec.num_classes; ++k)
      if (k != anchor && rng.uniform() < 0.25) labels[k] = 1;
  }
  return labels;
}

Tensor render(const SynthSpec& spec, const std::vector<int>& labels, const std::vector<Point>& centers, Rng& rng) {
  const int side = spec.image_side;
  const bool noiseless = std::isinf(spec.margin);
  const double amplitude = noiseless ? 1.0 : spec.margin;
  const double support = disc_radius(spec);
  Tensor img({static_cast<std::size_t>(spec.channels), static_cast<std::size_t>(side), static_cast<std::size_t>(side)});
  std::vector<double> plane(static_cast<std::size_t>(side) * side, 0.0);
  for (int k = 0; k < spec.num_classes; ++k) {
    if (labels[k] == 0) continue;
    const double cx = centers[k].x + spec.jitter * rng.uniform(-1.0, 1.0);
    const double cy = centers[k].y + spec.jitter * rng.uniform(-1.0, 1.0);
    const double sigma = class_sigma(spec, k);
    for (int r = 0; r < side; ++r) {
      for (int c = 0; c < side; ++c) {
        const double d2 = (c - cx) * (c - cx) + (r - cy) * (r - cy);
        if (noiseless && d2 > support * support) continue;
        plane[static_cast<std::size_t>(r) * side + c] += amplitude * std::exp(-d2 / (2.0 * sigma * sigma));
      }
    }
  }
  for (int ch = 0; ch < spec.channels; ++ch) {
    for (std::size_t p = 0; p < plane.size(); ++p) {
      img[static_cast<std::size_t>(ch) * plane.size() + p] = plane[p] + (noiseless ? 0.0 : rng.normal());
    }
  }
  return img;
}

}  // namespace

Dataset synth_dataset(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng = Rng::stream(seed, "dataset." + spec.name);
  const auto centers = class_centers(spec);
  Dataset data;
  data.task_type = spec.task_type;
  data.num_classes = spec.num_classes;
  for (int i = 0; i < spec.samples_per_class; ++i) {
    for (int k = 0; k < spec.num_classes; ++k) {
      Sample s;
      s.labels = draw_label_set(spec, k, rng);
      s.image = render(spec, s.labels, centers, rng);
      data.samples.push_back(std::move(s));
    }
  }
  data.validate();
  return data;
}

Json to_json(const SynthSpec& spec) {
  return Json{{"name", spec.name},
              {"num_classes", spec.num_classes},
              {"samples_per_class", spec.samples_per_class},
              {"image_side", spec.image_side},
              {"channels", spec.channels},
              {"margin", std::isinf(spec.margin) ? Json("inf") : Json(spec.margin)},
              {"blob_sigma", spec.blob_sigma},
              {"jitter", spec.jitter},
              {"task_type", std::string(to_string(spec.task_type))}};
}

SynthSpec synth_spec_from_json(const Json& j, const std::string& path) {
  FieldReader r(j, path);
  r.reject_unknown({"name", "num_classes", "samples_per_class", "image_side", "channels", "margin", "blob_sigma",
                    "jitter", "task_type"});
  SynthSpec s;
  if (r.has("name")) {
    const std::string name = r.get_string("name");
    if (name == "toy-endo") s = SynthSpec::toy_endo();
    else if (name != "toy-colon") s.name = name;
  }
  if (r.has("num_classes")) s.num_classes = r.get_int("num_classes");
  if (r.has("samples_per_class")) s.samples_per_class = r.get_int("samples_per_class");
  if (r.has("image_side")) s.image_side = r.get_int("image_side");
  if (r.has("channels")) s.channels = r.get_int("channels");
  if (r.has("margin")) s.margin = r.get_double("margin");
  if (r.has("blob_sigma")) s.blob_sigma = r.get_double("blob_sigma");
  if (r.has("jitter")) s.jitter = r.get_double("jitter");
  if (r.has("task_type")) {
    try {
      s.task_type = parse_task_type(r.get_string("task_type"));
    } catch (const ConfigError& e) {
      throw ConfigError(r.path("task_type") + ": " + e.what());
    }
  }
  try {
    s.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return s;
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

void put_le(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
}

double get_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int b = 7; b >= 0; --b) bits = (bits << 8) | p[b];
  return std::bit_cast<double>(bits);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

Tensor read_payload(const fs::path& path) {
  std::string raw;
  try {
    raw = read_file(path);
  } catch (const LoadError& e) {
    throw IngestionError(e.what());
  }
  const auto nl = raw.find('\n');
  if (nl == std::string::npos) throw IngestionError(path.string() + ": missing shape header");
  std::istringstream header(raw.substr(0, nl));
  std::string word;
  header >> word;
  if (word != "shape") throw IngestionError(path.string() + ": header must start with 'shape'");
  Shape shape;
  long long dim = 0;
  while (header >> dim) {
    if (dim <= 0) throw IngestionError(path.string() + ": non-positive dimension");
    shape.push_back(static_cast<std::size_t>(dim));
  }
  if (shape.size() != 3) throw IngestionError(path.string() + ": expected shape 'c h w'");
  const std::size_t n = shape_size(shape);
  if (raw.size() - nl - 1 != n * 8) {
    throw IngestionError(path.string() + ": payload holds " + std::to_string(raw.size() - nl - 1) +
                         " bytes, shape needs " + std::to_string(n * 8));
  }
  std::vector<double> values(n);
  const auto* bytes = reinterpret_cast<const unsigned char*>(raw.data() + nl + 1);
  for (std::size_t i = 0; i < n; ++i) values[i] = get_le(bytes + 8 * i);
  return Tensor(shape, std::move(values));
}

}  // namespace

void write_manifest(const fs::path& manifest, const Dataset& data, const std::vector<std::size_t>& indices,
                    const fs::path& payload_dir) {
  const fs::path base = manifest.parent_path();
  fs::create_directories(base / payload_dir);
  std::string csv = "sample_id,label_vector,path\n";
  for (std::size_t idx : indices) {
    const Sample& s = data.samples.at(idx);
    const fs::path rel = payload_dir / ("sample_" + std::to_string(idx) + ".f64");
    std::string payload = "shape";
    for (std::size_t d : s.image.shape()) payload += " " + std::to_string(d);
    payload += "\n";
    for (double v : s.image.data()) put_le(payload, v);
    write_file_atomic(base / rel, payload);
    std::string labels;
    for (std::size_t k = 0; k < s.labels.size(); ++k) labels += (k ? ";" : "") + std::to_string(s.labels[k]);
    csv += std::to_string(idx) + "," + labels + "," + rel.generic_string() + "\n";
  }
  write_file_atomic(manifest, csv);
}

Dataset read_manifest(const fs::path& manifest, TaskType task_type) {
  std::string text;
  try {
    text = read_file(manifest);
  } catch (const LoadError& e) {
    throw IngestionError(e.what());
  }
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "sample_id,label_vector,path") {
    throw IngestionError(manifest.string() + ": expected header 'sample_id,label_vector,path'");
  }
  Dataset data;
  data.task_type = task_type;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    if (cells.size() != 3) throw IngestionError(manifest.string() + ":" + std::to_string(row) + ": expected 3 fields");
    Sample s;
    for (const auto& v : split(cells[1], ';')) {
      if (v != "0" && v != "1") {
        throw IngestionError(manifest.string() + ":" + std::to_string(row) + ": label entries must be 0 or 1");
      }
      s.labels.push_back(v == "1" ? 1 : 0);
    }
    if (data.num_classes == 0) data.num_classes = static_cast<int>(s.labels.size());
    s.image = read_payload(manifest.parent_path() / cells[2]);
    if (!data.samples.empty() && s.image.shape() != data.samples.front().image.shape()) {
      throw IngestionError(manifest.string() + ":" + std::to_string(row) + ": image shape " + s.image.shape_string() +
                           " differs from " + data.samples.front().image.shape_string());
    }
    data.samples.push_back(std::move(s));
  }
  if (data.samples.empty()) throw IngestionError(manifest.string() + ": no samples");
  try {
    data.validate();
  } catch (const ConfigError& e) {
    throw IngestionError(manifest.string() + ": " + e.what());
  }
  return data;
}

// ---------------------------------------------------------------------------
// Episodes

Episode sample_episode(const Dataset& data, int shots, std::uint64_t seed) {
  if (shots < 1) throw SamplingError("shots must be >= 1");
  Rng rng = Rng::stream(seed, "episode");
  std::vector<bool> taken(data.samples.size(), false);
  Episode ep;
  ep.shots = shots;
  ep.seed = seed;
  for (int k = 0; k < data.num_classes; ++k) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < data.samples.size(); ++i)
      if (!taken[i] && data.samples[i].labels[k] == 1) pool.push_back(i);
    if (pool.size() < static_cast<std::size_t>(shots)) {
      throw SamplingError("class " + std::to_string(k) + " has " + std::to_string(pool.size()) +
                          " available samples, " + std::to_string(shots) + " shots requested");
    }
    rng.shuffle(pool);
    for (int s = 0; s < shots; ++s) {
      taken[pool[s]] = true;
      ep.train.push_back(pool[s]);
    }
  }
  for (std::size_t i = 0; i < data.samples.size(); ++i)
    if (!taken[i]) ep.eval.push_back(i);
  if (ep.eval.empty()) throw SamplingError("episode leaves an empty eval split");
  return ep;
}

// ---------------------------------------------------------------------------
// Training

LossKind loss_for(TaskType task) {
  return task == TaskType::SingleLabel ? LossKind::CrossEntropy : LossKind::BinaryCrossEntropy;
}

void TrainConfig::validate(TaskType task) const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("train.learning_rate must be >= 0");
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2 must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("train.eps must be > 0");
  if (loss && *loss != loss_for(task)) {
    throw ConfigError("train.loss does not match the " + std::string(to_string(task)) + " task");
  }
}

namespace {

std::string_view loss_name(LossKind k) { return k == LossKind::CrossEntropy ? "cross_entropy" : "binary_cross_entropy"; }

}  // namespace

Json to_json(const TrainConfig& cfg) {
  Json j{{"learning_rate", cfg.learning_rate},
         {"epochs", cfg.epochs},
         {"batch_size", cfg.batch_size},
         {"optimizer", cfg.optimizer == OptimizerKind::Adam ? "adam" : "sgd"},
         {"seed", cfg.seed},
         {"beta1", cfg.beta1},
         {"beta2", cfg.beta2},
         {"eps", cfg.eps}};
  if (cfg.loss) j["loss"] = std::string(loss_name(*cfg.loss));
  return j;
}

TrainConfig train_config_from_json(const Json& j, const std::string& path) {
  FieldReader r(j, path);
  r.reject_unknown({"learning_rate", "epochs", "batch_size", "optimizer", "seed", "loss", "beta1", "beta2", "eps"});
  TrainConfig cfg;
  if (r.has("learning_rate")) cfg.learning_rate = r.get_double("learning_rate");
  if (r.has("epochs")) cfg.epochs = r.get_int("epochs");
  if (r.has("batch_size")) cfg.batch_size = r.get_int("batch_size");
  if (r.has("seed")) cfg.seed = r.get_uint("seed");
  if (r.has("beta1")) cfg.beta1 = r.get_double("beta1");
  if (r.has("beta2")) cfg.beta2 = r.get_double("beta2");
  if (r.has("eps")) cfg.eps = r.get_double("eps");
  if (r.has("optimizer")) {
    const auto s = r.get_string("optimizer");
    if (s == "adam") cfg.optimizer = OptimizerKind::Adam;
    else if (s == "sgd") cfg.optimizer = OptimizerKind::Sgd;
    else throw ConfigError(r.path("optimizer") + ": unknown optimizer '" + s + "' (adam, sgd)");
  }
  if (r.has("loss")) {
    const auto s = r.get_string("loss");
    if (s == "cross_entropy") cfg.loss = LossKind::CrossEntropy;
    else if (s == "binary_cross_entropy") cfg.loss = LossKind::BinaryCrossEntropy;
    else throw ConfigError(r.path("loss") + ": unknown loss '" + s + "'");
  }
  return cfg;
}

Evaluation batch_objective(const Model& model, const ParameterStore& params, const Dataset& data,
                           const std::vector<std::size_t>& indices, const TrainableMask& mask, LossKind loss) {
  if (indices.empty()) throw ContractError("batch_objective needs at least one sample");
  Graph g;
  Var total;
  for (std::size_t idx : indices) {
    const Sample& s = data.samples.at(idx);
    const Var logits = model.forward_with(params, g, s.image, mask).logits();
    Var term;
    if (loss == LossKind::CrossEntropy) {
      term = softmax_cross_entropy(logits, static_cast<std::size_t>(s.primary_label()));
    } else {
      term = sigmoid_binary_cross_entropy(logits, std::vector<double>(s.labels.begin(), s.labels.end()));
    }
    total = total.valid() ? add(total, term) : term;
  }
  const Var mean = scale(total, 1.0 / static_cast<double>(indices.size()));
  Evaluation out;
  out.loss = mean.value().item();
  out.gradients = g.backward(mean);
  return out;
}

TrainResult train(Model& model, const Dataset& data, const Episode& episode, const TrainConfig& cfg) {
  cfg.validate(data.task_type);
  const TrainableMask mask = model.trainable();
  if (mask.empty()) throw ContractError("method " + model.method().label() + " has no trainable parameters");
  if (episode.train.empty()) throw ContractError("episode has an empty train split");
  const LossKind loss = cfg.loss.value_or(loss_for(data.task_type));

  ParameterStore& params = model.parameters();
  std::map<std::string, std::vector<double>> m1, m2;
  for (const auto& name : mask) {
    m1[name].assign(params.at(name).size(), 0.0);
    m2[name].assign(params.at(name).size(), 0.0);
  }
  Rng order_rng = Rng::stream(cfg.seed, "train.order");
  std::vector<std::size_t> order = episode.train;
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  long long step = 0;

  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + batch)));
      Evaluation ev = batch_objective(model, params, data, idx, mask, loss);
      if (!std::isfinite(ev.loss)) {
        throw DivergenceError("non-finite loss in epoch " + std::to_string(epoch + 1));
      }
      loss_sum += ev.loss * static_cast<double>(idx.size());
      ++step;
      const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      for (const auto& name : mask) {
        auto it = ev.gradients.find(name);
        if (it == ev.gradients.end()) continue;
        auto& w = params.at(name).data();
        const auto& gr = it->second.data();
        if (cfg.optimizer == OptimizerKind::Sgd) {
          for (std::size_t i = 0; i < w.size(); ++i) w[i] -= cfg.learning_rate * gr[i];
          continue;
        }
        auto& a = m1[name];
        auto& b = m2[name];
        for (std::size_t i = 0; i < w.size(); ++i) {
          a[i] = cfg.beta1 * a[i] + (1.0 - cfg.beta1) * gr[i];
          b[i] = cfg.beta2 * b[i] + (1.0 - cfg.beta2) * gr[i] * gr[i];
          w[i] -= cfg.learning_rate * (a[i] / bc1) / (std::sqrt(b[i] / bc2) + cfg.eps);
        }
      }
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Metrics

std::optional<double> average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ContractError("average_precision: scores and labels differ in length");
  std::vector<std::size_t> rank(scores.size());
  for (std::size_t i = 0; i < rank.size(); ++i) rank[i] = i;
  std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double total = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < rank.size(); ++r) {
    if (labels[rank[r]] != 0) {
      ++hits;
      total += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  if (hits == 0) return std::nullopt;
  return total / static_cast<double>(hits);
}

EvalResult evaluate(const Model& model, const Dataset& data, const std::vector<std::size_t>& split) {
  if (split.empty()) throw EvaluationError("cannot evaluate an empty split");
  std::vector<Tensor> logits;
  logits.reserve(split.size());
  for (std::size_t idx : split) logits.push_back(model.logits(data.samples.at(idx).image));

  EvalResult out;
  if (data.task_type == TaskType::SingleLabel) {
    out.metric_name = "accuracy";
    std::size_t correct = 0;
    for (std::size_t i = 0; i < split.size(); ++i) {
      const auto& v = logits[i].data();
      const auto pred = static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
      if (pred == data.samples[split[i]].primary_label()) ++correct;
    }
    out.metric = static_cast<double>(correct) / static_cast<double>(split.size());
    return out;
  }

  out.metric_name = "mAP";
  double sum = 0.0;
  int counted = 0;
  for (int k = 0; k < data.num_classes; ++k) {
    std::vector<double> scores;
    std::vector<int> labels;
    for (std::size_t i = 0; i < split.size(); ++i) {
      scores.push_back(1.0 / (1.0 + std::exp(-logits[i][static_cast<std::size_t>(k)])));
      labels.push_back(data.samples[split[i]].labels[k]);
    }
    if (auto ap = average_precision(scores, labels)) {
      sum += *ap;
      ++counted;
    } else {
      out.warnings.push_back("class " + std::to_string(k) + " has no positives in the split; skipped in mAP");
    }
  }
  if (counted == 0) throw EvaluationError("no class has a positive sample in the split");
  out.metric = sum / counted;
  return out;
}

std::vector<std::vector<double>> extract_features(const Model& model, const Dataset& data,
                                                  const std::vector<std::size_t>& indices) {
  std::vector<std::vector<double>> out;
  out.reserve(indices.size());
  for (std::size_t idx : indices) {
    Graph g;
    out.push_back(model.forward(g, data.samples.at(idx).image).cls().value().data());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multi-run

RunSummary summarize(std::vector<RunRecord> runs) {
  RunSummary s;
  s.runs = std::move(runs);
  if (s.runs.empty()) return s;
  double total = 0.0;
  s.min = std::numeric_limits<double>::infinity();
  s.max = -std::numeric_limits<double>::infinity();
  for (const auto& r : s.runs) {
    total += r.metric;
    s.min = std::min(s.min, r.metric);
    s.max = std::max(s.max, r.metric);
  }
  s.mean = total / static_cast<double>(s.runs.size());
  double sq = 0.0;
  for (const auto& r : s.runs) sq += (r.metric - s.mean) * (r.metric - s.mean);
  s.variance = sq / static_cast<double>(s.runs.size());
  return s;
}

CellResult run_cell(const MultiRunSpec& spec, const Dataset& data, std::uint64_t sampling_seed,
                    std::uint64_t train_seed) {
  Episode ep = sample_episode(data, spec.shots, sampling_seed);
  Model model = Model::create(spec.backbone, spec.method, spec.backbone_seed, train_seed);
  TrainConfig cfg = spec.train;
  cfg.seed = train_seed;
  TrainResult tr = train(model, data, ep, cfg);
  EvalResult ev = evaluate(model, data, ep.eval);
  RunRecord rec{sampling_seed, train_seed, ev.metric, std::move(tr.epoch_loss)};
  return CellResult{std::move(rec), std::move(ev), std::move(ep), std::move(model)};
}

RunSummary multi_run(const MultiRunSpec& spec, const Dataset& data) {
  if (spec.sampling_seeds.empty() || spec.train_seeds.empty()) throw ConfigError("multi_run needs at least one run");
  std::vector<std::pair<std::uint64_t, std::uint64_t>> cells;
  for (auto s : spec.sampling_seeds)
    for (auto t : spec.train_seeds) cells.emplace_back(s, t);

  std::vector<std::optional<RunRecord>> records(cells.size());
  std::vector<std::exception_ptr> errors(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        records[i] = run_cell(spec, data, cells[i].first, cells[i].second).record;
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(spec.threads, static_cast<unsigned>(cells.size())));
  {
    std::vector<std::jthread> pool;
    for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
    worker();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<RunRecord> out;
  for (auto& r : records) out.push_back(std::move(*r));
  return summarize(std::move(out));
}

std::string runs_csv(const RunSummary& summary, const std::string& metric_name) {
  std::string csv = "sampling_seed,train_seed," + metric_name + ",final_loss\n";
  for (const auto& r : summary.runs) {
    csv += std::to_string(r.sampling_seed) + "," + std::to_string(r.train_seed) + "," + format_double(r.metric) + "," +
           (r.epoch_loss.empty() ? std::string("") : format_double(r.epoch_loss.back())) + "\n";
  }
  return csv;
}

}  // namespace eptlab
