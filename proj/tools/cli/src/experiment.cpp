#include "eptlab_cli/experiment.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>

#include "eptlab/errors.hpp"
#include "eptlab/serialization.hpp"

namespace eptlab::cli {

namespace {

template <typename T, typename Parse>
std::vector<T> read_list(const FieldReader& r, const std::string& key, Parse parse) {
  const Json& raw = r.raw(key);
  if (!raw.is_array() || raw.empty()) throw ConfigError(r.path(key) + " must be a non-empty array");
  std::vector<T> out;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const std::string where = r.path(key) + "[" + std::to_string(i) + "]";
    try {
      out.push_back(parse(raw[i]));
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    } catch (const Json::exception&) {
      throw ConfigError(where + " has the wrong type");
    }
  }
  return out;
}

int as_int(const Json& v) {
  if (!v.is_number_integer()) throw ConfigError("expected an integer");
  return v.get<int>();
}

std::uint64_t as_seed(const Json& v) {
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
    throw ConfigError("expected a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

double as_double(const Json& v) {
  if (!v.is_number()) throw ConfigError("expected a number");
  return v.get<double>();
}

std::string as_string(const Json& v) {
  if (!v.is_string()) throw ConfigError("expected a string");
  return v.get<std::string>();
}

DatasetSource parse_dataset(const Json& j) {
  FieldReader r(j, "dataset");
  r.reject_unknown({"synthetic", "seed", "manifest", "task_type"});
  DatasetSource d;
  d.synthetic.reset();
  if (r.has("synthetic") && r.has("manifest")) throw ConfigError("dataset: give either synthetic or manifest, not both");
  if (r.has("manifest")) {
    d.manifest = r.get_string("manifest");
    if (r.has("seed")) throw ConfigError("dataset.seed is only meaningful for synthetic data");
    if (r.has("task_type")) {
      try {
        d.task_type = parse_task_type(r.get_string("task_type"));
      } catch (const ConfigError& e) {
        throw ConfigError(r.path("task_type") + ": " + e.what());
      }
    }
    return d;
  }
  if (r.has("task_type")) throw ConfigError("dataset.task_type belongs inside dataset.synthetic");
  d.synthetic = r.has("synthetic") ? synth_spec_from_json(r.raw("synthetic"), r.path("synthetic")) : SynthSpec::toy_colon();
  if (r.has("seed")) d.seed = r.get_uint("seed");
  d.task_type = d.synthetic->task_type;
  return d;
}

SweepValues parse_sweep(const Json& j) {
  FieldReader r(j, "sweep");
  r.reject_unknown({"prompt_length", "relative_prompt_length", "depth", "orders", "embedding_way", "shots"});
  SweepValues s;
  if (r.has("prompt_length")) s.prompt_length = read_list<int>(r, "prompt_length", as_int);
  if (r.has("relative_prompt_length")) {
    s.relative_prompt_length = read_list<double>(r, "relative_prompt_length", as_double);
  }
  if (s.prompt_length && s.relative_prompt_length) {
    throw ConfigError("sweep: give prompt_length or relative_prompt_length, not both");
  }
  if (r.has("depth")) s.depth = read_list<int>(r, "depth", as_int);
  if (r.has("orders")) {
    s.orders = read_list<DepthOrder>(r, "orders", [](const Json& v) { return parse_depth_order(as_string(v)); });
  }
  if (r.has("embedding_way")) {
    s.embedding_way =
        read_list<EmbeddingWay>(r, "embedding_way", [](const Json& v) { return parse_embedding_way(as_string(v)); });
  }
  if (r.has("shots")) s.shots = read_list<int>(r, "shots", as_int);
  return s;
}

Json sweep_json(const SweepValues& s) {
  Json j = Json::object();
  if (s.prompt_length) j["prompt_length"] = *s.prompt_length;
  if (s.relative_prompt_length) j["relative_prompt_length"] = *s.relative_prompt_length;
  if (s.depth) j["depth"] = *s.depth;
  if (s.orders) {
    Json a = Json::array();
    for (auto o : *s.orders) a.push_back(std::string(to_string(o)));
    j["orders"] = a;
  }
  if (s.embedding_way) {
    Json a = Json::array();
    for (auto w : *s.embedding_way) a.push_back(std::string(to_string(w)));
    j["embedding_way"] = a;
  }
  if (s.shots) j["shots"] = *s.shots;
  return j;
}

void cross_validate(ExperimentConfig& cfg, bool num_classes_given) {
  try {
    cfg.backbone.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("backbone: ") + e.what());
  }
  if (cfg.dataset.synthetic) {
    const SynthSpec& s = *cfg.dataset.synthetic;
    if (!num_classes_given) cfg.backbone.num_classes = s.num_classes;
    if (s.num_classes != cfg.backbone.num_classes) {
      throw ConfigError("backbone.num_classes (" + std::to_string(cfg.backbone.num_classes) +
                        ") does not match dataset.synthetic.num_classes (" + std::to_string(s.num_classes) + ")");
    }
    if (s.image_side != cfg.backbone.image_side) {
      throw ConfigError("dataset.synthetic.image_side (" + std::to_string(s.image_side) +
                        ") does not match backbone.image_side (" + std::to_string(cfg.backbone.image_side) + ")");
    }
    if (s.channels != cfg.backbone.channels) {
      throw ConfigError("dataset.synthetic.channels (" + std::to_string(s.channels) +
                        ") does not match backbone.channels (" + std::to_string(cfg.backbone.channels) + ")");
    }
    if (cfg.shots > s.samples_per_class || cfg.shots * s.num_classes >= s.samples_per_class * s.num_classes) {
      throw ConfigError("shots (" + std::to_string(cfg.shots) + ") leaves no eval samples with " +
                        std::to_string(s.samples_per_class) + " samples per class");
    }
  }
  if (cfg.shots < 1) throw ConfigError("shots must be >= 1");
  for (std::size_t i = 0; i < cfg.methods.size(); ++i) {
    try {
      cfg.methods[i] = cfg.methods[i].resolved(cfg.backbone);
    } catch (const ConfigError& e) {
      throw ConfigError("methods[" + std::to_string(i) + "]: " + e.what());
    }
  }
  cfg.train.validate(cfg.dataset.task_type);
  if (!cfg.train.loss) cfg.train.loss = loss_for(cfg.dataset.task_type);
  if (cfg.sweep.shots) {
    for (int k : *cfg.sweep.shots)
      if (k < 1) throw ConfigError("sweep.shots entries must be >= 1");
  }
}

}  // namespace

ExperimentConfig parse_experiment(const Json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  FieldReader r(j, "config");
  r.reject_unknown({"backbone", "backbone_seed", "method", "methods", "dataset", "shots", "sampling_seeds",
                    "train_seeds", "train", "output_dir", "sweep"});
  ExperimentConfig cfg;
  bool num_classes_given = false;
  if (r.has("backbone")) {
    cfg.backbone = backbone_from_json(r.raw("backbone"));
    num_classes_given = r.raw("backbone").contains("num_classes");
  }
  if (r.has("backbone_seed")) cfg.backbone_seed = r.get_uint("backbone_seed");
  if (r.has("method") && r.has("methods")) throw ConfigError("config: give method or methods, not both");
  if (r.has("method")) cfg.methods = {method_from_json(r.raw("method"))};
  if (r.has("methods")) {
    const Json& list = r.raw("methods");
    if (!list.is_array() || list.empty()) throw ConfigError("methods must be a non-empty array");
    cfg.methods.clear();
    for (std::size_t i = 0; i < list.size(); ++i) {
      cfg.methods.push_back(method_from_json(list[i], "methods[" + std::to_string(i) + "]"));
    }
  }
  if (r.has("dataset")) cfg.dataset = parse_dataset(r.raw("dataset"));
  if (r.has("shots")) cfg.shots = r.get_int("shots");
  if (r.has("sampling_seeds")) cfg.sampling_seeds = read_list<std::uint64_t>(r, "sampling_seeds", as_seed);
  if (r.has("train_seeds")) cfg.train_seeds = read_list<std::uint64_t>(r, "train_seeds", as_seed);
  if (r.has("train")) cfg.train = train_config_from_json(r.raw("train"));
  if (r.has("output_dir")) cfg.output_dir = r.get_string("output_dir");
  if (r.has("sweep")) cfg.sweep = parse_sweep(r.raw("sweep"));
  cross_validate(cfg, num_classes_given);
  return cfg;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const LoadError& e) {
    throw ConfigError(e.what());
  }
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::exception& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return parse_experiment(j);
}

Json to_json(const ExperimentConfig& cfg) {
  Json methods = Json::array();
  for (const auto& m : cfg.methods) methods.push_back(to_json(m));
  Json dataset = Json::object();
  if (cfg.dataset.manifest) {
    dataset["manifest"] = *cfg.dataset.manifest;
    dataset["task_type"] = std::string(to_string(cfg.dataset.task_type));
  } else {
    dataset["synthetic"] = to_json(*cfg.dataset.synthetic);
    dataset["seed"] = cfg.dataset.seed;
  }
  Json train = to_json(cfg.train);
  // seeds come from train_seeds; the per-run seed inside train is unused.
  train.erase("seed");
  Json j{{"backbone", to_json(cfg.backbone)},
         {"backbone_seed", cfg.backbone_seed},
         {"methods", methods},
         {"dataset", dataset},
         {"shots", cfg.shots},
         {"sampling_seeds", cfg.sampling_seeds},
         {"train_seeds", cfg.train_seeds},
         {"train", train},
         {"output_dir", cfg.output_dir}};
  const Json sweep = sweep_json(cfg.sweep);
  if (!sweep.empty()) j["sweep"] = sweep;
  return j;
}

Dataset load_dataset(const ExperimentConfig& cfg) {
  if (cfg.dataset.synthetic) return synth_dataset(*cfg.dataset.synthetic, cfg.dataset.seed);
  Dataset d = read_manifest(*cfg.dataset.manifest, cfg.dataset.task_type);
  const Shape expected = {static_cast<std::size_t>(cfg.backbone.channels), static_cast<std::size_t>(cfg.backbone.image_side),
                          static_cast<std::size_t>(cfg.backbone.image_side)};
  if (d.samples.front().image.shape() != expected) {
    throw ConfigError("dataset.manifest images have shape " + d.samples.front().image.shape_string() +
                      ", backbone expects " + shape_string(expected));
  }
  if (d.num_classes != cfg.backbone.num_classes) {
    throw ConfigError("dataset.manifest has " + std::to_string(d.num_classes) + " classes, backbone.num_classes is " +
                      std::to_string(cfg.backbone.num_classes));
  }
  return d;
}

MultiRunSpec run_spec(const ExperimentConfig& cfg, const PeftMethod& method, unsigned threads) {
  MultiRunSpec spec;
  spec.backbone = cfg.backbone;
  spec.method = method;
  spec.backbone_seed = cfg.backbone_seed;
  spec.shots = cfg.shots;
  spec.sampling_seeds = cfg.sampling_seeds;
  spec.train_seeds = cfg.train_seeds;
  spec.train = cfg.train;
  spec.threads = threads;
  return spec;
}

unsigned worker_threads() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("EPTLAB_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || cap < 1) throw ConfigError("EPTLAB_THREADS must be a positive integer");
    n = std::min<unsigned>(n, static_cast<unsigned>(cap));
  }
  return n;
}

}  // namespace eptlab::cli
