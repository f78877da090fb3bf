#include "eptlab_cli/commands.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <thread>

#include "eptlab/calibration.hpp"
#include "eptlab/errors.hpp"
#include "eptlab/serialization.hpp"

namespace eptlab::cli {

namespace fs = std::filesystem;

namespace {

// Runs fn(i) for i in [0, n) on up to `threads` workers. The first exception
// (by index) is rethrown after all workers finish.
template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
  {
    std::vector<std::jthread> pool;
    for (unsigned t = 1; t < workers; ++t) pool.emplace_back(worker);
    worker();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string cell_stem(std::uint64_t sampling_seed, std::uint64_t train_seed) {
  return "run_s" + std::to_string(sampling_seed) + "_t" + std::to_string(train_seed);
}

Json doubles(const std::vector<double>& v) {
  Json a = Json::array();
  for (double x : v) a.push_back(x);
  return a;
}

void write_data_manifests(const ExperimentConfig& cfg, const Dataset& data, const fs::path& dir) {
  std::vector<std::size_t> all(data.samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  write_manifest(dir / "dataset.csv", data, all, "payload");
  for (std::uint64_t s : cfg.sampling_seeds) {
    const Episode ep = sample_episode(data, cfg.shots, s);
    write_manifest(dir / ("episode_s" + std::to_string(s) + "_train.csv"), data, ep.train, "payload");
    write_manifest(dir / ("episode_s" + std::to_string(s) + "_eval.csv"), data, ep.eval, "payload");
  }
}

Json checkpoint_extra(const ExperimentConfig& cfg) {
  return Json{{"task_type", std::string(to_string(cfg.dataset.task_type))}};
}

void echo_config(const ExperimentConfig& cfg, const fs::path& dir, std::ostream& out) {
  fs::create_directories(dir);
  write_file_atomic(dir / "resolved_config.json", canonical_json(to_json(cfg)));
  out << "resolved config: " << (dir / "resolved_config.json").generic_string() << "\n";
}

}  // namespace

int cmd_verify(const VerifyOptions& options, std::ostream& out) {
  CheckContext ctx;
  ctx.threads = worker_threads();
  if (options.inject == "softmax-sign") {
    ctx.prompted_softmax = sign_fault_prompted_softmax;
  } else if (!options.inject.empty()) {
    throw ConfigError("unknown fault '" + options.inject + "' (softmax-sign)");
  }
  const auto& checks = all_checks();
  if (options.only) {
    const bool known = std::any_of(checks.begin(), checks.end(), [&](const Check& c) { return c.name == *options.only; });
    if (!known) {
      std::string names;
      for (const auto& c : checks) names += (names.empty() ? "" : ", ") + c.name;
      throw ConfigError("unknown check '" + *options.only + "' (" + names + ")");
    }
  }
  int failed = 0, ran = 0;
  std::string failed_names;
  for (const auto& check : checks) {
    if (options.only && check.name != *options.only) continue;
    const CheckResult r = check.run(ctx);
    ++ran;
    out << format_check(r) << "\n";
    if (!r.passed) {
      ++failed;
      failed_names += (failed_names.empty() ? "" : ", ") + r.name;
    }
  }
  out << ran - failed << "/" << ran << " checks passed";
  if (failed) out << "; failed: " << failed_names;
  out << "\n";
  return failed ? kCheckFailed : kOk;
}

int cmd_train(const fs::path& config, std::ostream& out, const std::optional<std::string>& output_dir) {
  ExperimentConfig cfg = load_experiment(config);
  if (output_dir) cfg.output_dir = *output_dir;
  const unsigned threads = worker_threads();
  const Dataset data = load_dataset(cfg);
  const fs::path root = cfg.output_dir;
  echo_config(cfg, root, out);
  write_data_manifests(cfg, data, root / "data");
  save_model(root / "frozen_backbone.ckpt",
             plain_backbone(Model::create(cfg.backbone, PeftMethod::simple(MethodTag::Linear), cfg.backbone_seed, 0)),
             checkpoint_extra(cfg));

  for (const auto& method : cfg.methods) {
    const MultiRunSpec spec = run_spec(cfg, method, threads);
    std::vector<std::pair<std::uint64_t, std::uint64_t>> cells;
    for (auto s : cfg.sampling_seeds)
      for (auto t : cfg.train_seeds) cells.emplace_back(s, t);
    std::vector<std::optional<CellResult>> results(cells.size());
    parallel_for(cells.size(), threads, [&](std::size_t i) {
      results[i].emplace(run_cell(spec, data, cells[i].first, cells[i].second));
    });

    const fs::path dir = root / method.label();
    fs::create_directories(dir);
    std::vector<RunRecord> records;
    std::string metric_name;
    for (const auto& res : results) {
      const CellResult& c = *res;
      metric_name = c.eval.metric_name;
      records.push_back(c.record);
      const std::string stem = cell_stem(c.record.sampling_seed, c.record.train_seed);
      Json warnings = Json::array();
      for (const auto& w : c.eval.warnings) warnings.push_back(w);
      const Json metrics{{"method", to_json(method)},
                         {"label", method.label()},
                         {"sampling_seed", c.record.sampling_seed},
                         {"train_seed", c.record.train_seed},
                         {"shots", cfg.shots},
                         {"train_size", c.episode.train.size()},
                         {"eval_size", c.episode.eval.size()},
                         {"metric_name", c.eval.metric_name},
                         {"metric", c.eval.metric},
                         {"epoch_loss", doubles(c.record.epoch_loss)},
                         {"trainable_parameters", count_trainable(cfg.backbone, method)},
                         {"warnings", warnings}};
      write_file_atomic(dir / (stem + ".json"), canonical_json(metrics));
      Json extra = checkpoint_extra(cfg);
      extra["sampling_seed"] = c.record.sampling_seed;
      extra["train_seed"] = c.record.train_seed;
      save_model(dir / (stem + ".ckpt"), c.model, extra);
    }
    const RunSummary summary = summarize(records);
    write_file_atomic(dir / "runs.csv", runs_csv(summary, metric_name));
    const Json sj{{"label", method.label()},      {"method", to_json(method)}, {"metric_name", metric_name},
                  {"runs", summary.runs.size()},  {"mean", summary.mean},      {"variance", summary.variance},
                  {"min", summary.min},           {"max", summary.max}};
    write_file_atomic(dir / "summary.json", canonical_json(sj));
    out << method.label() << "  " << metric_name << " mean=" << fixed(summary.mean) << " var=" << fixed(summary.variance, 6)
        << " min=" << fixed(summary.min) << " max=" << fixed(summary.max) << " runs=" << summary.runs.size() << "  -> "
        << dir.generic_string() << "\n";
  }
  return kOk;
}

namespace {

struct Variant {
  std::string value;
  PeftMethod method;
  int shots;
};

std::vector<Variant> sweep_variants(const ExperimentConfig& cfg, const PeftMethod& base, const std::string& axis,
                                    std::size_t method_index) {
  const std::string where = "methods[" + std::to_string(method_index) + "]";
  const bool ept = base.tag == MethodTag::EPT;
  std::vector<Variant> out;
  if (axis == "prompt_length") {
    if (!ept && base.tag != MethodTag::VPT) {
      throw ConfigError("axis prompt_length needs an EPT or VPT method, " + where + " is " + std::string(to_string(base.tag)));
    }
    if (cfg.sweep.prompt_length) {
      for (int L : *cfg.sweep.prompt_length) {
        PeftMethod m = base;
        m.prompt_length = L;
        out.push_back({std::to_string(L), m, cfg.shots});
      }
    } else {
      const auto rel = cfg.sweep.relative_prompt_length.value_or(std::vector<double>{1.0, 2.0, 4.0});
      for (double L : rel) {
        PeftMethod m = base;
        m.prompt_length = ept ? ept_length_from_relative(L, cfg.backbone.num_patches(), cfg.backbone.embed_dim)
                              : static_cast<int>(std::lround(L));
        out.push_back({"rel" + format_double(L), m, cfg.shots});
      }
    }
  } else if (axis == "depth") {
    if (!ept) throw ConfigError("axis depth needs an EPT method, " + where + " is " + std::string(to_string(base.tag)));
    if (base.mode == PromptMode::Shallow) throw ConfigError("axis depth needs deep prompting, " + where + " is shallow");
    std::vector<int> depths = cfg.sweep.depth.value_or(std::vector<int>{});
    if (depths.empty())
      for (int k = 1; k <= cfg.backbone.num_layers; ++k) depths.push_back(k);
    const auto orders =
        cfg.sweep.orders.value_or(std::vector<DepthOrder>{DepthOrder::TopToBottom, DepthOrder::BottomToTop});
    for (DepthOrder o : orders)
      for (int k : depths) {
        PeftMethod m = base;
        m.depth = k;
        m.order = o;
        out.push_back({std::to_string(k) + ":" + std::string(to_string(o)), m, cfg.shots});
      }
  } else if (axis == "embedding_way") {
    if (!ept) {
      throw ConfigError("axis embedding_way needs an EPT method, " + where + " is " + std::string(to_string(base.tag)));
    }
    const auto ways = cfg.sweep.embedding_way.value_or(
        std::vector<EmbeddingWay>(std::begin(kAllEmbeddingWays), std::end(kAllEmbeddingWays)));
    for (EmbeddingWay w : ways) {
      PeftMethod m = base;
      m.embedding_way = w;
      out.push_back({std::string(to_string(w)), m, cfg.shots});
    }
  } else if (axis == "shots") {
    for (int k : cfg.sweep.shots.value_or(std::vector<int>{1, 5, 10})) {
      if (cfg.dataset.synthetic && k >= cfg.dataset.synthetic->samples_per_class) {
        throw ConfigError("sweep.shots value " + std::to_string(k) + " leaves no eval samples");
      }
      out.push_back({std::to_string(k), base, k});
    }
  } else {
    throw ConfigError("unknown sweep axis '" + axis + "' (prompt_length, depth, embedding_way, shots)");
  }
  for (auto& v : out) {
    try {
      v.method = v.method.resolved(cfg.backbone);
    } catch (const ConfigError& e) {
      throw ConfigError("sweep." + axis + " value " + v.value + ": " + e.what());
    }
  }
  return out;
}

}  // namespace

int cmd_sweep(const fs::path& config, const std::string& axis, std::ostream& out,
              const std::optional<std::string>& output_dir) {
  ExperimentConfig cfg = load_experiment(config);
  if (output_dir) cfg.output_dir = *output_dir;
  std::vector<Variant> variants;
  for (std::size_t i = 0; i < cfg.methods.size(); ++i) {
    auto v = sweep_variants(cfg, cfg.methods[i], axis, i);
    variants.insert(variants.end(), v.begin(), v.end());
  }
  const unsigned threads = worker_threads();
  const Dataset data = load_dataset(cfg);

  struct Cell {
    std::size_t variant;
    std::uint64_t sampling_seed;
    std::uint64_t train_seed;
  };
  std::vector<Cell> cells;
  for (std::size_t v = 0; v < variants.size(); ++v)
    for (auto s : cfg.sampling_seeds)
      for (auto t : cfg.train_seeds) cells.push_back({v, s, t});
  std::vector<std::optional<EvalResult>> evals(cells.size());
  parallel_for(cells.size(), threads, [&](std::size_t i) {
    const Variant& v = variants[cells[i].variant];
    MultiRunSpec spec = run_spec(cfg, v.method, 1);
    spec.shots = v.shots;
    evals[i] = run_cell(spec, data, cells[i].sampling_seed, cells[i].train_seed).eval;
  });

  std::string csv = "axis,value,setting,shots,sampling_seed,train_seed,metric_name,metric\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const Variant& v = variants[cells[i].variant];
    csv += axis + "," + v.value + "," + v.method.label() + "," + std::to_string(v.shots) + "," +
           std::to_string(cells[i].sampling_seed) + "," + std::to_string(cells[i].train_seed) + "," +
           evals[i]->metric_name + "," + format_double(evals[i]->metric) + "\n";
  }
  const fs::path root = cfg.output_dir;
  echo_config(cfg, root, out);
  const fs::path path = root / ("sweep_" + axis + ".csv");
  write_file_atomic(path, csv);
  out << cells.size() << " rows (" << variants.size() << " settings x " << cfg.sampling_seeds.size() * cfg.train_seeds.size()
      << " seed cells) -> " << path.generic_string() << "\n";
  return kOk;
}

int cmd_analyze(const AnalyzeOptions& options, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(options.checkpoint);
  const Model model = load_model(options.checkpoint);
  const BackboneConfig& cfg = model.config();
  TaskType task = TaskType::SingleLabel;
  if (options.task_type) {
    task = parse_task_type(*options.task_type);
  } else if (ck.metadata.contains("task_type")) {
    task = parse_task_type(ck.metadata.at("task_type").get<std::string>());
  }
  const Dataset data = read_manifest(options.data, task);
  const Shape expected = {static_cast<std::size_t>(cfg.channels), static_cast<std::size_t>(cfg.image_side),
                          static_cast<std::size_t>(cfg.image_side)};
  if (data.samples.front().image.shape() != expected) {
    throw LoadError("checkpoint expects images of shape " + shape_string(expected) + ", dataset has " +
                    data.samples.front().image.shape_string());
  }
  if (data.num_classes != cfg.num_classes) {
    throw LoadError("checkpoint has " + std::to_string(cfg.num_classes) + " classes, dataset has " +
                    std::to_string(data.num_classes));
  }

  std::vector<std::size_t> all(data.samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  LabeledFeatures f;
  f.features = extract_features(model, data, all);
  for (const auto& s : data.samples) f.labels.push_back(s.primary_label());
  f.num_classes = data.num_classes;
  const IntraClassReport report = intra_class_distance(f);

  fs::create_directories(options.out_dir);
  std::vector<std::string> written;
  auto emit = [&](const std::string& name, const std::string& text) {
    write_file_atomic(options.out_dir / name, text);
    written.push_back((options.out_dir / name).generic_string());
  };

  const PcaResult pc1 = pca_project(f.features, 1);
  Vector first;
  for (const auto& p : pc1.projections) first.push_back(p[0]);
  emit("pc1_histogram.csv", histogram_csv(feature_histogram(first, options.bins)));
  const PcaResult pc2 = pca_project(f.features, 2);
  emit("projection_2d.csv", projection_csv(pc2, f.labels));

  Json scaling = Json::array();
  const PeftMethod& method = model.method();
  const bool cat_way = method.embedding_way == EmbeddingWay::PureCat || method.embedding_way == EmbeddingWay::MultiCat;
  if (method.tag == MethodTag::EPT && cat_way) {
    for (int layer : prompted_layers(method, cfg.num_layers)) {
      const Tensor& prompt = model.parameters().at("ept." + std::to_string(layer));
      std::string csv = "sample_id,head,column,factor\n";
      for (std::size_t i = 0; i < all.size(); ++i) {
        Graph g;
        ForwardOptions fo;
        fo.capture_scores = true;
        const auto res = model.forward(g, data.samples[i].image, TrainableMask{}, fo);
        const auto& heads = res.scores.at(layer);
        for (std::size_t h = 0; h < heads.size(); ++h) {
          const Vector c = measure_scaling_factors(heads[h].value(), prompt, *method.embedding_way);
          for (std::size_t j = 0; j < c.size(); ++j) {
            csv += std::to_string(i) + "," + std::to_string(h) + "," + std::to_string(j) + "," + format_double(c[j]) + "\n";
          }
        }
      }
      const std::string name = "scaling_layer" + std::to_string(layer) + ".csv";
      emit(name, csv);
      scaling.push_back(name);
    }
  }

  Json classes = Json::array();
  for (const auto& cs : report.classes) {
    classes.push_back({{"label", cs.label}, {"count", cs.count}, {"center_norm", cs.center_norm}, {"trace", cs.trace}});
  }
  bool nonnegative = true;
  for (const auto& x : f.features)
    for (double v : x) nonnegative = nonnegative && v >= 0.0;
  Json lemma{{"applicable", nonnegative}};
  if (nonnegative) {
    try {
      const auto l = check_lemma1(f, reciprocal_norm_scaling(f));
      lemma["per_sample_holds"] = l.per_sample_holds;
      lemma["per_sample_margin"] = l.per_sample_margin;
      lemma["trace_holds"] = l.trace_holds;
      lemma["trace_margin"] = l.trace_margin;
    } catch (const PreconditionError& e) {
      lemma["applicable"] = false;
      lemma["reason"] = e.what();
    }
  } else {
    lemma["reason"] = "features have negative entries";
  }
  const auto p1 = check_prop1(0.0, 1.0, 1.0);
  const Json rj{{"checkpoint", options.checkpoint.filename().generic_string()},
                {"method", to_json(method)},
                {"label", method.label()},
                {"num_samples", f.features.size()},
                {"num_classes", f.num_classes},
                {"feature_dim", f.dim()},
                {"trace", report.trace},
                {"classes", classes},
                {"projection",
                 {{"kind", "pca-2d"},
                  {"note", "2-D PCA projection stands in for t-SNE"},
                  {"explained_ratio", doubles(pc2.explained_ratio)}}},
                {"scaling_factor_files", scaling},
                {"lemma1", lemma},
                {"prop1", {{"z1", 0.0}, {"z2", 1.0}, {"p", 1.0}, {"c1", p1.c1}, {"c2", p1.c2}, {"holds", p1.holds}}}};
  emit("intra_class.json", canonical_json(rj));

  out << method.label() << "  trace(Sigma_W)=" << format_double(report.trace) << " over " << f.features.size()
      << " samples\n";
  for (const auto& w : written) out << "  " << w << "\n";
  return kOk;
}

}  // namespace eptlab::cli
