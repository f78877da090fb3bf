#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "eptlab/fewshot.hpp"
#include "eptlab/io.hpp"

namespace fs = std::filesystem;
using eptlab::Json;
using eptlab::read_file;

#ifndef EPTLAB_EXE
#error "EPTLAB_EXE must point at the built command-line tool"
#endif

namespace {

struct Invocation {
  int code = -1;
  std::string out;
  std::string err;
};

fs::path workdir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("eptlab_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Invocation invoke(const fs::path& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && EPTLAB_THREADS=1 '" EPTLAB_EXE "' " + args +
                          " > stdout.txt 2> stderr.txt";
  const int status = std::system(cmd.c_str());
  Invocation r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_file(dir / "stdout.txt");
  r.err = read_file(dir / "stderr.txt");
  return r;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
}

std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(read_file(p));
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

// Every regular file under `root`, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = read_file(e.path());
  return out;
}

}  // namespace

TEST(Verify, OnlyRunsASingleCheck) {
  const fs::path dir = workdir("verify_only");
  const Invocation r = invoke(dir, "verify --only prop1");
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("PASS  prop1"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("1/1 checks passed"), std::string::npos) << r.out;
}

TEST(Verify, SignFaultIsCaughtByProportionality) {
  const fs::path dir = workdir("verify_mutation");
  const Invocation clean = invoke(dir, "verify --only proportionality");
  EXPECT_EQ(clean.code, 0) << clean.out;
  const Invocation r = invoke(dir, "verify --only proportionality --inject softmax-sign");
  EXPECT_EQ(r.code, 1) << r.out << r.err;
  EXPECT_NE(r.out.find("FAIL  proportionality"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("failed: proportionality"), std::string::npos) << r.out;
}

TEST(Verify, UnknownCheckIsAConfigError) {
  const fs::path dir = workdir("verify_unknown");
  const Invocation r = invoke(dir, "verify --only nonsense");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("nonsense"), std::string::npos) << r.err;
}

TEST(Verify, IsDeterministic) {
  const fs::path dir = workdir("verify_twice");
  const Invocation a = invoke(dir, "verify --only zero-init");
  const Invocation b = invoke(dir, "verify --only zero-init");
  EXPECT_EQ(a.code, 0) << a.out;
  EXPECT_EQ(a.out, b.out);
}

TEST(Cli, BadArgumentsAreConfigErrors) {
  const fs::path dir = workdir("bad_args");
  EXPECT_EQ(invoke(dir, "frobnicate").code, 2);
  EXPECT_EQ(invoke(dir, "train").code, 2);
  EXPECT_EQ(invoke(dir, "train --config missing.json").code, 2);
}

TEST(Train, MinimalConfigRunsOneShotLinearOnToyColon) {
  const fs::path dir = workdir("train_min");
  write(dir / "min.json", "{}");
  const Invocation r = invoke(dir, "train --config min.json --output-dir out");
  ASSERT_EQ(r.code, 0) << r.out << r.err;
  const Json resolved = Json::parse(read_file(dir / "out/resolved_config.json"));
  EXPECT_EQ(resolved.at("shots"), 1);
  EXPECT_EQ(resolved.at("methods").size(), 1u);
  EXPECT_EQ(resolved.at("methods")[0].at("tag"), "Linear");
  EXPECT_EQ(resolved.at("dataset").at("synthetic").at("name"), "toy-colon");
  const Json metrics = Json::parse(read_file(dir / "out/Linear/run_s0_t0.json"));
  EXPECT_EQ(metrics.at("metric_name"), "accuracy");
  EXPECT_EQ(metrics.at("train_size"), 2);
  EXPECT_TRUE(fs::exists(dir / "out/frozen_backbone.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "out/data/episode_s0_eval.csv"));
}

TEST(Train, SameCommandTwiceIsByteIdenticalAndResolvedConfigRoundTrips) {
  const fs::path root = workdir("train_twice");
  const std::string cfg = R"({"method": {"tag": "EPT", "prompt_length": 2}, "shots": 2,
    "sampling_seeds": [0, 1], "train": {"epochs": 2}})";
  for (const char* sub : {"first", "second"}) {
    fs::create_directories(root / sub);
    write(root / sub / "cfg.json", cfg);
    ASSERT_EQ(invoke(root / sub, "train --config cfg.json --output-dir out").code, 0);
  }
  const auto a = tree(root / "first/out"), b = tree(root / "second/out");
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [name, bytes] : a) EXPECT_TRUE(b.contains(name) && b.at(name) == bytes) << name;

  const fs::path dir = root / "first";
  fs::copy_file(dir / "out/resolved_config.json", dir / "echo.json");
  ASSERT_EQ(invoke(dir, "train --config echo.json --output-dir echo").code, 0);
  const auto c = tree(dir / "echo");
  ASSERT_EQ(c.size(), a.size());
  for (const auto& [name, bytes] : a) {
    if (name == "resolved_config.json") continue;
    EXPECT_TRUE(c.contains(name) && c.at(name) == bytes) << name;
  }
  Json ja = Json::parse(a.at("resolved_config.json")), jc = Json::parse(c.at("resolved_config.json"));
  ja.erase("output_dir");
  jc.erase("output_dir");
  EXPECT_EQ(ja, jc);
}

TEST(Train, InvalidConfigNamesTheFieldPath) {
  const fs::path dir = workdir("train_invalid");
  write(dir / "bad.json", R"({"method": {"tag": "LoRA", "rank": 0}})");
  Invocation r = invoke(dir, "train --config bad.json");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("rank"), std::string::npos) << r.err;
  write(dir / "bad2.json", R"({"train": {"learning_rate": "fast"}})");
  r = invoke(dir, "train --config bad2.json");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("train.learning_rate"), std::string::npos) << r.err;
  write(dir / "bad3.json", "{not json");
  EXPECT_EQ(invoke(dir, "train --config bad3.json").code, 2);
}

TEST(Train, MethodListSharesEpisodes) {
  const fs::path dir = workdir("train_methods");
  write(dir / "cfg.json", R"({"methods": [{"tag": "Linear"}, {"tag": "VPT", "prompt_length": 1},
    {"tag": "EPT", "prompt_length": 2}], "shots": 2, "sampling_seeds": [0, 1], "train": {"epochs": 1}})");
  const Invocation r = invoke(dir, "train --config cfg.json --output-dir out");
  ASSERT_EQ(r.code, 0) << r.err;
  std::set<std::string> labels;
  for (const auto& e : fs::directory_iterator(dir / "out"))
    if (fs::exists(e.path() / "summary.json")) labels.insert(e.path().filename().string());
  EXPECT_EQ(labels.size(), 3u);
  for (const auto& label : labels) {
    const auto rows = csv_rows(dir / "out" / label / "runs.csv");
    EXPECT_EQ(rows.size(), 3u) << label;
    for (int s : {0, 1}) {
      const Json m = Json::parse(read_file(dir / "out" / label / ("run_s" + std::to_string(s) + "_t0.json")));
      EXPECT_EQ(m.at("train_size"), 4);
      EXPECT_EQ(m.at("eval_size"), 56);
    }
  }
  // One episode manifest per sampling seed, used by every method.
  EXPECT_TRUE(fs::exists(dir / "out/data/episode_s0_train.csv"));
  EXPECT_TRUE(fs::exists(dir / "out/data/episode_s1_train.csv"));
}

TEST(Sweep, DepthGivesTwoRowsPerLayerPerSeed) {
  const fs::path dir = workdir("sweep_depth");
  write(dir / "cfg.json", R"({"method": {"tag": "EPT", "prompt_length": 1}, "shots": 1,
    "sampling_seeds": [0, 1], "train": {"epochs": 1}})");
  const Invocation r = invoke(dir, "sweep --config cfg.json --axis depth --output-dir out");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = csv_rows(dir / "out/sweep_depth.csv");
  ASSERT_EQ(rows.size(), 1u + 2u * 4u * 2u);
  std::map<std::string, int> per_seed;
  for (std::size_t i = 1; i < rows.size(); ++i) ++per_seed[rows[i][4]];
  EXPECT_EQ(per_seed.at("0"), 8);
  EXPECT_EQ(per_seed.at("1"), 8);
}

TEST(Sweep, EmbeddingWayGivesFourRowsPerSeed) {
  const fs::path dir = workdir("sweep_way");
  write(dir / "cfg.json", R"({"method": {"tag": "EPT", "prompt_length": 1}, "shots": 1, "train": {"epochs": 1}})");
  ASSERT_EQ(invoke(dir, "sweep --config cfg.json --axis embedding_way --output-dir out").code, 0);
  const auto rows = csv_rows(dir / "out/sweep_embedding_way.csv");
  ASSERT_EQ(rows.size(), 5u);
  std::set<std::string> ways;
  for (std::size_t i = 1; i < rows.size(); ++i) ways.insert(rows[i][1]);
  EXPECT_EQ(ways, (std::set<std::string>{"add", "multiply", "pure_cat", "multi_cat"}));
}

TEST(Sweep, AxisMethodMismatchIsAConfigError) {
  const fs::path dir = workdir("sweep_mismatch");
  write(dir / "cfg.json", R"({"method": {"tag": "LoRA", "rank": 2}})");
  const Invocation r = invoke(dir, "sweep --config cfg.json --axis depth");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("depth"), std::string::npos) << r.err;
  EXPECT_EQ(invoke(dir, "sweep --config cfg.json --axis colour").code, 2);
}

TEST(Sweep, ShotsMatchIndividualTrainRuns) {
  const fs::path dir = workdir("sweep_shots");
  const std::string base = R"("method": {"tag": "VPT", "prompt_length": 1}, "train": {"epochs": 2})";
  write(dir / "sweep.json", "{" + base + R"(, "sweep": {"shots": [1, 5, 10]}})");
  ASSERT_EQ(invoke(dir, "sweep --config sweep.json --axis shots --output-dir sw").code, 0);
  const auto rows = csv_rows(dir / "sw/sweep_shots.csv");
  ASSERT_EQ(rows.size(), 4u);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const std::string k = rows[i][3];
    write(dir / ("k" + k + ".json"), "{" + base + ", \"shots\": " + k + "}");
    ASSERT_EQ(invoke(dir, "train --config k" + k + ".json --output-dir t" + k).code, 0);
    const Json m = Json::parse(read_file(dir / ("t" + k) / "VPT-deep-L1/run_s0_t0.json"));
    EXPECT_EQ(rows[i][7], eptlab::format_double(m.at("metric").get<double>())) << "shots " << k;
  }
}

TEST(Analyze, FrozenAndTrainedReportsShareSchemaAndRepeatExactly) {
  const fs::path dir = workdir("analyze");
  write(dir / "cfg.json", R"({"method": {"tag": "EPT", "prompt_length": 2}, "shots": 5, "train": {"epochs": 2}})");
  ASSERT_EQ(invoke(dir, "train --config cfg.json --output-dir out").code, 0);
  fs::path ept_ckpt;
  for (const auto& e : fs::directory_iterator(dir / "out"))
    if (e.path().filename().string().starts_with("EPT")) ept_ckpt = e.path() / "run_s0_t0.ckpt";
  ASSERT_TRUE(fs::exists(ept_ckpt));
  const std::string data = "out/data/episode_s0_eval.csv";
  ASSERT_EQ(invoke(dir, "analyze --checkpoint out/frozen_backbone.ckpt --data " + data + " --out frozen").code, 0);
  ASSERT_EQ(invoke(dir, "analyze --checkpoint '" + ept_ckpt.string() + "' --data " + data + " --out ept").code, 0);
  ASSERT_EQ(invoke(dir, "analyze --checkpoint '" + ept_ckpt.string() + "' --data " + data + " --out ept2").code, 0);

  const Json f = Json::parse(read_file(dir / "frozen/intra_class.json"));
  const Json e = Json::parse(read_file(dir / "ept/intra_class.json"));
  std::set<std::string> fk, ek;
  for (const auto& [k, _] : f.items()) fk.insert(k);
  for (const auto& [k, _] : e.items()) ek.insert(k);
  EXPECT_EQ(fk, ek);
  EXPECT_EQ(f.at("num_samples"), 50);
  EXPECT_EQ(f.at("projection").at("kind"), "pca-2d");
  for (const char* name : {"pc1_histogram.csv", "projection_2d.csv"}) {
    EXPECT_EQ(csv_rows(dir / "frozen" / name)[0], csv_rows(dir / "ept" / name)[0]) << name;
  }
  EXPECT_EQ(csv_rows(dir / "ept/scaling_layer0.csv")[0],
            (std::vector<std::string>{"sample_id", "head", "column", "factor"}));
  EXPECT_EQ(tree(dir / "ept"), tree(dir / "ept2"));
}

TEST(Analyze, ShapeMismatchIsALoadError) {
  const fs::path dir = workdir("analyze_mismatch");
  write(dir / "small.json", R"({"train": {"epochs": 1}})");
  ASSERT_EQ(invoke(dir, "train --config small.json --output-dir a").code, 0);
  write(dir / "big.json", R"({"backbone": {"image_side": 8, "patch_side": 4}, "dataset": {"synthetic":
    {"image_side": 8}}, "train": {"epochs": 1}})");
  ASSERT_EQ(invoke(dir, "train --config big.json --output-dir b").code, 0);
  const Invocation r = invoke(dir, "analyze --checkpoint a/frozen_backbone.ckpt --data b/data/dataset.csv --out x");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("shape"), std::string::npos) << r.err;
}
