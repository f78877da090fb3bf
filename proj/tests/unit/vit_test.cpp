#include <gtest/gtest.h>

#include "eptlab/errors.hpp"
#include "eptlab/peft.hpp"
#include "eptlab/rng.hpp"
#include "eptlab/vit.hpp"
#include "support/oracles.hpp"

using namespace eptlab;

namespace {

BackboneConfig bare(int d, int heads, int layers = 1) {
  BackboneConfig cfg;
  cfg.embed_dim = d;
  cfg.num_heads = heads;
  cfg.num_layers = layers;
  cfg.mlp_hidden_dim = 2 * d;
  cfg.layer_norm = false;
  return cfg;
}

ParameterStore random_layer_store(const BackboneConfig& cfg, int layer, Rng& rng) {
  ParameterStore s;
  const auto d = static_cast<std::size_t>(cfg.embed_dim), m = static_cast<std::size_t>(cfg.mlp_hidden_dim);
  const auto p = layer_prefix(layer);
  s[p + "attn.wq"] = oracle::random_matrix(d, d, rng, 0.5);
  s[p + "attn.wk"] = oracle::random_matrix(d, d, rng, 0.5);
  s[p + "attn.wv"] = oracle::random_matrix(d, d, rng, 0.5);
  s[p + "mlp.fc1.weight"] = oracle::random_matrix(m, d, rng, 0.5);
  s[p + "mlp.fc1.bias"] = Tensor::column(std::vector<double>(m, 0.1));
  s[p + "mlp.fc2.weight"] = oracle::random_matrix(d, m, rng, 0.5);
  s[p + "mlp.fc2.bias"] = Tensor::column(std::vector<double>(d, -0.2));
  s[p + "norm1.weight"] = Tensor::column(std::vector<double>(d, 1.3));
  s[p + "norm1.bias"] = Tensor::column(std::vector<double>(d, 0.1));
  s[p + "norm2.weight"] = Tensor::column(std::vector<double>(d, 0.7));
  s[p + "norm2.bias"] = Tensor::column(std::vector<double>(d, -0.1));
  return s;
}

Tensor reference_layer(const Tensor& x, const ParameterStore& s, const BackboneConfig& cfg, int layer) {
  const auto p = layer_prefix(layer);
  auto norm = [&](const Tensor& t, const char* which) {
    if (!cfg.layer_norm) return t;
    return oracle::layer_norm_columns(t, s.at(p + which + ".weight"), s.at(p + which + ".bias"));
  };
  const Tensor y =
      oracle::plus(x, oracle::attention(norm(x, "norm1"), s.at(p + "attn.wq"), s.at(p + "attn.wk"), s.at(p + "attn.wv"),
                                        cfg.num_heads));
  const Tensor h = oracle::relu(
      oracle::add_bias(oracle::matmul(s.at(p + "mlp.fc1.weight"), norm(y, "norm2")), s.at(p + "mlp.fc1.bias")));
  return oracle::plus(y, oracle::add_bias(oracle::matmul(s.at(p + "mlp.fc2.weight"), h), s.at(p + "mlp.fc2.bias")));
}

Tensor random_image(const BackboneConfig& cfg, Rng& rng) {
  Tensor img({static_cast<std::size_t>(cfg.channels), static_cast<std::size_t>(cfg.image_side),
              static_cast<std::size_t>(cfg.image_side)});
  for (double& v : img.data()) v = rng.normal();
  return img;
}

}  // namespace

TEST(Tokens, SixteenByFourGivesSeventeen) {
  BackboneConfig cfg;
  EXPECT_EQ(cfg.num_tokens(), 17);
}

TEST(Tokens, EightByEightGivesClsPlusOne) {
  BackboneConfig cfg;
  cfg.image_side = 8;
  cfg.patch_side = 8;
  EXPECT_EQ(cfg.num_tokens(), 2);
}

TEST(Tokens, ZeroImageAndWeightsLeavePositionsPlusCls) {
  BackboneConfig cfg;
  ParameterStore s;
  init_backbone(s, cfg, 1);
  s.at("embed.proj.weight") = Tensor(s.at("embed.proj.weight").shape(), 0.0);
  Graph g;
  const Binder bind(g, s, {});
  const Tensor x = patchify(g, Tensor({1, 16, 16}, 0.0), cfg, bind.embedding()).value();
  const Tensor& pos = s.at("embed.pos");
  const Tensor& cls = s.at("embed.cls");
  for (std::size_t i = 0; i < x.rows(); ++i) {
    EXPECT_EQ(x(i, 0), cls(i, 0) + pos(i, 0));
    for (std::size_t j = 1; j < x.cols(); ++j) EXPECT_EQ(x(i, j), pos(i, j));
  }
}

TEST(Tokens, PatchesAreRasterOrderedColumns) {
  BackboneConfig cfg;
  cfg.image_side = 4;
  cfg.patch_side = 2;
  cfg.channels = 2;
  Tensor img({2, 4, 4});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i);
  const Tensor p = extract_patches(img, cfg);
  ASSERT_EQ(p.rows(), 8u);
  ASSERT_EQ(p.cols(), 4u);
  // Patch 1 is the top-right 2x2 block of each channel.
  const std::vector<double> expected = {2, 3, 6, 7, 18, 19, 22, 23};
  for (std::size_t r = 0; r < 8; ++r) EXPECT_EQ(p(r, 1), expected[r]);
}

TEST(Tokens, WrongImageShapeIsRejected) {
  BackboneConfig cfg;
  EXPECT_THROW(extract_patches(Tensor({1, 8, 8}), cfg), IngestionError);
}

TEST(Config, InconsistentFieldsAreConfigErrors) {
  BackboneConfig cfg;
  cfg.patch_side = 5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.num_heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.num_layers = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Projection, IdentityQueryWeightsReturnInput) {
  const BackboneConfig cfg = bare(4, 1);
  Rng rng(1);
  const Tensor x = oracle::random_matrix(4, 3, rng);
  ParameterStore s = random_layer_store(cfg, 0, rng);
  s.at("layers.0.attn.wq") = Tensor::from_rows({{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}});
  Graph g;
  const Binder bind(g, s, {});
  const auto qkv = project_qkv(g.constant(x), bind.layer(0, cfg), cfg);
  EXPECT_EQ(qkv.q.value(), x);
}

TEST(Projection, ZeroInputGivesZeroProjections) {
  const BackboneConfig cfg = bare(4, 2);
  Rng rng(2);
  const ParameterStore s = random_layer_store(cfg, 0, rng);
  Graph g;
  const Binder bind(g, s, {});
  const auto qkv = project_qkv(g.constant(Tensor::matrix(4, 3)), bind.layer(0, cfg), cfg);
  for (const Var& v : {qkv.q, qkv.k, qkv.v})
    for (double e : v.value().data()) EXPECT_EQ(e, 0.0);
}

TEST(Projection, RandomMatchesMatmulOracle) {
  const BackboneConfig cfg = bare(4, 2);
  Rng rng(3);
  const ParameterStore s = random_layer_store(cfg, 0, rng);
  const Tensor x = oracle::random_matrix(4, 5, rng);
  Graph g;
  const Binder bind(g, s, {});
  const auto qkv = project_qkv(g.constant(x), bind.layer(0, cfg), cfg);
  Tensor k = oracle::matmul(s.at("layers.0.attn.wk"), x);
  for (double& v : k.data()) v /= std::sqrt(2.0);
  EXPECT_LT(oracle::max_abs_diff(qkv.q.value(), oracle::matmul(s.at("layers.0.attn.wq"), x)), 1e-12);
  EXPECT_LT(oracle::max_abs_diff(qkv.k.value(), k), 1e-12);
  EXPECT_LT(oracle::max_abs_diff(qkv.v.value(), oracle::matmul(s.at("layers.0.attn.wv"), x)), 1e-12);
}

TEST(Attention, SingleTokenReturnsItsValue) {
  const BackboneConfig cfg = bare(4, 1);
  Rng rng(4);
  const ParameterStore s = random_layer_store(cfg, 0, rng);
  const Tensor x = oracle::random_matrix(4, 1, rng);
  Graph g;
  const Binder bind(g, s, {});
  const Tensor out = attention(g.constant(x), bind.layer(0, cfg), cfg).value();
  EXPECT_LT(oracle::max_abs_diff(out, oracle::matmul(s.at("layers.0.attn.wv"), x)), 1e-15);
}

TEST(Attention, EqualScoresAverageTheValues) {
  const BackboneConfig cfg = bare(4, 1);
  Rng rng(5);
  ParameterStore s = random_layer_store(cfg, 0, rng);
  s.at("layers.0.attn.wk") = Tensor::matrix(4, 4, 0.0);
  const Tensor x = oracle::random_matrix(4, 6, rng);
  Graph g;
  const Binder bind(g, s, {});
  const Tensor out = attention(g.constant(x), bind.layer(0, cfg), cfg).value();
  const Tensor v = oracle::matmul(s.at("layers.0.attn.wv"), x);
  for (std::size_t i = 0; i < 4; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < 6; ++j) mean += v(i, j) / 6.0;
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(out(i, j), mean, 1e-14);
  }
}

TEST(Attention, RandomInstancesMatchHandRolledReference) {
  for (int heads : {1, 2, 4}) {
    const BackboneConfig cfg = bare(8, heads);
    Rng rng(6 + static_cast<std::uint64_t>(heads));
    const ParameterStore s = random_layer_store(cfg, 0, rng);
    const Tensor x = oracle::random_matrix(8, 5, rng);
    Graph g;
    const Binder bind(g, s, {});
    const Tensor out = attention(g.constant(x), bind.layer(0, cfg), cfg).value();
    const Tensor ref =
        oracle::attention(x, s.at("layers.0.attn.wq"), s.at("layers.0.attn.wk"), s.at("layers.0.attn.wv"), heads);
    EXPECT_LT(oracle::max_abs_diff(out, ref), 1e-12) << heads << " heads";
  }
}

TEST(Layer, ZeroWeightsPassInputThrough) {
  const BackboneConfig cfg = bare(4, 2);
  ParameterStore s;
  for (const auto& spec : backbone_layout(cfg))
    if (spec.name.starts_with("layers.")) s[spec.name] = Tensor(spec.shape, 0.0);
  Rng rng(9);
  const Tensor x = oracle::random_matrix(4, 5, rng);
  Graph g;
  const Binder bind(g, s, {});
  EXPECT_EQ(transformer_layer(g.constant(x), bind.layer(0, cfg), cfg).value(), x);
}

TEST(Layer, MlpActsOnEachColumnIndependently) {
  const BackboneConfig cfg = bare(4, 1);
  Rng rng(10);
  const ParameterStore s = random_layer_store(cfg, 0, rng);
  const Tensor y = oracle::random_matrix(4, 3, rng);
  Graph g;
  const Binder bind(g, s, {});
  const LayerWeights w = bind.layer(0, cfg);
  const Tensor all = mlp_block(g.constant(y), w, cfg).value();
  for (std::size_t j = 0; j < 3; ++j) {
    Tensor col = Tensor::matrix(4, 1);
    for (std::size_t i = 0; i < 4; ++i) col(i, 0) = y(i, j);
    const Tensor one = mlp_block(g.constant(col), w, cfg).value();
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(one(i, 0), all(i, j));
  }
}

TEST(Layer, RandomMatchesComposedOracle) {
  for (bool norm : {false, true}) {
    BackboneConfig cfg = bare(8, 2);
    cfg.layer_norm = norm;
    Rng rng(11);
    const ParameterStore s = random_layer_store(cfg, 0, rng);
    const Tensor x = oracle::random_matrix(8, 5, rng);
    Graph g;
    const Binder bind(g, s, {});
    const Tensor out = transformer_layer(g.constant(x), bind.layer(0, cfg), cfg).value();
    EXPECT_LT(oracle::max_abs_diff(out, reference_layer(x, s, cfg, 0)), 1e-12) << "layer_norm=" << norm;
  }
}

TEST(Backbone, NoLayersAppliesHeadToEmbeddedCls) {
  BackboneConfig cfg;
  cfg.num_layers = 0;
  const Model model = Model::create(cfg, PeftMethod::simple(MethodTag::Linear), 1, 2);
  Rng rng(12);
  const Tensor img = random_image(cfg, rng);
  Graph g;
  const Binder bind(g, model.parameters(), {});
  const Tensor x0 = patchify(g, img, cfg, bind.embedding()).value();
  Tensor cls = Tensor::matrix(x0.rows(), 1);
  for (std::size_t i = 0; i < x0.rows(); ++i) cls(i, 0) = x0(i, 0);
  const Tensor expected =
      oracle::add_bias(oracle::matmul(model.parameters().at("head.weight"), cls), model.parameters().at("head.bias"));
  EXPECT_LT(oracle::max_abs_diff(model.logits(img), expected), 1e-14);
}

TEST(Backbone, FixedSeedGivesBitIdenticalLogits) {
  const BackboneConfig cfg;
  Rng rng(13);
  const Tensor img = random_image(cfg, rng);
  const Tensor a = Model::create(cfg, PeftMethod::simple(MethodTag::Linear), 5, 6).logits(img);
  const Tensor b = Model::create(cfg, PeftMethod::simple(MethodTag::Linear), 5, 6).logits(img);
  EXPECT_EQ(a, b);
  const Tensor c = Model::create(cfg, PeftMethod::simple(MethodTag::Linear), 7, 6).logits(img);
  EXPECT_NE(a, c);
}

TEST(Backbone, TwoLayersEqualManualApplication) {
  BackboneConfig cfg;
  cfg.num_layers = 2;
  const Model model = Model::create(cfg, PeftMethod::simple(MethodTag::Linear), 14, 15);
  const ParameterStore& s = model.parameters();
  Rng rng(16);
  const Tensor img = random_image(cfg, rng);
  Graph g;
  const Binder bind(g, s, {});
  Tensor x = patchify(g, img, cfg, bind.embedding()).value();
  for (int l = 0; l < 2; ++l) x = reference_layer(x, s, cfg, l);
  Tensor cls = Tensor::matrix(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) cls(i, 0) = x(i, 0);
  const Tensor expected = oracle::add_bias(oracle::matmul(s.at("head.weight"), cls), s.at("head.bias"));
  EXPECT_LT(oracle::max_abs_diff(model.logits(img), expected), 1e-11);
}

TEST(Backbone, MlpHeadHasThreeLayers) {
  const BackboneConfig cfg;
  const auto layout = head_layout(cfg, HeadKind::Mlp3);
  EXPECT_EQ(layout.size(), 6u);
  EXPECT_EQ(layout.back().shape, (Shape{2}));
}
