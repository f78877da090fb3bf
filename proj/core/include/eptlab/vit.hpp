#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "eptlab/autodiff.hpp"
#include "eptlab/tensor.hpp"

namespace eptlab {

struct BackboneConfig {
  int image_side = 16;
  int patch_side = 4;
  int channels = 1;
  int embed_dim = 32;
  int num_layers = 4;
  int num_heads = 2;
  int mlp_hidden_dim = 64;
  int num_classes = 2;
  /// Pre-norm placement when on; off reproduces the bare two-residual layer.
  bool layer_norm = true;
  bool output_projection = false;

  int patches_per_side() const { return image_side / patch_side; }
  int num_patches() const { return patches_per_side() * patches_per_side(); }
  /// Token count including CLS.
  int num_tokens() const { return num_patches() + 1; }
  int patch_dim() const { return channels * patch_side * patch_side; }
  int head_dim() const { return embed_dim / num_heads; }

  /// Throws ConfigError on any inconsistent field.
  void validate() const;

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

enum class HeadKind { Linear, Mlp3 };

struct ParamSpec {
  std::string name;
  Shape shape;
};

std::string layer_prefix(int layer);

/// Names and shapes of backbone (embedding + layers) parameters, no head.
std::vector<ParamSpec> backbone_layout(const BackboneConfig& cfg);
std::vector<ParamSpec> head_layout(const BackboneConfig& cfg, HeadKind kind);

/// Seeded initialization of backbone and head parameters into `store`.
void init_backbone(ParameterStore& store, const BackboneConfig& cfg, std::uint64_t seed);
void init_head(ParameterStore& store, const BackboneConfig& cfg, HeadKind kind, std::uint64_t seed);

/// Patch pixels as columns: patch_dim x num_patches. Channel-major, then
/// row-major within each patch; patches in raster order.
Tensor extract_patches(const Tensor& image, const BackboneConfig& cfg);

struct LayerWeights {
  Var wq, wk, wv;
  std::optional<Var> wo;
  Var fc1_weight, fc1_bias, fc2_weight, fc2_bias;
  std::optional<Var> norm1_weight, norm1_bias, norm2_weight, norm2_bias;
};

struct EmbeddingWeights {
  Var proj_weight, proj_bias, cls, pos;
};

/// Binds graph leaves for named parameters.
class Binder {
 public:
  Binder(Graph& graph, const ParameterStore& store, std::set<std::string> trainable)
      : graph_(graph), store_(store), trainable_(std::move(trainable)) {}
  Binder(Graph&, ParameterStore&&, std::set<std::string>) = delete;
  Var operator()(const std::string& name) const { return graph_.bind(store_, name, trainable_); }
  bool has(const std::string& name) const { return store_.contains(name); }
  Graph& graph() const { return graph_; }

  LayerWeights layer(int index, const BackboneConfig& cfg) const;
  EmbeddingWeights embedding() const;

 private:
  Graph& graph_;
  const ParameterStore& store_;
  std::set<std::string> trainable_;
};

/// d x n token sequence: patch embeddings plus positions, CLS at column 0.
Var patchify(Graph& graph, const Tensor& image, const BackboneConfig& cfg, const EmbeddingWeights& w);

struct Projections {
  Var q, k, v;
};

/// Q = Wq X, K = Wk X / sqrt(d/h), V = Wv X.
Projections project_qkv(Var x, const LayerWeights& w, const BackboneConfig& cfg);

/// Maps a head's score matrix K_h^T Q_h (n x n) to attention weights.
using AttentionProbs = std::function<Var(Var scores, int head)>;

/// Per head V_h softmax(K_h^T Q_h), heads stacked along the embedding axis.
/// `probs` replaces the column softmax when given.
Var attention(Var x, const LayerWeights& w, const BackboneConfig& cfg, const AttentionProbs& probs = {});

/// Two-residual layer: Y = X + Att(norm1 X); out = Y + W2 ReLU(W1 norm2 Y + b1) + b2.
Var transformer_layer(Var x, const LayerWeights& w, const BackboneConfig& cfg, const AttentionProbs& probs = {});

/// Column-wise MLP residual block used by transformer_layer.
Var mlp_block(Var y, const LayerWeights& w, const BackboneConfig& cfg);

struct HeadWeights {
  HeadKind kind = HeadKind::Linear;
  std::vector<std::pair<Var, Var>> layers;  // (weight, bias), ReLU between.
};

HeadWeights bind_head(const Binder& bind, HeadKind kind);
Var apply_head(Var cls, const HeadWeights& head);

/// Hooks that PEFT methods use to alter the plain forward.
struct LayerHooks {
  std::function<Var(Var x, int layer)> before_layer;
  std::function<Var(Var x, int layer)> after_layer;
  std::function<LayerWeights(LayerWeights w, int layer)> weights;
  std::function<AttentionProbs(int layer)> attention;
  /// Column the head reads after the last layer.
  std::size_t readout_column = 0;
};

struct BackboneOutput {
  Var logits;
  Var cls;                     // final CLS column (d x 1)
  std::vector<Var> layer_cls;  // CLS after each layer
  std::vector<Var> layer_out;  // full token sequence after each layer
};

/// Sequential layers, then head on the readout column.
BackboneOutput forward_backbone(Var x0, const std::vector<LayerWeights>& layers, const HeadWeights& head,
                                const BackboneConfig& cfg, const LayerHooks& hooks = {});

}  // namespace eptlab
