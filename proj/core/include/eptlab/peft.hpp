#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "eptlab/autodiff.hpp"
#include "eptlab/vit.hpp"

namespace eptlab {

enum class MethodTag { EPT, VPT, VP, LoRA, Adapter, Bias, Linear, Partial1, MLP3, Full };
enum class EmbeddingWay { Add, Multiply, PureCat, MultiCat };
enum class PromptMode { Shallow, Deep };
enum class DepthOrder { TopToBottom, BottomToTop };

std::string_view to_string(MethodTag tag);
std::string_view to_string(EmbeddingWay way);
std::string_view to_string(PromptMode mode);
std::string_view to_string(DepthOrder order);
MethodTag parse_method_tag(std::string_view s);
EmbeddingWay parse_embedding_way(std::string_view s);
PromptMode parse_prompt_mode(std::string_view s);
DepthOrder parse_depth_order(std::string_view s);

inline constexpr EmbeddingWay kAllEmbeddingWays[] = {EmbeddingWay::Add, EmbeddingWay::Multiply,
                                                     EmbeddingWay::PureCat, EmbeddingWay::MultiCat};

/// A tuning strategy and its hyperparameters. Optional fields are present only
/// where meaningful for the tag; `resolved` fills defaults for a backbone.
struct PeftMethod {
  MethodTag tag = MethodTag::Linear;
  std::optional<int> prompt_length;           // EPT rows d_p, VPT columns n_p
  std::optional<EmbeddingWay> embedding_way;  // EPT
  std::optional<PromptMode> mode;             // EPT, VPT
  std::optional<int> depth;                   // EPT: number of prompted layers
  std::optional<DepthOrder> order;            // EPT
  std::optional<bool> prompt_grad;            // EPT, VPT, VP
  std::optional<int> rank;                    // LoRA
  std::optional<int> reduction;               // Adapter

  static PeftMethod ept(int prompt_length, EmbeddingWay way = EmbeddingWay::PureCat,
                        PromptMode mode = PromptMode::Deep);
  static PeftMethod vpt(int prompt_length, PromptMode mode = PromptMode::Deep);
  static PeftMethod vp();
  static PeftMethod lora(int rank);
  static PeftMethod adapter(int reduction);
  static PeftMethod simple(MethodTag tag);

  bool is_prompt_method() const { return tag == MethodTag::EPT || tag == MethodTag::VPT || tag == MethodTag::VP; }
  HeadKind head_kind() const { return tag == MethodTag::MLP3 ? HeadKind::Mlp3 : HeadKind::Linear; }

  /// Checks field presence and ranges against `cfg`; throws ConfigError.
  void validate(const BackboneConfig& cfg) const;
  /// Copy with every meaningful default materialized. Validates.
  PeftMethod resolved(const BackboneConfig& cfg) const;
  /// Short human-readable label, e.g. "EPT-deep-pure_cat-L4".
  std::string label() const;

  friend bool operator==(const PeftMethod&, const PeftMethod&) = default;
};

/// Zero-based layer indices carrying EPT prompts. Top-to-bottom with depth k
/// covers the last k layers; bottom-to-top the first k. Throws ContractError
/// when the set is empty.
std::vector<int> prompted_layers(const PeftMethod& method, int num_layers);

/// EPT prompt rows for a relative prompt length L, keeping prompt parameter
/// counts comparable with a VPT prompt of L columns: round(L * d / (n - 1)),
/// at least 1. ViT-Base (d = 768, 196 patches) maps L = 1 to 4.
int ept_length_from_relative(double relative, int num_patches, int embed_dim);

/// alpha_j = max_i m(i, j) - min_i m(i, j).
Tensor scaling_vector_alpha(const Tensor& ktq);

/// Matrix that enters the column softmax for a given embedding way:
/// add: ktq + tile(P); multiply: ktq .* tile(P); pure_cat: [P; ktq];
/// multi_cat: [P .* alpha(ktq); ktq].
Var embedding_way_transform(Var ktq, Var prompt, EmbeddingWay way);

/// Column softmax of the transformed matrix, keeping only the rows that
/// correspond to ktq. Output has ktq's shape.
Var prompted_softmax(Var ktq, Var prompt, EmbeddingWay way);
Tensor prompted_softmax(const Tensor& ktq, const Tensor& prompt, EmbeddingWay way);

/// Names and shapes of the parameters a method injects (prompts, adapters...).
std::vector<ParamSpec> method_layout(const BackboneConfig& cfg, const PeftMethod& method);

using TrainableMask = std::set<std::string>;

/// Names of parameters updated by `method` on a backbone of `cfg`.
TrainableMask select_trainable(const BackboneConfig& cfg, const PeftMethod& method);
/// Scalar count of trainable parameters, computed from layouts only.
std::int64_t count_trainable(const BackboneConfig& cfg, const PeftMethod& method);
/// Scalar count of injected prompt parameters (EPT/VPT/VP), zero otherwise.
std::int64_t count_prompt_parameters(const BackboneConfig& cfg, const PeftMethod& method);

struct ForwardOptions {
  /// Record each prompted layer's per-head score matrices K_h^T Q_h.
  bool capture_scores = false;
};

struct ForwardResult {
  BackboneOutput backbone;
  /// layer -> per-head scores, filled when ForwardOptions::capture_scores.
  std::map<int, std::vector<Var>> scores;
  Var logits() const { return backbone.logits; }
  Var cls() const { return backbone.cls; }
};

/// Backbone, head and method parameters together.
class Model {
 public:
  Model(BackboneConfig cfg, PeftMethod method, ParameterStore params);

  /// Backbone weights from `backbone_seed`; head and method parameters from
  /// `method_seed`.
  static Model create(const BackboneConfig& cfg, const PeftMethod& method, std::uint64_t backbone_seed,
                      std::uint64_t method_seed);

  const BackboneConfig& config() const { return cfg_; }
  const PeftMethod& method() const { return method_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }
  TrainableMask trainable() const { return select_trainable(cfg_, method_); }

  /// Forward of one image inside `graph`. Parameters not in `mask` become
  /// constant leaves.
  ForwardResult forward(Graph& graph, const Tensor& image, const TrainableMask& mask,
                        const ForwardOptions& options = {}) const {
    return forward_with(params_, graph, image, mask, options);
  }
  ForwardResult forward(Graph& graph, const Tensor& image, const ForwardOptions& options = {}) const {
    return forward_with(params_, graph, image, TrainableMask{}, options);
  }
  /// Same architecture evaluated with substitute parameter values, as used
  /// by gradient checks.
  ForwardResult forward_with(const ParameterStore& params, Graph& graph, const Tensor& image,
                             const TrainableMask& mask, const ForwardOptions& options = {}) const;

  Tensor logits(const Tensor& image) const;

 private:
  BackboneConfig cfg_;
  PeftMethod method_;
  ParameterStore params_;
};

/// The same backbone and head with no method attached: the frozen reference.
Model plain_backbone(const Model& model);

}  // namespace eptlab
