#include "eptlab/peft.hpp"

#include <algorithm>
#include <cmath>

#include "eptlab/errors.hpp"
#include "eptlab/rng.hpp"

namespace eptlab {

namespace {

constexpr double kPromptInitStd = 0.02;

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const std::pair<E, std::string_view> (&table)[N], const char* what) {
  for (const auto& [value, name] : table)
    if (name == s) return value;
  throw ConfigError(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

template <typename E, std::size_t N>
std::string_view enum_name(E value, const std::pair<E, std::string_view> (&table)[N]) {
  for (const auto& [v, name] : table)
    if (v == value) return name;
  return "?";
}

constexpr std::pair<MethodTag, std::string_view> kTags[] = {
    {MethodTag::EPT, "EPT"},       {MethodTag::VPT, "VPT"},         {MethodTag::VP, "VP"},
    {MethodTag::LoRA, "LoRA"},     {MethodTag::Adapter, "Adapter"}, {MethodTag::Bias, "Bias"},
    {MethodTag::Linear, "Linear"}, {MethodTag::Partial1, "Partial1"}, {MethodTag::MLP3, "MLP3"},
    {MethodTag::Full, "Full"},
};
constexpr std::pair<EmbeddingWay, std::string_view> kWays[] = {
    {EmbeddingWay::Add, "add"},
    {EmbeddingWay::Multiply, "multiply"},
    {EmbeddingWay::PureCat, "pure_cat"},
    {EmbeddingWay::MultiCat, "multi_cat"},
};
constexpr std::pair<PromptMode, std::string_view> kModes[] = {{PromptMode::Shallow, "shallow"},
                                                              {PromptMode::Deep, "deep"}};
constexpr std::pair<DepthOrder, std::string_view> kOrders[] = {{DepthOrder::TopToBottom, "top_to_bottom"},
                                                               {DepthOrder::BottomToTop, "bottom_to_top"}};

}  // namespace

std::string_view to_string(MethodTag tag) { return enum_name(tag, kTags); }
std::string_view to_string(EmbeddingWay way) { return enum_name(way, kWays); }
std::string_view to_string(PromptMode mode) { return enum_name(mode, kModes); }
std::string_view to_string(DepthOrder order) { return enum_name(order, kOrders); }
MethodTag parse_method_tag(std::string_view s) { return parse_enum(s, kTags, "method tag"); }
EmbeddingWay parse_embedding_way(std::string_view s) { return parse_enum(s, kWays, "embedding way"); }
PromptMode parse_prompt_mode(std::string_view s) { return parse_enum(s, kModes, "prompt mode"); }
DepthOrder parse_depth_order(std::string_view s) { return parse_enum(s, kOrders, "depth order"); }

PeftMethod PeftMethod::ept(int prompt_length, EmbeddingWay way, PromptMode mode) {
  PeftMethod m;
  m.tag = MethodTag::EPT;
  m.prompt_length = prompt_length;
  m.embedding_way = way;
  m.mode = mode;
  return m;
}

PeftMethod PeftMethod::vpt(int prompt_length, PromptMode mode) {
  PeftMethod m;
  m.tag = MethodTag::VPT;
  m.prompt_length = prompt_length;
  m.mode = mode;
  return m;
}

PeftMethod PeftMethod::vp() {
  PeftMethod m;
  m.tag = MethodTag::VP;
  return m;
}

PeftMethod PeftMethod::lora(int rank) {
  PeftMethod m;
  m.tag = MethodTag::LoRA;
  m.rank = rank;
  return m;
}

PeftMethod PeftMethod::adapter(int reduction) {
  PeftMethod m;
  m.tag = MethodTag::Adapter;
  m.reduction = reduction;
  return m;
}

PeftMethod PeftMethod::simple(MethodTag tag) {
  PeftMethod m;
  m.tag = tag;
  return m;
}

void PeftMethod::validate(const BackboneConfig& cfg) const {
  const std::string who = "method(" + std::string(to_string(tag)) + ")";
  auto forbid = [&](bool present, const char* field) {
    if (present) throw ConfigError(who + "." + field + " is not meaningful for this method");
  };
  const bool is_ept = tag == MethodTag::EPT;
  const bool is_vpt = tag == MethodTag::VPT;
  forbid(prompt_length.has_value() && !is_ept && !is_vpt, "prompt_length");
  forbid(embedding_way.has_value() && !is_ept, "embedding_way");
  forbid(mode.has_value() && !is_ept && !is_vpt, "mode");
  forbid(depth.has_value() && !is_ept, "depth");
  forbid(order.has_value() && !is_ept, "order");
  forbid(prompt_grad.has_value() && !is_prompt_method(), "prompt_grad");
  forbid(rank.has_value() && tag != MethodTag::LoRA, "rank");
  forbid(reduction.has_value() && tag != MethodTag::Adapter, "reduction");

  if (is_ept) {
    if (!prompt_length) throw ConfigError(who + ".prompt_length is required");
    if (*prompt_length < 1) throw ConfigError(who + ".prompt_length must be >= 1");
    if (depth && (*depth < 0 || *depth > cfg.num_layers)) {
      throw ConfigError(who + ".depth must lie in [1, " + std::to_string(cfg.num_layers) + "]");
    }
    if (mode == PromptMode::Shallow && depth && *depth != 1) {
      throw ConfigError(who + ".depth must be 1 for shallow prompting");
    }
  }
  if (is_vpt) {
    if (!prompt_length) throw ConfigError(who + ".prompt_length is required");
    if (*prompt_length < 0) throw ConfigError(who + ".prompt_length must be >= 0");
  }
  if (tag == MethodTag::LoRA) {
    if (!rank) throw ConfigError(who + ".rank is required");
    if (*rank < 1 || *rank > cfg.embed_dim) {
      throw ConfigError(who + ".rank must lie in [1, " + std::to_string(cfg.embed_dim) + "]");
    }
  }
  if (tag == MethodTag::Adapter) {
    if (!reduction) throw ConfigError(who + ".reduction is required");
    if (*reduction < 1 || cfg.embed_dim / *reduction < 1) {
      throw ConfigError(who + ".reduction gives an empty bottleneck (embed_dim / reduction < 1)");
    }
  }
}

PeftMethod PeftMethod::resolved(const BackboneConfig& cfg) const {
  validate(cfg);
  PeftMethod m = *this;
  if (tag == MethodTag::EPT) {
    if (!m.embedding_way) m.embedding_way = EmbeddingWay::PureCat;
    if (!m.mode) m.mode = PromptMode::Deep;
    if (!m.depth) m.depth = *m.mode == PromptMode::Shallow ? 1 : cfg.num_layers;
    if (!m.order) m.order = DepthOrder::BottomToTop;
  }
  if (tag == MethodTag::VPT && !m.mode) m.mode = PromptMode::Deep;
  if (is_prompt_method() && !m.prompt_grad) m.prompt_grad = true;
  return m;
}

std::string PeftMethod::label() const {
  std::string s(to_string(tag));
  if (mode) s += "-" + std::string(to_string(*mode));
  if (embedding_way) s += "-" + std::string(to_string(*embedding_way));
  if (depth) s += "-D" + std::to_string(*depth);
  if (order && depth) s += *order == DepthOrder::TopToBottom ? "t2b" : "b2t";
  if (prompt_length) s += "-L" + std::to_string(*prompt_length);
  if (rank) s += "-r" + std::to_string(*rank);
  if (reduction) s += "-r" + std::to_string(*reduction);
  if (prompt_grad && !*prompt_grad) s += "-frozenprompt";
  return s;
}

std::vector<int> prompted_layers(const PeftMethod& method, int num_layers) {
  if (method.tag != MethodTag::EPT) return {};
  const PromptMode mode = method.mode.value_or(PromptMode::Deep);
  const int depth = method.depth.value_or(mode == PromptMode::Shallow ? 1 : num_layers);
  if (depth <= 0 || num_layers <= 0) throw ContractError("EPT needs at least one prompted layer");
  if (mode == PromptMode::Shallow) return {0};
  std::vector<int> out;
  const int k = std::min(depth, num_layers);
  if (method.order.value_or(DepthOrder::BottomToTop) == DepthOrder::TopToBottom) {
    for (int l = num_layers - k; l < num_layers; ++l) out.push_back(l);
  } else {
    for (int l = 0; l < k; ++l) out.push_back(l);
  }
  return out;
}

int ept_length_from_relative(double relative, int num_patches, int embed_dim) {
  if (!(relative > 0.0)) throw ConfigError("relative prompt length must be positive");
  if (num_patches <= 0 || embed_dim <= 0) throw ConfigError("relative prompt length needs positive dimensions");
  const double rows = relative * static_cast<double>(embed_dim) / static_cast<double>(num_patches);
  return std::max(1, static_cast<int>(std::lround(rows)));
}

Tensor scaling_vector_alpha(const Tensor& ktq) {
  const std::size_t r = ktq.rows(), c = ktq.cols();
  Tensor out = Tensor::matrix(1, c);
  for (std::size_t j = 0; j < c; ++j) {
    double lo = ktq(0, j), hi = ktq(0, j);
    for (std::size_t i = 1; i < r; ++i) {
      lo = std::min(lo, ktq(i, j));
      hi = std::max(hi, ktq(i, j));
    }
    out[j] = hi - lo;
  }
  return out;
}

Var embedding_way_transform(Var ktq, Var prompt, EmbeddingWay way) {
  if (prompt.cols() != ktq.cols()) {
    throw ContractError("prompt has " + std::to_string(prompt.cols()) + " columns but the score matrix has " +
                        std::to_string(ktq.cols()));
  }
  if (prompt.rows() == 0) throw ContractError("prompt has no rows");
  switch (way) {
    case EmbeddingWay::Add:
      return add(ktq, tile_rows(prompt, ktq.rows()));
    case EmbeddingWay::Multiply:
      return hadamard(ktq, tile_rows(prompt, ktq.rows()));
    case EmbeddingWay::PureCat:
      return concat_rows(prompt, ktq);
    case EmbeddingWay::MultiCat:
      return concat_rows(scale_columns(prompt, column_range(ktq)), ktq);
  }
  throw ContractError("unknown embedding way");
}

Var prompted_softmax(Var ktq, Var prompt, EmbeddingWay way) {
  Var probs = softmax_columns(embedding_way_transform(ktq, prompt, way));
  if (way == EmbeddingWay::PureCat || way == EmbeddingWay::MultiCat) {
    return slice_rows(probs, prompt.rows(), probs.rows());
  }
  return probs;
}

Tensor prompted_softmax(const Tensor& ktq, const Tensor& prompt, EmbeddingWay way) {
  Graph g;
  return prompted_softmax(g.constant(ktq), g.constant(prompt), way).value();
}

std::vector<ParamSpec> method_layout(const BackboneConfig& cfg, const PeftMethod& raw) {
  const PeftMethod method = raw.resolved(cfg);
  const auto d = static_cast<std::size_t>(cfg.embed_dim);
  const auto n = static_cast<std::size_t>(cfg.num_tokens());
  std::vector<ParamSpec> out;
  switch (method.tag) {
    case MethodTag::EPT:
      for (int l : prompted_layers(method, cfg.num_layers)) {
        out.push_back({"ept." + std::to_string(l), {static_cast<std::size_t>(*method.prompt_length), n}});
      }
      break;
    case MethodTag::VPT: {
      const auto np = static_cast<std::size_t>(*method.prompt_length);
      if (np == 0) break;
      const int count = *method.mode == PromptMode::Shallow ? std::min(1, cfg.num_layers) : cfg.num_layers;
      for (int l = 0; l < count; ++l) out.push_back({"vpt." + std::to_string(l), {d, np}});
      break;
    }
    case MethodTag::VP:
      out.push_back({"vp.prompt", {d, n}});
      break;
    case MethodTag::LoRA: {
      const auto r = static_cast<std::size_t>(*method.rank);
      for (int l = 0; l < cfg.num_layers; ++l) {
        const auto p = "lora." + std::to_string(l) + ".";
        for (const char* which : {"q", "v"}) {
          out.push_back({p + which + ".a", {r, d}});
          out.push_back({p + which + ".b", {d, r}});
        }
      }
      break;
    }
    case MethodTag::Adapter: {
      const auto b = static_cast<std::size_t>(cfg.embed_dim / *method.reduction);
      for (int l = 0; l < cfg.num_layers; ++l) {
        const auto p = "adapter." + std::to_string(l) + ".";
        out.push_back({p + "down.weight", {b, d}});
        out.push_back({p + "down.bias", {b}});
        out.push_back({p + "up.weight", {d, b}});
        out.push_back({p + "up.bias", {d}});
      }
      break;
    }
    default:
      break;
  }
  return out;
}

TrainableMask select_trainable(const BackboneConfig& cfg, const PeftMethod& raw) {
  const PeftMethod method = raw.resolved(cfg);
  TrainableMask mask;
  for (const auto& spec : head_layout(cfg, method.head_kind())) mask.insert(spec.name);
  switch (method.tag) {
    case MethodTag::Full:
      for (const auto& spec : backbone_layout(cfg)) mask.insert(spec.name);
      break;
    case MethodTag::Partial1:
      if (cfg.num_layers > 0) {
        const auto p = layer_prefix(cfg.num_layers - 1);
        for (const auto& spec : backbone_layout(cfg))
          if (spec.name.starts_with(p)) mask.insert(spec.name);
      }
      break;
    case MethodTag::Bias:
      for (const auto& spec : backbone_layout(cfg))
        if (spec.name.ends_with(".bias")) mask.insert(spec.name);
      break;
    case MethodTag::EPT:
    case MethodTag::VPT:
    case MethodTag::VP:
      if (!*method.prompt_grad) break;
      [[fallthrough]];
    case MethodTag::LoRA:
    case MethodTag::Adapter:
      for (const auto& spec : method_layout(cfg, method)) mask.insert(spec.name);
      break;
    case MethodTag::Linear:
    case MethodTag::MLP3:
      break;
  }
  return mask;
}

namespace {

std::int64_t count_names(const std::vector<ParamSpec>& layout, const TrainableMask& mask) {
  std::int64_t total = 0;
  for (const auto& spec : layout)
    if (mask.contains(spec.name)) total += static_cast<std::int64_t>(shape_size(spec.shape));
  return total;
}

}  // namespace

std::int64_t count_trainable(const BackboneConfig& cfg, const PeftMethod& method) {
  const TrainableMask mask = select_trainable(cfg, method);
  std::int64_t total = count_names(backbone_layout(cfg), mask);
  total += count_names(head_layout(cfg, method.head_kind()), mask);
  total += count_names(method_layout(cfg, method), mask);
  return total;
}

std::int64_t count_prompt_parameters(const BackboneConfig& cfg, const PeftMethod& method) {
  if (!method.is_prompt_method()) return 0;
  std::int64_t total = 0;
  for (const auto& spec : method_layout(cfg, method)) total += static_cast<std::int64_t>(shape_size(spec.shape));
  return total;
}

Model::Model(BackboneConfig cfg, PeftMethod method, ParameterStore params)
    : cfg_(cfg), method_(method.resolved(cfg)), params_(std::move(params)) {
  cfg_.validate();
  auto require = [&](const std::vector<ParamSpec>& layout) {
    for (const auto& spec : layout) {
      auto it = params_.find(spec.name);
      if (it == params_.end()) throw LoadError("missing parameter '" + spec.name + "'");
      if (it->second.shape() != spec.shape) {
        throw LoadError("parameter '" + spec.name + "' has shape " + it->second.shape_string() + ", expected " +
                        shape_string(spec.shape));
      }
    }
  };
  require(backbone_layout(cfg_));
  require(head_layout(cfg_, method_.head_kind()));
  require(method_layout(cfg_, method_));
}

Model Model::create(const BackboneConfig& cfg, const PeftMethod& raw, std::uint64_t backbone_seed,
                    std::uint64_t method_seed) {
  cfg.validate();
  const PeftMethod method = raw.resolved(cfg);
  ParameterStore params;
  init_backbone(params, cfg, backbone_seed);
  init_head(params, cfg, method.head_kind(), method_seed);

  Rng rng = Rng::stream(method_seed, "method." + std::string(to_string(method.tag)));
  const double d = cfg.embed_dim;
  for (const auto& spec : method_layout(cfg, method)) {
    Tensor t(spec.shape);
    const auto& name = spec.name;
    if (name.ends_with(".b") || name.ends_with("up.weight") || name.ends_with(".bias")) {
      // LoRA B, adapter up-projection and adapter biases start at zero.
    } else if (name.ends_with(".a") || name.ends_with("down.weight")) {
      for (auto& v : t.data()) v = rng.normal(0.0, 1.0 / std::sqrt(d));
    } else if (method.tag == MethodTag::EPT && method.embedding_way == EmbeddingWay::Multiply) {
      // Multiplicative prompts start near the identity.
      for (auto& v : t.data()) v = rng.normal(1.0, kPromptInitStd);
    } else {
      for (auto& v : t.data()) v = rng.normal(0.0, kPromptInitStd);
    }
    params.emplace(name, std::move(t));
  }
  return Model(cfg, method, std::move(params));
}

ForwardResult Model::forward_with(const ParameterStore& params, Graph& graph, const Tensor& image,
                                  const TrainableMask& mask, const ForwardOptions& options) const {
  const Binder bind(graph, params, mask);
  ForwardResult result;

  Var x0 = patchify(graph, image, cfg_, bind.embedding());
  std::vector<LayerWeights> layers;
  for (int l = 0; l < cfg_.num_layers; ++l) layers.push_back(bind.layer(l, cfg_));
  const HeadWeights head = bind_head(bind, method_.head_kind());

  LayerHooks hooks;
  switch (method_.tag) {
    case MethodTag::EPT: {
      const auto prompted = prompted_layers(method_, cfg_.num_layers);
      const EmbeddingWay way = *method_.embedding_way;
      hooks.attention = [&, prompted, way](int layer) -> AttentionProbs {
        if (std::find(prompted.begin(), prompted.end(), layer) == prompted.end()) return {};
        return [&, layer, way](Var scores, int) {
          if (options.capture_scores) result.scores[layer].push_back(scores);
          return prompted_softmax(scores, bind("ept." + std::to_string(layer)), way);
        };
      };
      break;
    }
    case MethodTag::VPT: {
      const int np = *method_.prompt_length;
      if (np == 0) break;
      const bool deep = *method_.mode == PromptMode::Deep;
      hooks.readout_column = static_cast<std::size_t>(np);
      hooks.before_layer = [&, np, deep](Var x, int layer) {
        if (layer == 0) return concat_cols(bind("vpt.0"), x);
        if (!deep) return x;
        Var rest = slice_cols(x, static_cast<std::size_t>(np), x.cols());
        return concat_cols(bind("vpt." + std::to_string(layer)), rest);
      };
      break;
    }
    case MethodTag::VP:
      x0 = add(x0, bind("vp.prompt"));
      break;
    case MethodTag::LoRA:
      hooks.weights = [&](LayerWeights w, int layer) {
        const auto p = "lora." + std::to_string(layer) + ".";
        w.wq = add(w.wq, matmul(bind(p + "q.b"), bind(p + "q.a")));
        w.wv = add(w.wv, matmul(bind(p + "v.b"), bind(p + "v.a")));
        return w;
      };
      break;
    case MethodTag::Adapter:
      hooks.after_layer = [&](Var x, int layer) {
        const auto p = "adapter." + std::to_string(layer) + ".";
        Var hidden = relu(add_column_broadcast(matmul(bind(p + "down.weight"), x), bind(p + "down.bias")));
        return add(x, add_column_broadcast(matmul(bind(p + "up.weight"), hidden), bind(p + "up.bias")));
      };
      break;
    default:
      break;
  }

  result.backbone = forward_backbone(x0, layers, head, cfg_, hooks);
  return result;
}

Tensor Model::logits(const Tensor& image) const {
  Graph g;
  return forward(g, image).logits().value();
}

Model plain_backbone(const Model& model) {
  const BackboneConfig& cfg = model.config();
  const PeftMethod plain = PeftMethod::simple(model.method().tag == MethodTag::MLP3 ? MethodTag::MLP3 : MethodTag::Linear);
  ParameterStore params;
  for (const auto& spec : backbone_layout(cfg)) params.emplace(spec.name, model.parameters().at(spec.name));
  for (const auto& spec : head_layout(cfg, plain.head_kind())) params.emplace(spec.name, model.parameters().at(spec.name));
  return Model(cfg, plain, std::move(params));
}

}  // namespace eptlab
