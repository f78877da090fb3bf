#include "eptlab/vit.hpp"

#include <cmath>

#include "eptlab/errors.hpp"
#include "eptlab/rng.hpp"

namespace eptlab {

void BackboneConfig::validate() const {
  auto positive = [](int v, const char* field) {
    if (v <= 0) throw ConfigError(std::string("backbone.") + field + " must be positive");
  };
  positive(image_side, "image_side");
  positive(patch_side, "patch_side");
  positive(channels, "channels");
  positive(embed_dim, "embed_dim");
  positive(num_heads, "num_heads");
  positive(mlp_hidden_dim, "mlp_hidden_dim");
  positive(num_classes, "num_classes");
  if (num_layers < 0) throw ConfigError("backbone.num_layers must be non-negative");
  if (image_side % patch_side != 0) {
    throw ConfigError("backbone.image_side (" + std::to_string(image_side) + ") is not divisible by patch_side (" +
                      std::to_string(patch_side) + ")");
  }
  if (embed_dim % num_heads != 0) {
    throw ConfigError("backbone.embed_dim (" + std::to_string(embed_dim) + ") is not divisible by num_heads (" +
                      std::to_string(num_heads) + ")");
  }
}

std::string layer_prefix(int layer) { return "layers." + std::to_string(layer) + "."; }

std::vector<ParamSpec> backbone_layout(const BackboneConfig& cfg) {
  const auto d = static_cast<std::size_t>(cfg.embed_dim);
  const auto m = static_cast<std::size_t>(cfg.mlp_hidden_dim);
  const auto n = static_cast<std::size_t>(cfg.num_tokens());
  std::vector<ParamSpec> out = {
      {"embed.proj.weight", {d, static_cast<std::size_t>(cfg.patch_dim())}},
      {"embed.proj.bias", {d}},
      {"embed.cls", {d, 1}},
      {"embed.pos", {d, n}},
  };
  for (int l = 0; l < cfg.num_layers; ++l) {
    const auto p = layer_prefix(l);
    out.push_back({p + "attn.wq", {d, d}});
    out.push_back({p + "attn.wk", {d, d}});
    out.push_back({p + "attn.wv", {d, d}});
    if (cfg.output_projection) out.push_back({p + "attn.wo", {d, d}});
    out.push_back({p + "mlp.fc1.weight", {m, d}});
    out.push_back({p + "mlp.fc1.bias", {m}});
    out.push_back({p + "mlp.fc2.weight", {d, m}});
    out.push_back({p + "mlp.fc2.bias", {d}});
    if (cfg.layer_norm) {
      out.push_back({p + "norm1.weight", {d}});
      out.push_back({p + "norm1.bias", {d}});
      out.push_back({p + "norm2.weight", {d}});
      out.push_back({p + "norm2.bias", {d}});
    }
  }
  return out;
}

std::vector<ParamSpec> head_layout(const BackboneConfig& cfg, HeadKind kind) {
  const auto d = static_cast<std::size_t>(cfg.embed_dim);
  const auto c = static_cast<std::size_t>(cfg.num_classes);
  if (kind == HeadKind::Linear) return {{"head.weight", {c, d}}, {"head.bias", {c}}};
  return {
      {"head.fc1.weight", {d, d}}, {"head.fc1.bias", {d}}, {"head.fc2.weight", {d, d}},
      {"head.fc2.bias", {d}},      {"head.fc3.weight", {c, d}}, {"head.fc3.bias", {c}},
  };
}

namespace {

constexpr double kHeadOutputStd = 0.02;

Tensor gaussian(const Shape& shape, Rng& rng, double stddev) {
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

void init_backbone(ParameterStore& store, const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng = Rng::stream(seed, "backbone");
  const double d = cfg.embed_dim;
  for (const auto& spec : backbone_layout(cfg)) {
    const auto& name = spec.name;
    Tensor t(spec.shape);
    if (ends_with(name, "norm1.weight") || ends_with(name, "norm2.weight")) {
      t = Tensor(spec.shape, 1.0);
    } else if (ends_with(name, ".bias")) {
      // zeros
    } else if (name == "embed.proj.weight") {
      t = gaussian(spec.shape, rng, 1.0 / std::sqrt(cfg.patch_dim()));
    } else if (name == "embed.cls" || name == "embed.pos") {
      t = gaussian(spec.shape, rng, 1.0);
    } else if (ends_with(name, "mlp.fc1.weight")) {
      t = gaussian(spec.shape, rng, std::sqrt(2.0 / d));
    } else if (ends_with(name, "mlp.fc2.weight")) {
      t = gaussian(spec.shape, rng, 1.0 / std::sqrt(static_cast<double>(cfg.mlp_hidden_dim)));
    } else {
      t = gaussian(spec.shape, rng, 1.0 / std::sqrt(d));
    }
    store[name] = std::move(t);
  }
}

void init_head(ParameterStore& store, const BackboneConfig& cfg, HeadKind kind, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, kind == HeadKind::Linear ? "head.linear" : "head.mlp3");
  for (const auto& spec : head_layout(cfg, kind)) {
    if (ends_with(spec.name, ".bias")) {
      store[spec.name] = Tensor(spec.shape, 0.0);
    } else if (spec.name == "head.weight" || spec.name == "head.fc3.weight") {
      // Output layer: small weights keep initial logits unsaturated.
      store[spec.name] = gaussian(spec.shape, rng, kHeadOutputStd);
    } else {
      store[spec.name] = gaussian(spec.shape, rng, 1.0 / std::sqrt(static_cast<double>(spec.shape[1])));
    }
  }
}

Tensor extract_patches(const Tensor& image, const BackboneConfig& cfg) {
  const Shape expected = {static_cast<std::size_t>(cfg.channels), static_cast<std::size_t>(cfg.image_side),
                          static_cast<std::size_t>(cfg.image_side)};
  if (image.shape() != expected) {
    throw IngestionError("image of shape " + image.shape_string() + " does not match configured " +
                         shape_string(expected));
  }
  const int side = cfg.image_side, ps = cfg.patch_side, per = cfg.patches_per_side();
  const auto pd = static_cast<std::size_t>(cfg.patch_dim());
  const auto np = static_cast<std::size_t>(cfg.num_patches());
  Tensor out = Tensor::matrix(pd, np);
  for (int py = 0; py < per; ++py)
    for (int px = 0; px < per; ++px) {
      const auto col = static_cast<std::size_t>(py * per + px);
      std::size_t row = 0;
      for (int ch = 0; ch < cfg.channels; ++ch)
        for (int y = 0; y < ps; ++y)
          for (int x = 0; x < ps; ++x) {
            const auto idx = (static_cast<std::size_t>(ch) * side + py * ps + y) * side + px * ps + x;
            out(row++, col) = image[idx];
          }
    }
  return out;
}

LayerWeights Binder::layer(int index, const BackboneConfig& cfg) const {
  const auto p = layer_prefix(index);
  LayerWeights w;
  w.wq = (*this)(p + "attn.wq");
  w.wk = (*this)(p + "attn.wk");
  w.wv = (*this)(p + "attn.wv");
  if (cfg.output_projection) w.wo = (*this)(p + "attn.wo");
  w.fc1_weight = (*this)(p + "mlp.fc1.weight");
  w.fc1_bias = (*this)(p + "mlp.fc1.bias");
  w.fc2_weight = (*this)(p + "mlp.fc2.weight");
  w.fc2_bias = (*this)(p + "mlp.fc2.bias");
  if (cfg.layer_norm) {
    w.norm1_weight = (*this)(p + "norm1.weight");
    w.norm1_bias = (*this)(p + "norm1.bias");
    w.norm2_weight = (*this)(p + "norm2.weight");
    w.norm2_bias = (*this)(p + "norm2.bias");
  }
  return w;
}

EmbeddingWeights Binder::embedding() const {
  return {(*this)("embed.proj.weight"), (*this)("embed.proj.bias"), (*this)("embed.cls"), (*this)("embed.pos")};
}

Var patchify(Graph& graph, const Tensor& image, const BackboneConfig& cfg, const EmbeddingWeights& w) {
  Var patches = graph.constant(extract_patches(image, cfg));
  Var tokens = add_column_broadcast(matmul(w.proj_weight, patches), w.proj_bias);
  return add(concat_cols(w.cls, tokens), w.pos);
}

Projections project_qkv(Var x, const LayerWeights& w, const BackboneConfig& cfg) {
  const double k_scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
  return {matmul(w.wq, x), scale(matmul(w.wk, x), k_scale), matmul(w.wv, x)};
}

Var attention(Var x, const LayerWeights& w, const BackboneConfig& cfg, const AttentionProbs& probs) {
  const auto [q, k, v] = project_qkv(x, w, cfg);
  const auto hd = static_cast<std::size_t>(cfg.head_dim());
  std::optional<Var> out;
  for (int h = 0; h < cfg.num_heads; ++h) {
    const std::size_t b = static_cast<std::size_t>(h) * hd;
    Var qh = slice_rows(q, b, b + hd);
    Var kh = slice_rows(k, b, b + hd);
    Var vh = slice_rows(v, b, b + hd);
    Var scores = matmul(transpose(kh), qh);
    Var a = probs ? probs(scores, h) : softmax_columns(scores);
    Var head = matmul(vh, a);
    out = out ? concat_rows(*out, head) : head;
  }
  if (w.wo) return matmul(*w.wo, *out);
  return *out;
}

Var mlp_block(Var y, const LayerWeights& w, const BackboneConfig& cfg) {
  Var in = cfg.layer_norm ? layer_norm_columns(y, *w.norm2_weight, *w.norm2_bias) : y;
  Var hidden = relu(add_column_broadcast(matmul(w.fc1_weight, in), w.fc1_bias));
  return add(add_column_broadcast(matmul(w.fc2_weight, hidden), w.fc2_bias), y);
}

Var transformer_layer(Var x, const LayerWeights& w, const BackboneConfig& cfg, const AttentionProbs& probs) {
  Var in = cfg.layer_norm ? layer_norm_columns(x, *w.norm1_weight, *w.norm1_bias) : x;
  Var y = add(attention(in, w, cfg, probs), x);
  return mlp_block(y, w, cfg);
}

HeadWeights bind_head(const Binder& bind, HeadKind kind) {
  HeadWeights head;
  head.kind = kind;
  if (kind == HeadKind::Linear) {
    head.layers.emplace_back(bind("head.weight"), bind("head.bias"));
  } else {
    for (int i = 1; i <= 3; ++i) {
      const auto p = "head.fc" + std::to_string(i);
      head.layers.emplace_back(bind(p + ".weight"), bind(p + ".bias"));
    }
  }
  return head;
}

Var apply_head(Var cls, const HeadWeights& head) {
  Var h = cls;
  for (std::size_t i = 0; i < head.layers.size(); ++i) {
    h = add_column_broadcast(matmul(head.layers[i].first, h), head.layers[i].second);
    if (i + 1 < head.layers.size()) h = relu(h);
  }
  return h;
}

BackboneOutput forward_backbone(Var x0, const std::vector<LayerWeights>& layers, const HeadWeights& head,
                                const BackboneConfig& cfg, const LayerHooks& hooks) {
  BackboneOutput out;
  Var x = x0;
  const std::size_t col = hooks.readout_column;
  for (int l = 0; l < static_cast<int>(layers.size()); ++l) {
    if (hooks.before_layer) x = hooks.before_layer(x, l);
    const LayerWeights w = hooks.weights ? hooks.weights(layers[static_cast<std::size_t>(l)], l)
                                         : layers[static_cast<std::size_t>(l)];
    AttentionProbs probs = hooks.attention ? hooks.attention(l) : AttentionProbs{};
    x = transformer_layer(x, w, cfg, probs);
    if (hooks.after_layer) x = hooks.after_layer(x, l);
    out.layer_out.push_back(x);
    out.layer_cls.push_back(slice_cols(x, col, col + 1));
  }
  out.cls = layers.empty() ? slice_cols(x, 0, 1) : out.layer_cls.back();
  out.logits = apply_head(out.cls, head);
  return out;
}

}  // namespace eptlab
