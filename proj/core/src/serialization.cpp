#include "eptlab/serialization.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "eptlab/errors.hpp"

namespace eptlab {

FieldReader::FieldReader(const Json& object, std::string path) : object_(object), path_(std::move(path)) {
  if (!object_.is_object()) throw ConfigError(path_ + " must be a JSON object");
}

bool FieldReader::has(const std::string& key) const { return object_.contains(key) && !object_.at(key).is_null(); }

const Json& FieldReader::raw(const std::string& key) const {
  if (!object_.contains(key)) throw ConfigError(path(key) + " is required");
  return object_.at(key);
}

int FieldReader::get_int(const std::string& key) const {
  const Json& v = raw(key);
  if (!v.is_number_integer()) throw ConfigError(path(key) + " must be an integer");
  return v.get<int>();
}

std::uint64_t FieldReader::get_uint(const std::string& key) const {
  const Json& v = raw(key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
    throw ConfigError(path(key) + " must be a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

double FieldReader::get_double(const std::string& key) const {
  const Json& v = raw(key);
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "inf" || s == "Infinity") return std::numeric_limits<double>::infinity();
  }
  if (!v.is_number()) throw ConfigError(path(key) + " must be a number");
  return v.get<double>();
}

bool FieldReader::get_bool(const std::string& key) const {
  const Json& v = raw(key);
  if (!v.is_boolean()) throw ConfigError(path(key) + " must be a boolean");
  return v.get<bool>();
}

std::string FieldReader::get_string(const std::string& key) const {
  const Json& v = raw(key);
  if (!v.is_string()) throw ConfigError(path(key) + " must be a string");
  return v.get<std::string>();
}

void FieldReader::reject_unknown(std::initializer_list<const char*> allowed) const {
  for (auto it = object_.begin(); it != object_.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError(path(it.key()) + " is not a recognized field");
  }
}

Json to_json(const BackboneConfig& cfg) {
  return Json{{"image_side", cfg.image_side},         {"patch_side", cfg.patch_side},
              {"channels", cfg.channels},             {"embed_dim", cfg.embed_dim},
              {"num_layers", cfg.num_layers},         {"num_heads", cfg.num_heads},
              {"mlp_hidden_dim", cfg.mlp_hidden_dim}, {"num_classes", cfg.num_classes},
              {"layer_norm", cfg.layer_norm},         {"output_projection", cfg.output_projection}};
}

BackboneConfig backbone_from_json(const Json& j, const std::string& path) {
  FieldReader r(j, path);
  r.reject_unknown({"image_side", "patch_side", "channels", "embed_dim", "num_layers", "num_heads", "mlp_hidden_dim",
                    "num_classes", "layer_norm", "output_projection"});
  BackboneConfig cfg;
  auto opt_int = [&](const char* key, int& dst) {
    if (r.has(key)) dst = r.get_int(key);
  };
  opt_int("image_side", cfg.image_side);
  opt_int("patch_side", cfg.patch_side);
  opt_int("channels", cfg.channels);
  opt_int("embed_dim", cfg.embed_dim);
  opt_int("num_layers", cfg.num_layers);
  opt_int("num_heads", cfg.num_heads);
  opt_int("mlp_hidden_dim", cfg.mlp_hidden_dim);
  opt_int("num_classes", cfg.num_classes);
  if (r.has("layer_norm")) cfg.layer_norm = r.get_bool("layer_norm");
  if (r.has("output_projection")) cfg.output_projection = r.get_bool("output_projection");
  cfg.validate();
  return cfg;
}

Json to_json(const PeftMethod& m) {
  Json j{{"tag", std::string(to_string(m.tag))}};
  if (m.prompt_length) j["prompt_length"] = *m.prompt_length;
  if (m.embedding_way) j["embedding_way"] = std::string(to_string(*m.embedding_way));
  if (m.mode) j["mode"] = std::string(to_string(*m.mode));
  if (m.depth) j["depth"] = *m.depth;
  if (m.order) j["order"] = std::string(to_string(*m.order));
  if (m.prompt_grad) j["prompt_grad"] = *m.prompt_grad;
  if (m.rank) j["rank"] = *m.rank;
  if (m.reduction) j["reduction"] = *m.reduction;
  return j;
}

PeftMethod method_from_json(const Json& j, const std::string& path) {
  FieldReader r(j, path);
  r.reject_unknown({"tag", "prompt_length", "embedding_way", "mode", "depth", "order", "prompt_grad", "rank",
                    "reduction"});
  PeftMethod m;
  auto wrap = [&](const char* key, auto parse) {
    try {
      return parse(r.get_string(key));
    } catch (const ConfigError& e) {
      throw ConfigError(r.path(key) + ": " + e.what());
    }
  };
  m.tag = wrap("tag", parse_method_tag);
  if (r.has("prompt_length")) m.prompt_length = r.get_int("prompt_length");
  if (r.has("embedding_way")) m.embedding_way = wrap("embedding_way", parse_embedding_way);
  if (r.has("mode")) m.mode = wrap("mode", parse_prompt_mode);
  if (r.has("depth")) m.depth = r.get_int("depth");
  if (r.has("order")) m.order = wrap("order", parse_depth_order);
  if (r.has("prompt_grad")) m.prompt_grad = r.get_bool("prompt_grad");
  if (r.has("rank")) m.rank = r.get_int("rank");
  if (r.has("reduction")) m.reduction = r.get_int("reduction");
  return m;
}

namespace {

constexpr const char* kFormat = "eptlab-weights";

std::uint64_t to_little_endian(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t out = 0;
  for (int i = 0; i < 8; ++i) out |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params, const Json& metadata) {
  Json tensors = Json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size() * sizeof(double);
  }
  const Json header{{"format", kFormat}, {"version", 1}, {"metadata", metadata}, {"tensors", tensors}};
  std::string out = header.dump();
  out += '\n';
  const std::size_t payload_start = out.size();
  out.resize(payload_start + offset);
  std::size_t pos = payload_start;
  for (const auto& [name, t] : params) {
    for (double v : t.data()) {
      const std::uint64_t bits = to_little_endian(std::bit_cast<std::uint64_t>(v));
      std::memcpy(out.data() + pos, &bits, sizeof bits);
      pos += sizeof bits;
    }
  }
  write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw LoadError(path.string() + ": missing checkpoint header");
  Json header;
  try {
    header = Json::parse(bytes.substr(0, nl));
  } catch (const Json::exception& e) {
    throw LoadError(path.string() + ": malformed checkpoint header: " + e.what());
  }
  if (header.value("format", "") != kFormat) throw LoadError(path.string() + ": not an eptlab weight file");
  const std::size_t payload = nl + 1;
  Checkpoint ck;
  ck.metadata = header.value("metadata", Json::object());
  for (const auto& entry : header.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const std::size_t count = shape_size(shape);
    if (payload + offset + count * sizeof(double) > bytes.size()) {
      throw LoadError(path.string() + ": tensor '" + name + "' extends past end of file");
    }
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, bytes.data() + payload + offset + i * sizeof bits, sizeof bits);
      values[i] = std::bit_cast<double>(to_little_endian(bits));
    }
    ck.params.emplace(name, Tensor(shape, std::move(values)));
  }
  return ck;
}

void save_model(const std::filesystem::path& path, const Model& model, Json extra) {
  extra["backbone"] = to_json(model.config());
  extra["method"] = to_json(model.method());
  save_checkpoint(path, model.parameters(), extra);
}

Model load_model(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  if (!ck.metadata.contains("backbone") || !ck.metadata.contains("method")) {
    throw LoadError(path.string() + ": checkpoint lacks backbone/method metadata");
  }
  try {
    return Model(backbone_from_json(ck.metadata.at("backbone")), method_from_json(ck.metadata.at("method")),
                 std::move(ck.params));
  } catch (const ConfigError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

}  // namespace eptlab
