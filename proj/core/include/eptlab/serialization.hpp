#pragma once

#include <filesystem>
#include <string>

#include "eptlab/io.hpp"
#include "eptlab/peft.hpp"
#include "eptlab/tensor.hpp"
#include "eptlab/vit.hpp"

namespace eptlab {

/// Typed access to one JSON object with path-qualified ConfigErrors.
class FieldReader {
 public:
  FieldReader(const Json& object, std::string path);

  bool has(const std::string& key) const;
  const Json& raw(const std::string& key) const;
  int get_int(const std::string& key) const;
  std::uint64_t get_uint(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::string get_string(const std::string& key) const;
  std::string path(const std::string& key) const { return path_ + "." + key; }

  /// Throws on any key outside `allowed`.
  void reject_unknown(std::initializer_list<const char*> allowed) const;

 private:
  const Json& object_;
  std::string path_;
};

/// JSON forms of the configuration types. Parsing reports ConfigError naming
/// the offending field path (e.g. "method.prompt_length"); unknown keys are
/// rejected. Absent fields keep their defaults.
Json to_json(const BackboneConfig& cfg);
BackboneConfig backbone_from_json(const Json& j, const std::string& path = "backbone");

Json to_json(const PeftMethod& method);
PeftMethod method_from_json(const Json& j, const std::string& path = "method");

struct Checkpoint {
  Json metadata;
  ParameterStore params;
};

/// Weight file: one line of JSON header, '\n', then little-endian fp64 values.
/// The header lists each tensor's name, shape and byte offset into the payload.
void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params, const Json& metadata);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Checkpoint carrying a model's backbone config and method as metadata.
void save_model(const std::filesystem::path& path, const Model& model, Json extra = Json::object());
Model load_model(const std::filesystem::path& path);

}  // namespace eptlab
