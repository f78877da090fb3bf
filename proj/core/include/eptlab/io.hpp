#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace eptlab {

using Json = nlohmann::json;

/// Deterministic JSON text: keys sorted, two-space indent, floating-point
/// values printed with 17 significant digits, trailing newline.
std::string canonical_json(const Json& value);

/// %.17g formatting used across all emitted files.
std::string format_double(double value);

/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

std::string read_file(const std::filesystem::path& path);

}  // namespace eptlab
