#include "eptlab/io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "eptlab/errors.hpp"

namespace eptlab {

std::string format_double(double value) {
  if (!std::isfinite(value)) return "null";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  std::string s(buf);
  // Keep a marker that the value is floating point so it re-parses as a double.
  if (s.find_first_of(".eE") == std::string::npos) s += ".0";
  return s;
}

namespace {

void emit(std::ostringstream& os, const Json& v, int indent) {
  const std::string pad(static_cast<std::size_t>(indent) * 2, ' ');
  const std::string inner(static_cast<std::size_t>(indent + 1) * 2, ' ');
  switch (v.type()) {
    case Json::value_t::object: {
      if (v.empty()) {
        os << "{}";
        return;
      }
      os << "{\n";
      bool first = true;
      for (auto it = v.begin(); it != v.end(); ++it) {  // std::map keeps keys sorted
        if (!first) os << ",\n";
        first = false;
        os << inner << Json(it.key()).dump() << ": ";
        emit(os, it.value(), indent + 1);
      }
      os << "\n" << pad << "}";
      return;
    }
    case Json::value_t::array: {
      if (v.empty()) {
        os << "[]";
        return;
      }
      os << "[\n";
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) os << ",\n";
        os << inner;
        emit(os, v[i], indent + 1);
      }
      os << "\n" << pad << "]";
      return;
    }
    case Json::value_t::number_float:
      os << format_double(v.get<double>());
      return;
    default:
      os << v.dump();
      return;
  }
}

}  // namespace

std::string canonical_json(const Json& value) {
  std::ostringstream os;
  emit(os, value, 0);
  os << "\n";
  return os.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace eptlab
