#pragma once

// Minimal CSV reading/writing and atomic file output.

#include "mnarci/core.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace mnarci::io {

/// Round-trippable decimal form of a double ("nan"/"inf" for non-finite).
inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> split(const std::string& line, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

inline bool is_missing(const std::string& s) { return s.empty() || s == "NA" || s == "nan" || s == "NaN"; }

inline double parse_double(const std::string& s) {
  if (is_missing(s)) return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw Error(Errc::MalformedCsv, "not a number: '" + s + "'");
  }
  if (used != s.size()) throw Error(Errc::MalformedCsv, "trailing characters in '" + s + "'");
  return v;
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t j = 0; j < header.size(); ++j)
      if (header[j] == name) return j;
    throw Error(Errc::MalformedCsv, "missing column '" + name + "'");
  }
  bool has_column(const std::string& name) const {
    return std::find(header.begin(), header.end(), name) != header.end();
  }
};

inline Table parse_csv(std::istream& in) {
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::MalformedCsv, "empty input");
  t.header = split(line);
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    auto row = split(line);
    if (row.size() != t.header.size())
      throw Error(Errc::MalformedCsv, "row has " + std::to_string(row.size()) + " fields, header has " +
                                          std::to_string(t.header.size()));
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline Table read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::Io, "cannot open " + path.string());
  return parse_csv(in);
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partially written file.
inline void write_atomic(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::Io, "cannot open " + tmp.string());
    out << contents;
    if (!out) throw Error(Errc::Io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string join(const std::vector<std::string>& fields, char sep = ',') {
  std::string out;
  for (std::size_t j = 0; j < fields.size(); ++j) {
    if (j) out.push_back(sep);
    out += fields[j];
  }
  return out;
}

}  // namespace mnarci::io
