// Deterministic report emission: CSV/TSV tables with fixed columns and
// locale-independent formatting, so a rerun with the same seed produces
// byte-identical files.
#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vaptr {

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// ------------------------------------------------------------- formatting

// Fixed-precision decimal that does not depend on the global locale or on
// iostream state. Used for every floating-point cell.
inline std::string format_fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return std::string(buf);
}

inline std::string format_percent(double fraction, int digits = 1) {
  return format_fixed(fraction * 100.0, digits);
}

// --------------------------------------------------------------- tables

// A rectangular table with a fixed header row. Cells are plain strings;
// numeric cells should be pre-formatted with format_fixed / std::to_string.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  void add_row(std::vector<std::string> cells) {
    if (cells.size() != columns.size()) {
      throw IoError("row width " + std::to_string(cells.size()) +
                    " does not match header width " +
                    std::to_string(columns.size()));
    }
    rows.push_back(std::move(cells));
  }
};

namespace iodetail {

inline std::string csv_escape(const std::string& cell) {
  const bool needs_quotes =
      cell.find_first_of(",\"\n\r") != std::string::npos;
  if (!needs_quotes) return cell;
  std::string out = "\"";
  for (char c : cell) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += '"';
  return out;
}

inline std::string tsv_escape(const std::string& cell) {
  std::string out;
  out.reserve(cell.size());
  for (char c : cell) {
    if (c == '\t' || c == '\n' || c == '\r') out += ' ';
    else out += c;
  }
  return out;
}

}  // namespace iodetail

inline std::string to_csv(const Table& t) {
  std::string out;
  for (std::size_t i = 0; i < t.columns.size(); ++i) {
    if (i) out += ',';
    out += iodetail::csv_escape(t.columns[i]);
  }
  out += '\n';
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ',';
      out += iodetail::csv_escape(row[i]);
    }
    out += '\n';
  }
  return out;
}

// Gnuplot-friendly: tab separators, `#` comment header.
inline std::string to_tsv(const Table& t) {
  std::string out = "#";
  for (std::size_t i = 0; i < t.columns.size(); ++i) {
    if (i) out += '\t';
    out += iodetail::tsv_escape(t.columns[i]);
  }
  out += '\n';
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += '\t';
      out += iodetail::tsv_escape(row[i]);
    }
    out += '\n';
  }
  return out;
}

// ----------------------------------------------------------------- files

inline void write_text_file(const std::filesystem::path& path,
                            const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace vaptr
