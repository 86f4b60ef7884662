#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hibrto/common.hpp"

namespace hibrto::io {

/// Raised for malformed input files; `line` is 1-based, 0 when not line-specific.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& what)
      : std::runtime_error(file + (line ? ":" + std::to_string(line) : std::string()) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline std::string file_hash(const std::filesystem::path& path) { return hex64(fnv1a(read_file(path))); }

/// Shortest round-trip decimal text; "nan", "inf", "-inf" for non-finite values.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<double>> columns;

  std::size_t rows() const { return columns.empty() ? 0 : columns.front().size(); }

  Index find(const std::string& name) const {
    for (std::size_t k = 0; k < header.size(); ++k) {
      if (header[k] == name) return static_cast<Index>(k);
    }
    return -1;
  }

  const std::vector<double>& column(const std::string& name) const {
    const Index k = find(name);
    if (k < 0) throw std::out_of_range("table has no column '" + name + "'");
    return columns[static_cast<std::size_t>(k)];
  }

  void add(std::string name, std::vector<double> values) {
    if (!columns.empty() && values.size() != rows()) throw std::invalid_argument("table column length mismatch: " + name);
    header.push_back(std::move(name));
    columns.push_back(std::move(values));
  }
};

inline std::string to_csv(const Table& t) {
  std::string out;
  for (std::size_t k = 0; k < t.header.size(); ++k) out += (k ? "," : "") + t.header[k];
  out += '\n';
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t k = 0; k < t.columns.size(); ++k) {
      if (k) out += ',';
      out += format_double(t.columns[k][r]);
    }
    out += '\n';
  }
  return out;
}

inline double parse_double(const std::string& s, const std::string& file, std::size_t line) {
  if (s == "nan") return kNaN;
  if (s == "inf") return kInf;
  if (s == "-inf") return -kInf;
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw ParseError(file, line, "not a number: '" + s + "'");
  return v;
}

/// Comma-separated numeric table with one header row.
inline Table parse_csv(const std::string& text, const std::string& file = "<csv>") {
  Table t;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  const auto split = [](const std::string& s) {
    std::vector<std::string> f;
    std::string cur;
    for (char c : s) {
      if (c == ',') {
        f.push_back(cur);
        cur.clear();
      } else if (c != '\r') {
        cur += c;
      }
    }
    f.push_back(cur);
    return f;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto fields = split(line);
    if (t.header.empty()) {
      t.header = fields;
      t.columns.assign(fields.size(), {});
      continue;
    }
    if (fields.size() != t.header.size()) {
      throw ParseError(file, lineno,
                       "expected " + std::to_string(t.header.size()) + " fields, found " + std::to_string(fields.size()));
    }
    for (std::size_t k = 0; k < fields.size(); ++k) t.columns[k].push_back(parse_double(fields[k], file, lineno));
  }
  if (t.header.empty()) throw ParseError(file, 0, "missing header row");
  return t;
}

inline Table read_csv(const std::filesystem::path& path) { return parse_csv(read_file(path), path.string()); }

// u-matrix binary: 8-byte magic "HBRTOUM1", u64 rows, u64 cols (little-endian),
// then rows*cols IEEE-754 doubles, little-endian, row-major.
inline constexpr std::array<char, 8> kUMatrixMagic{'H', 'B', 'R', 'T', 'O', 'U', 'M', '1'};

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  static_assert(sizeof(T) == 8);
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int b = 0; b < 8; ++b) out += static_cast<char>((bits >> (8 * b)) & 0xff);
}

inline std::uint64_t get_le(const std::string& in, std::size_t pos) {
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + b])) << (8 * b);
  return bits;
}

}  // namespace detail

inline std::string encode_u_matrix(const std::vector<Vector>& rows) {
  const std::uint64_t cols = rows.empty() ? 0 : static_cast<std::uint64_t>(rows.front().size());
  std::string out(kUMatrixMagic.begin(), kUMatrixMagic.end());
  detail::put_le(out, static_cast<std::uint64_t>(rows.size()));
  detail::put_le(out, cols);
  for (const auto& r : rows) {
    if (static_cast<std::uint64_t>(r.size()) != cols) throw std::invalid_argument("u-matrix rows differ in length");
    for (Index i = 0; i < r.size(); ++i) detail::put_le(out, r[i]);
  }
  return out;
}

inline Matrix decode_u_matrix(const std::string& bytes, const std::string& file = "<u-matrix>") {
  if (bytes.size() < 24 || !std::equal(kUMatrixMagic.begin(), kUMatrixMagic.end(), bytes.begin())) {
    throw ParseError(file, 0, "not a u-matrix file (bad magic)");
  }
  const std::uint64_t rows = detail::get_le(bytes, 8), cols = detail::get_le(bytes, 16);
  if (cols != 0 && rows > (bytes.size() - 24) / 8 / cols) throw ParseError(file, 0, "truncated u-matrix payload");
  if (bytes.size() != 24 + 8 * rows * cols) throw ParseError(file, 0, "u-matrix size does not match its header");
  Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
  std::size_t pos = 24;
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c, pos += 8) m(r, c) = std::bit_cast<double>(detail::get_le(bytes, pos));
  }
  return m;
}

}  // namespace hibrto::io
