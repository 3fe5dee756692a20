#pragma once

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>

#include "condlora/matrix.hpp"

namespace condlora {

// Text block format:
//   MATRIX <name> <rows> <cols>
//   <rows lines of cols values, %.17g, space separated>

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& tok) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str() || *end != '\0' || errno == ERANGE)
    throw ParseError("invalid number '" + tok + "'");
  return v;
}

inline void write_matrix(std::ostream& os, const std::string& name, const Matrix& m) {
  if (name.empty() || name.find_first_of(" \t\n") != std::string::npos)
    throw ParseError("matrix name must be a non-empty token: '" + name + "'");
  os << "MATRIX " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j) os << ' ';
      os << format_double(m(i, j));
    }
    os << '\n';
  }
}

/// Reads the body of a block whose header has already been consumed.
inline Matrix read_matrix_body(std::istream& is, const std::string& name, std::size_t rows,
                               std::size_t cols) {
  Matrix m(rows, cols);
  std::string tok;
  for (std::size_t k = 0; k < rows * cols; ++k) {
    if (!(is >> tok)) throw ParseError("matrix '" + name + "': truncated data");
    m.data()[k] = parse_double(tok);
  }
  if (!m.all_finite()) throw ParseError("matrix '" + name + "': non-finite entry");
  return m;
}

/// Parses `MATRIX <name> <rows> <cols>`; returns false if the line is not a header.
inline bool parse_matrix_header(const std::string& line, std::string& name, std::size_t& rows,
                                std::size_t& cols) {
  std::istringstream ls(line);
  std::string tag;
  long long r = 0;
  long long c = 0;
  if (!(ls >> tag) || tag != "MATRIX") return false;
  if (!(ls >> name >> r >> c) || r <= 0 || c <= 0)
    throw ParseError("bad matrix header: '" + line + "'");
  rows = static_cast<std::size_t>(r);
  cols = static_cast<std::size_t>(c);
  return true;
}

/// Named blocks in file order plus any non-matrix header lines (e.g. CONFIG/SPEC).
struct MatrixBundle {
  std::map<std::string, std::string> headers;  // tag -> remainder of line
  std::map<std::string, Matrix> blocks;
  std::vector<std::string> order;

  const Matrix& at(const std::string& name) const {
    auto it = blocks.find(name);
    if (it == blocks.end()) throw ParseError("missing matrix block '" + name + "'");
    return it->second;
  }
  void put(const std::string& name, Matrix m) {
    if (!blocks.count(name)) order.push_back(name);
    blocks[name] = std::move(m);
  }
};

inline MatrixBundle read_bundle(std::istream& is) {
  MatrixBundle b;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    if (parse_matrix_header(line, name, rows, cols)) {
      if (b.blocks.count(name)) throw ParseError("duplicate matrix block '" + name + "'");
      b.put(name, read_matrix_body(is, name, rows, cols));
      std::getline(is, line);  // rest of the final data line
      continue;
    }
    const auto sp = line.find(' ');
    const std::string tag = line.substr(0, sp);
    if (tag.empty() || tag.find_first_not_of("ABCDEFGHIJKLMNOPQRSTUVWXYZ_") != std::string::npos)
      throw ParseError("unexpected line: '" + line + "'");
    b.headers[tag] = sp == std::string::npos ? "" : line.substr(sp + 1);
  }
  return b;
}

inline void write_bundle(std::ostream& os, const MatrixBundle& b) {
  for (const auto& [tag, rest] : b.headers) os << tag << ' ' << rest << '\n';
  for (const auto& name : b.order) write_matrix(os, name, b.blocks.at(name));
}

} // namespace condlora
