#pragma once

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <cstdio>
#include <istream>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "prefnet/tensor.hpp"

// Minimal CSV helpers for the numeric long-format files this project
// exchanges. Diagnostics carry 1-based line numbers.
namespace prefnet::csv {

/// Shortest representation that parses back to the identical double.
inline std::string format_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) return std::to_string(v);
  return std::string(buf, end);
}

inline std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cell);
      cell.clear();
    } else if (c != '\r') {
      cell.push_back(c);
    }
  }
  cells.push_back(cell);
  return cells;
}

[[noreturn]] inline void fail(const std::string& what, std::size_t line, const std::string& msg) {
  throw Error(what + " CSV line " + std::to_string(line) + ": " + msg);
}

inline double parse_double(const std::string& s, const std::string& what, std::size_t line) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) fail(what, line, "not a number: '" + s + "'");
  return v;
}

inline std::size_t parse_index(const std::string& s, const std::string& what, std::size_t line) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) fail(what, line, "not an index: '" + s + "'");
  return v;
}

/// Row reader that checks the header and column count.
class Reader {
 public:
  Reader(std::istream& in, const std::string& header, std::string what)
      : in_(in), what_(std::move(what)), columns_(split(header).size()) {
    std::string first;
    if (!std::getline(in_, first)) fail(what_, 1, "empty file, expected header '" + header + "'");
    if (!first.empty() && first.back() == '\r') first.pop_back();
    line_ = 1;
    if (first != header) fail(what_, 1, "expected header '" + header + "', got '" + first + "'");
  }

  bool next(std::vector<std::string>& cells) {
    std::string raw;
    while (std::getline(in_, raw)) {
      ++line_;
      if (raw.empty() || raw == "\r") continue;
      cells = split(raw);
      if (cells.size() != columns_) {
        fail(what_, line_, "expected " + std::to_string(columns_) + " columns, got " + std::to_string(cells.size()));
      }
      return true;
    }
    return false;
  }

  std::size_t line() const { return line_; }
  const std::string& what() const { return what_; }

 private:
  std::istream& in_;
  std::string what_;
  std::size_t columns_;
  std::size_t line_ = 0;
};

/// Dense [samples, agents, items] values read from a long-format file with
/// columns (sample, agent, item, value).
struct Grid {
  std::size_t samples = 0, agents = 0, items = 0;
  std::vector<double> values;
};

inline Grid read_grid(std::istream& in, const std::string& header, const std::string& what) {
  Reader reader(in, header, what);
  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, double> cells;
  std::vector<std::string> row;
  Grid g;
  while (reader.next(row)) {
    auto s = parse_index(row[0], what, reader.line());
    auto i = parse_index(row[1], what, reader.line());
    auto j = parse_index(row[2], what, reader.line());
    double v = parse_double(row[3], what, reader.line());
    if (!cells.emplace(std::make_tuple(s, i, j), v).second) {
      fail(what, reader.line(), "duplicate entry for (" + row[0] + "," + row[1] + "," + row[2] + ")");
    }
    g.samples = std::max(g.samples, s + 1);
    g.agents = std::max(g.agents, i + 1);
    g.items = std::max(g.items, j + 1);
  }
  if (cells.empty()) fail(what, reader.line(), "no data rows");
  if (cells.size() != g.samples * g.agents * g.items) {
    throw Error(what + " CSV: incomplete grid, expected " + std::to_string(g.samples * g.agents * g.items) +
                " entries for " + std::to_string(g.samples) + " samples x " + std::to_string(g.agents) +
                " agents x " + std::to_string(g.items) + " items, got " + std::to_string(cells.size()));
  }
  g.values.reserve(cells.size());
  for (const auto& [key, v] : cells) g.values.push_back(v);  // map order is row-major
  return g;
}

}  // namespace prefnet::csv
