#pragma once

// Minimal RFC 4180 reader/writer: header row, comma separator, double-quoted fields.

#include <charconv>
#include <cstddef>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ptrick/error.hpp"

namespace ptrick::csv {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::optional<std::size_t> column(std::string_view name) const {
    for (std::size_t k = 0; k < header.size(); ++k) {
      if (header[k] == name) return k;
    }
    return std::nullopt;
  }

  std::size_t require_column(std::string_view name) const {
    auto k = column(name);
    if (!k) throw SchemaError("missing column '" + std::string(name) + "'");
    return *k;
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace detail

inline Table parse(std::string_view text) {
  Table t;
  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false;
  bool quoted = false;
  std::size_t line = 1;

  auto end_field = [&] {
    record.push_back(quoted ? field : detail::trim(field));
    field.clear();
    quoted = false;
  };
  auto end_record = [&] {
    end_field();
    bool blank = record.size() == 1 && record[0].empty();
    if (!blank) {
      if (t.header.empty()) {
        t.header = std::move(record);
      } else {
        if (record.size() != t.header.size()) {
          throw ValidationError("line " + std::to_string(line) + ": expected " +
                                std::to_string(t.header.size()) + " fields, found " +
                                std::to_string(record.size()));
        }
        t.rows.push_back(std::move(record));
      }
    }
    record.clear();
  };

  // Strip a UTF-8 byte-order mark.
  if (text.size() >= 3 && text.substr(0, 3) == "\xEF\xBB\xBF") text.remove_prefix(3);

  for (std::size_t k = 0; k < text.size(); ++k) {
    const char c = text[k];
    if (in_quotes) {
      if (c == '"') {
        if (k + 1 < text.size() && text[k + 1] == '"') {
          field.push_back('"');
          ++k;
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
    } else if (c == '"') {
      in_quotes = true;
      quoted = true;
    } else if (c == ',') {
      end_field();
    } else if (c == '\n') {
      end_record();
      ++line;
    } else {
      field.push_back(c);
    }
  }
  if (in_quotes) throw ValidationError("unterminated quoted field");
  if (!field.empty() || !record.empty()) end_record();
  if (t.header.empty()) throw ValidationError("empty CSV input (no header row)");
  return t;
}

inline Table read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SchemaError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

inline std::string quote(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

inline std::string format(const Table& t) {
  std::string out;
  auto write_row = [&](const std::vector<std::string>& row) {
    for (std::size_t k = 0; k < row.size(); ++k) {
      if (k) out.push_back(',');
      out += quote(row[k]);
    }
    out.push_back('\n');
  };
  write_row(t.header);
  for (const auto& r : t.rows) write_row(r);
  return out;
}

inline std::optional<double> to_number(std::string_view s) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const char* first = s.data();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

// Shortest representation that round-trips.
inline std::string number_to_string(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace ptrick::csv
