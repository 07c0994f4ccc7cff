#pragma once

// Reader for the TOML subset used by config files: [table] headers,
// key = value pairs, strings, integers, floats, booleans, single-line arrays
// of those, and # comments.

#include <charconv>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "rose/error.hpp"

namespace rose::toml {

using Scalar = std::variant<bool, std::int64_t, double, std::string>;

struct Value {
  std::variant<Scalar, std::vector<Scalar>> data;
  std::size_t line = 0;
};

struct Table {
  std::map<std::string, Value> values;
  std::size_t line = 0;
};

namespace detail {

inline std::string_view strip(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

// Drops a trailing comment, respecting quotes.
inline std::string_view uncomment(std::string_view s) {
  char quote = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    char c = s[i];
    if (quote) {
      if (c == '\\' && quote == '"') {
        ++i;
      } else if (c == quote) {
        quote = 0;
      }
    } else if (c == '"' || c == '\'') {
      quote = c;
    } else if (c == '#') {
      return s.substr(0, i);
    }
  }
  return s;
}

inline bool bare_key(std::string_view k) {
  if (k.empty()) return false;
  for (char c : k) {
    bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
              c == '_' || c == '-' || c == '.';
    if (!ok) return false;
  }
  return true;
}

inline Scalar parse_scalar(std::string_view s, std::size_t line) {
  s = strip(s);
  if (s.empty()) throw ParseError("missing value", line);
  if (s.front() == '"' || s.front() == '\'') {
    char q = s.front();
    if (s.size() < 2 || s.back() != q) throw ParseError("unterminated string", line);
    std::string out;
    for (std::size_t i = 1; i + 1 < s.size(); ++i) {
      char c = s[i];
      if (q == '"' && c == '\\' && i + 2 < s.size()) {
        char e = s[++i];
        switch (e) {
          case 'n': out += '\n'; break;
          case 't': out += '\t'; break;
          case '\\': out += '\\'; break;
          case '"': out += '"'; break;
          default: throw ParseError(std::string("unsupported escape \\") + e, line);
        }
      } else {
        out += c;
      }
    }
    return out;
  }
  if (s == "true") return true;
  if (s == "false") return false;
  std::string digits;
  for (char c : s) {
    if (c != '_') digits += c;
  }
  bool is_float = digits.find_first_of(".eE") != std::string::npos || digits == "inf" ||
                  digits == "+inf" || digits == "-inf" || digits == "nan";
  const char* b = digits.data();
  const char* e = b + digits.size();
  if (b != e && *b == '+') ++b;
  if (!is_float) {
    std::int64_t v = 0;
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec == std::errc() && p == e) return v;
  } else {
    double v = 0;
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec == std::errc() && p == e) return v;
  }
  throw ParseError("cannot parse value '" + std::string(s) + "'", line);
}

inline std::vector<Scalar> parse_array(std::string_view s, std::size_t line) {
  s = strip(s);
  std::string_view body = s.substr(1, s.size() - 2);
  std::vector<Scalar> out;
  std::size_t start = 0;
  char quote = 0;
  for (std::size_t i = 0; i <= body.size(); ++i) {
    char c = i < body.size() ? body[i] : ',';
    if (quote) {
      if (c == quote) quote = 0;
      continue;
    }
    if (c == '"' || c == '\'') {
      quote = c;
    } else if (c == '[') {
      throw ParseError("nested arrays are not supported", line);
    } else if (c == ',') {
      std::string_view item = strip(body.substr(start, i - start));
      if (item.empty()) {
        // Only the slot after a trailing comma (or an empty array) may be blank.
        if (i < body.size()) throw ParseError("empty array element", line);
      } else {
        out.push_back(parse_scalar(item, line));
      }
      start = i + 1;
    }
  }
  return out;
}

}  // namespace detail

class Document {
 public:
  static Document parse(std::string_view text) {
    Document doc;
    std::string current;
    doc.tables_[current].line = 0;
    std::size_t line_no = 0, pos = 0;
    while (pos < text.size()) {
      std::size_t nl = text.find('\n', pos);
      std::string_view raw = text.substr(pos, nl == text.npos ? text.npos : nl - pos);
      pos = nl == text.npos ? text.size() : nl + 1;
      ++line_no;
      std::string_view line = detail::strip(detail::uncomment(raw));
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']' || line.size() < 3) throw ParseError("malformed table header", line_no);
        std::string name(detail::strip(line.substr(1, line.size() - 2)));
        if (!detail::bare_key(name)) throw ParseError("invalid table name '" + name + "'", line_no);
        if (doc.tables_.count(name)) throw ParseError("table [" + name + "] defined twice", line_no);
        doc.tables_[name].line = line_no;
        current = name;
        continue;
      }
      std::size_t eq = line.find('=');
      if (eq == line.npos) throw ParseError("expected key = value", line_no);
      std::string key(detail::strip(line.substr(0, eq)));
      if (!detail::bare_key(key)) throw ParseError("invalid key '" + key + "'", line_no);
      std::string_view rhs = detail::strip(line.substr(eq + 1));
      Value v;
      v.line = line_no;
      if (!rhs.empty() && rhs.front() == '[') {
        if (rhs.back() != ']') throw ParseError("arrays must close on the same line", line_no);
        v.data = detail::parse_array(rhs, line_no);
      } else {
        v.data = detail::parse_scalar(rhs, line_no);
      }
      auto& tbl = doc.tables_[current];
      if (tbl.values.count(key)) throw ParseError("duplicate key '" + key + "'", line_no);
      tbl.values.emplace(key, std::move(v));
    }
    return doc;
  }

  bool has_table(const std::string& name) const { return tables_.count(name) > 0; }

  const Table* table(const std::string& name) const {
    auto it = tables_.find(name);
    return it == tables_.end() ? nullptr : &it->second;
  }

  // Rejects tables and keys outside the given schema.
  void check_schema(const std::map<std::string, std::set<std::string>>& allowed) const {
    for (const auto& [name, tbl] : tables_) {
      auto it = allowed.find(name);
      if (it == allowed.end()) {
        throw ConfigError("unknown config table [" + name + "] (line " + std::to_string(tbl.line) + ")");
      }
      for (const auto& [key, v] : tbl.values) {
        if (!it->second.count(key)) {
          std::string where = name.empty() ? key : name + "." + key;
          throw ConfigError("unknown config key '" + where + "' (line " + std::to_string(v.line) + ")");
        }
      }
    }
  }

 private:
  std::map<std::string, Table> tables_;
};

// Typed lookups; a present key of the wrong type is a configuration error.
namespace detail {
inline const Value* find(const Document& d, const std::string& table, const std::string& key) {
  const Table* t = d.table(table);
  if (!t) return nullptr;
  auto it = t->values.find(key);
  return it == t->values.end() ? nullptr : &it->second;
}

[[noreturn]] inline void type_error(const std::string& table, const std::string& key,
                                    const char* want, std::size_t line) {
  std::string where = table.empty() ? key : table + "." + key;
  throw ConfigError("config key '" + where + "' must be " + want + " (line " +
                    std::to_string(line) + ")");
}

inline bool scalar_as_double(const Scalar& s, double& out) {
  if (auto* i = std::get_if<std::int64_t>(&s)) {
    out = static_cast<double>(*i);
    return true;
  }
  if (auto* f = std::get_if<double>(&s)) {
    out = *f;
    return true;
  }
  return false;
}
}  // namespace detail

template <class T>
bool get(const Document& d, const std::string& table, const std::string& key, T& out) {
  const Value* v = detail::find(d, table, key);
  if (!v) return false;
  const Scalar* s = std::get_if<Scalar>(&v->data);
  if constexpr (std::is_same_v<T, bool>) {
    if (!s || !std::holds_alternative<bool>(*s)) detail::type_error(table, key, "a boolean", v->line);
    out = std::get<bool>(*s);
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!s || !std::holds_alternative<std::string>(*s)) {
      detail::type_error(table, key, "a string", v->line);
    }
    out = std::get<std::string>(*s);
  } else if constexpr (std::is_floating_point_v<T>) {
    double x = 0;
    if (!s || !detail::scalar_as_double(*s, x)) detail::type_error(table, key, "a number", v->line);
    out = x;
  } else if constexpr (std::is_integral_v<T>) {
    if (!s || !std::holds_alternative<std::int64_t>(*s)) {
      detail::type_error(table, key, "an integer", v->line);
    }
    std::int64_t x = std::get<std::int64_t>(*s);
    if (std::is_unsigned_v<T> && x < 0) detail::type_error(table, key, "non-negative", v->line);
    out = static_cast<T>(x);
  } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
    const auto* a = std::get_if<std::vector<Scalar>>(&v->data);
    if (!a) detail::type_error(table, key, "an array of strings", v->line);
    out.clear();
    for (const auto& e : *a) {
      if (!std::holds_alternative<std::string>(e)) {
        detail::type_error(table, key, "an array of strings", v->line);
      }
      out.push_back(std::get<std::string>(e));
    }
  } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
    const auto* a = std::get_if<std::vector<Scalar>>(&v->data);
    if (!a) detail::type_error(table, key, "an array of integers", v->line);
    out.clear();
    for (const auto& e : *a) {
      const auto* i = std::get_if<std::int64_t>(&e);
      if (!i || *i < 0) detail::type_error(table, key, "an array of non-negative integers", v->line);
      out.push_back(static_cast<std::size_t>(*i));
    }
  } else {
    static_assert(sizeof(T) == 0, "unsupported config type");
  }
  return true;
}

}  // namespace rose::toml
