#pragma once

#include <cctype>
#include <charconv>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ectrial/errors.hpp"

namespace ectrial::toml {

// Tags tables opened by a [header] so a second header for the same table is caught.
inline const std::string kDefinedMarker = std::string(1, '\x01') + "defined";

/// Reads the TOML subset used by the configuration files into JSON.
///
/// Supported: comments, bare/quoted/dotted keys, [tables], [[arrays of
/// tables]], basic and literal strings (single line), integers, floats,
/// booleans, arrays (may span lines, trailing comma allowed) and inline
/// tables. Not supported: multi-line strings, dates, hex/octal/binary.
class Reader {
 public:
  explicit Reader(std::string_view text) : s_(text) {}

  nlohmann::json parse() {
    nlohmann::json root = nlohmann::json::object();
    nlohmann::json* table = &root;
    while (true) {
      skip_ws_comments_newlines();
      if (eof()) break;
      if (peek() == '[') {
        table = header(root);
      } else {
        key_value(*table);
      }
      end_of_line();
    }
    return root;
  }

 private:
  std::string_view s_;
  std::size_t pos_ = 0;
  std::size_t line_ = 1;

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError("config line " + std::to_string(line_) + ": " + what);
  }

  bool eof() const { return pos_ >= s_.size(); }
  char peek() const { return eof() ? '\0' : s_[pos_]; }
  char get() {
    if (eof()) fail("unexpected end of input");
    const char c = s_[pos_++];
    if (c == '\n') ++line_;
    return c;
  }

  void skip_blank() {
    while (!eof() && (peek() == ' ' || peek() == '\t')) ++pos_;
  }
  void skip_comment() {
    if (peek() == '#')
      while (!eof() && peek() != '\n') ++pos_;
  }
  void skip_ws_comments_newlines() {
    while (!eof()) {
      skip_blank();
      skip_comment();
      if (peek() == '\n' || peek() == '\r')
        get();
      else
        break;
    }
  }
  void end_of_line() {
    skip_blank();
    skip_comment();
    if (peek() == '\r') get();
    if (!eof() && peek() != '\n') fail(std::string("unexpected '") + peek() + "' after value");
  }

  static bool bare_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
  }

  std::string simple_key() {
    skip_blank();
    if (peek() == '"') return basic_string();
    if (peek() == '\'') return literal_string();
    std::string k;
    while (!eof() && bare_char(peek())) k.push_back(get());
    if (k.empty()) fail("expected a key");
    return k;
  }

  std::vector<std::string> dotted_key() {
    std::vector<std::string> parts{simple_key()};
    skip_blank();
    while (peek() == '.') {
      get();
      parts.push_back(simple_key());
      skip_blank();
    }
    return parts;
  }

  nlohmann::json* descend(nlohmann::json* at, const std::string& part) {
    nlohmann::json& child = (*at)[part];
    if (child.is_null()) child = nlohmann::json::object();
    if (child.is_array()) {
      if (child.empty() || !child.back().is_object()) fail("'" + part + "' is not a table");
      return &child.back();
    }
    if (!child.is_object()) fail("'" + part + "' is already a value");
    return &child;
  }

  nlohmann::json* header(nlohmann::json& root) {
    get();
    const bool array = peek() == '[';
    if (array) get();
    const auto parts = dotted_key();
    if (get() != ']' || (array && get() != ']')) fail("malformed table header");
    nlohmann::json* at = &root;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) at = descend(at, parts[i]);
    nlohmann::json& last = (*at)[parts.back()];
    if (array) {
      if (last.is_null()) last = nlohmann::json::array();
      if (!last.is_array()) fail("'" + parts.back() + "' is not an array of tables");
      last.push_back(nlohmann::json::object());
      return &last.back();
    }
    if (last.is_null()) {
      last = nlohmann::json::object();
    } else if (!last.is_object() || last.contains(kDefinedMarker)) {
      fail("table '" + parts.back() + "' defined twice");
    }
    last[kDefinedMarker] = true;
    return &last;
  }

  void key_value(nlohmann::json& table) {
    const auto parts = dotted_key();
    skip_blank();
    if (get() != '=') fail("expected '=' after key");
    skip_blank();
    nlohmann::json* at = &table;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) at = descend(at, parts[i]);
    if (at->contains(parts.back())) fail("duplicate key '" + parts.back() + "'");
    (*at)[parts.back()] = value();
  }

  nlohmann::json value() {
    const char c = peek();
    if (c == '"') return basic_string();
    if (c == '\'') return literal_string();
    if (c == '[') return array();
    if (c == '{') return inline_table();
    if (s_.substr(pos_, 4) == "true") {
      pos_ += 4;
      return true;
    }
    if (s_.substr(pos_, 5) == "false") {
      pos_ += 5;
      return false;
    }
    return number();
  }

  std::string basic_string() {
    get();
    std::string out;
    while (true) {
      if (eof() || peek() == '\n') fail("unterminated string");
      char c = get();
      if (c == '"') return out;
      if (c != '\\') {
        out.push_back(c);
        continue;
      }
      c = get();
      switch (c) {
        case '"': out.push_back('"'); break;
        case '\\': out.push_back('\\'); break;
        case 'n': out.push_back('\n'); break;
        case 't': out.push_back('\t'); break;
        case 'r': out.push_back('\r'); break;
        case 'u': {
          unsigned cp = 0;
          for (int i = 0; i < 4; ++i) {
            const char h = get();
            if (!std::isxdigit(static_cast<unsigned char>(h))) fail("bad \\u escape");
            cp = cp * 16 + static_cast<unsigned>(std::isdigit(static_cast<unsigned char>(h)) ? h - '0' : (std::tolower(h) - 'a' + 10));
          }
          if (cp < 0x80) {
            out.push_back(static_cast<char>(cp));
          } else if (cp < 0x800) {
            out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
          } else {
            out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
            out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
          }
          break;
        }
        default: fail(std::string("unknown escape '\\") + c + "'");
      }
    }
  }

  std::string literal_string() {
    get();
    std::string out;
    while (true) {
      if (eof() || peek() == '\n') fail("unterminated string");
      const char c = get();
      if (c == '\'') return out;
      out.push_back(c);
    }
  }

  nlohmann::json number() {
    const std::size_t begin = pos_;
    while (!eof() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '+' || peek() == '-' ||
                      peek() == '.'))
      ++pos_;
    const std::string_view tok = s_.substr(begin, pos_ - begin);
    if (tok.empty()) fail("expected a value");
    const bool is_float = tok.find_first_of(".eE") != std::string_view::npos;
    const char* first = tok.data() + (tok.front() == '+' ? 1 : 0);
    const char* last = tok.data() + tok.size();
    if (!is_float) {
      long long v = 0;
      auto [p, ec] = std::from_chars(first, last, v);
      if (ec != std::errc() || p != last) fail("invalid value '" + std::string(tok) + "'");
      return v;
    }
    double v = 0.0;
    auto [p, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || p != last) fail("invalid number '" + std::string(tok) + "'");
    return v;
  }

  nlohmann::json array() {
    get();
    nlohmann::json out = nlohmann::json::array();
    while (true) {
      skip_ws_comments_newlines();
      if (peek() == ']') {
        get();
        return out;
      }
      out.push_back(value());
      skip_ws_comments_newlines();
      if (peek() == ',') {
        get();
        continue;
      }
      if (peek() != ']') fail("expected ',' or ']' in array");
    }
  }

  nlohmann::json inline_table() {
    get();
    nlohmann::json out = nlohmann::json::object();
    skip_blank();
    if (peek() == '}') {
      get();
      return out;
    }
    while (true) {
      key_value(out);
      skip_blank();
      const char c = get();
      if (c == '}') return out;
      if (c != ',') fail("expected ',' or '}' in inline table");
      skip_blank();
    }
  }
};

namespace detail {
inline void strip_markers(nlohmann::json& j) {
  if (j.is_object()) {
    j.erase(kDefinedMarker);
    for (auto& [k, v] : j.items()) strip_markers(v);
  } else if (j.is_array()) {
    for (auto& v : j) strip_markers(v);
  }
}
}  // namespace detail

inline nlohmann::json parse(std::string_view text) {
  nlohmann::json j = Reader(text).parse();
  detail::strip_markers(j);
  return j;
}

}  // namespace ectrial::toml
