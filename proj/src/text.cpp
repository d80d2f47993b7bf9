#include "charbot/text.hpp"

#include <algorithm>
#include <cctype>

#include "charbot/errors.hpp"

namespace charbot {

std::vector<char32_t> decode_utf8(const std::string& text) {
  std::vector<char32_t> out;
  out.reserve(text.size());
  const auto* p = reinterpret_cast<const unsigned char*>(text.data());
  const std::size_t n = text.size();
  std::size_t i = 0;
  while (i < n) {
    const unsigned char b0 = p[i];
    char32_t cp = 0;
    std::size_t len = 0;
    if (b0 < 0x80) {
      cp = b0;
      len = 1;
    } else if ((b0 & 0xe0) == 0xc0) {
      cp = b0 & 0x1f;
      len = 2;
    } else if ((b0 & 0xf0) == 0xe0) {
      cp = b0 & 0x0f;
      len = 3;
    } else if ((b0 & 0xf8) == 0xf0) {
      cp = b0 & 0x07;
      len = 4;
    } else {
      throw InvalidUtf8("invalid UTF-8 lead byte at offset " + std::to_string(i));
    }
    if (i + len > n) throw InvalidUtf8("truncated UTF-8 sequence at offset " + std::to_string(i));
    for (std::size_t j = 1; j < len; ++j) {
      const unsigned char b = p[i + j];
      if ((b & 0xc0) != 0x80)
        throw InvalidUtf8("invalid UTF-8 continuation byte at offset " + std::to_string(i + j));
      cp = (cp << 6) | (b & 0x3f);
    }
    const bool overlong = (len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) ||
                          (len == 4 && cp < 0x10000);
    if (overlong || cp > 0x10ffff || (cp >= 0xd800 && cp <= 0xdfff))
      throw InvalidUtf8("invalid UTF-8 codepoint at offset " + std::to_string(i));
    out.push_back(cp);
    i += len;
  }
  return out;
}

std::string encode_utf8(char32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xc0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3f));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xe0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
    out += static_cast<char>(0x80 | (cp & 0x3f));
  } else {
    out += static_cast<char>(0xf0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3f));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
    out += static_cast<char>(0x80 | (cp & 0x3f));
  }
  return out;
}

std::string encode_utf8(const std::vector<char32_t>& codepoints) {
  std::string out;
  for (char32_t cp : codepoints) out += encode_utf8(cp);
  return out;
}

bool is_valid_utf8(const std::string& text) {
  try {
    decode_utf8(text);
    return true;
  } catch (const InvalidUtf8&) {
    return false;
  }
}

std::size_t codepoint_count(const std::string& text) { return decode_utf8(text).size(); }

std::string codepoint_substr(const std::string& text, std::size_t start, std::size_t count) {
  const std::vector<char32_t> cps = decode_utf8(text);
  if (start >= cps.size()) return {};
  const std::size_t end = std::min(cps.size(), start + count);
  return encode_utf8(std::vector<char32_t>(cps.begin() + start, cps.begin() + end));
}

bool is_cjk(char32_t cp) {
  return (cp >= 0x3400 && cp <= 0x4dbf) ||   // ideograph extension A
         (cp >= 0x4e00 && cp <= 0x9fff) ||   // unified ideographs
         (cp >= 0xf900 && cp <= 0xfaff) ||   // compatibility ideographs
         (cp >= 0x3000 && cp <= 0x303f) ||   // CJK punctuation
         (cp >= 0xff00 && cp <= 0xffef);     // full-width forms
}

bool contains_cjk(const std::string& text) {
  for (char32_t cp : decode_utf8(text))
    if (is_cjk(cp)) return true;
  return false;
}

namespace {

bool is_sentence_terminator(char32_t cp) {
  return cp == U'.' || cp == U'?' || cp == U'!' || cp == U'。' || cp == U'？' ||
         cp == U'！';
}

bool is_space_cp(char32_t cp) {
  return cp == U' ' || cp == U'\t' || cp == U'\n' || cp == U'\r' || cp == U'　';
}

}  // namespace

std::vector<std::string> split_sentences(const std::string& text) {
  const std::vector<char32_t> cps = decode_utf8(text);
  std::vector<std::string> out;
  std::vector<char32_t> current;
  for (std::size_t i = 0; i < cps.size(); ++i) {
    current.push_back(cps[i]);
    if (is_sentence_terminator(cps[i])) {
      // absorb immediately repeated terminators ("?!", "...")
      while (i + 1 < cps.size() && is_sentence_terminator(cps[i + 1])) current.push_back(cps[++i]);
      std::string s = trim(encode_utf8(current));
      if (!s.empty()) out.push_back(std::move(s));
      current.clear();
    }
  }
  std::string tail = trim(encode_utf8(current));
  if (!tail.empty()) out.push_back(std::move(tail));
  return out;
}

std::vector<std::string> split_whitespace(const std::string& text) {
  std::vector<std::string> out;
  std::string token;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!token.empty()) {
        out.push_back(token);
        token.clear();
      }
    } else {
      token += c;
    }
  }
  if (!token.empty()) out.push_back(token);
  return out;
}

std::vector<std::string> codepoint_tokens(const std::string& text) {
  std::vector<std::string> out;
  for (char32_t cp : decode_utf8(text))
    if (!is_space_cp(cp)) out.push_back(encode_utf8(cp));
  return out;
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> out;
  std::string line;
  for (char c : text) {
    if (c == '\n') {
      out.push_back(line);
      line.clear();
    } else if (c != '\r') {
      line += c;
    }
  }
  out.push_back(line);
  return out;
}

std::string trim(const std::string& text) {
  std::size_t begin = 0, end = text.size();
  while (begin < end && std::isspace(static_cast<unsigned char>(text[begin]))) ++begin;
  while (end > begin && std::isspace(static_cast<unsigned char>(text[end - 1]))) --end;
  return text.substr(begin, end - begin);
}

std::string substitute_placeholders(
    const std::string& tmpl, const std::vector<std::pair<std::string, std::string>>& values) {
  std::string out = tmpl;
  for (const auto& [key, value] : values) {
    const std::string needle = "{" + key + "}";
    std::size_t pos = 0;
    while ((pos = out.find(needle, pos)) != std::string::npos) {
      out.replace(pos, needle.size(), value);
      pos += value.size();
    }
  }
  return out;
}

}  // namespace charbot
