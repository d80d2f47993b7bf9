#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace charbot {

// Strict decode; throws InvalidUtf8 on malformed sequences, surrogates and
// overlong encodings.
std::vector<char32_t> decode_utf8(const std::string& text);
std::string encode_utf8(const std::vector<char32_t>& codepoints);
std::string encode_utf8(char32_t cp);

bool is_valid_utf8(const std::string& text);
std::size_t codepoint_count(const std::string& text);
// Substring addressed in codepoints, clamped to the text's end.
std::string codepoint_substr(const std::string& text, std::size_t start, std::size_t count);

bool is_cjk(char32_t cp);
bool contains_cjk(const std::string& text);

// Splits at ASCII and CJK sentence terminators (. ? ! 。 ？ ！), keeping the
// terminator with its sentence. Trailing text without a terminator is a
// sentence of its own.
std::vector<std::string> split_sentences(const std::string& text);

std::vector<std::string> split_whitespace(const std::string& text);
// One token per non-whitespace codepoint.
std::vector<std::string> codepoint_tokens(const std::string& text);

std::vector<std::string> split_lines(const std::string& text);
std::string trim(const std::string& text);

// Replaces every "{key}" with its value; unknown placeholders are left as-is.
std::string substitute_placeholders(
    const std::string& tmpl, const std::vector<std::pair<std::string, std::string>>& values);

}  // namespace charbot
