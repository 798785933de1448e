#pragma once

#include <cctype>
#include <cstdint>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace deepedit::text {

// Collapses runs of ASCII whitespace to one space and trims both ends.
inline std::string collapse_whitespace(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (unsigned char c : s) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(c));
  }
  return out;
}

inline std::vector<std::string> split_whitespace(std::string_view s) {
  std::vector<std::string> tokens;
  std::istringstream in{std::string(s)};
  for (std::string tok; in >> tok;) tokens.push_back(std::move(tok));
  return tokens;
}

// Matching form used for hit detection: ASCII case-folded, apostrophes
// dropped ("Potter's" -> "potters"), every other ASCII punctuation mark
// turned into a separator, whitespace collapsed. Non-ASCII bytes pass through.
inline std::string normalize(std::string_view s) {
  std::string folded;
  folded.reserve(s.size());
  for (unsigned char c : s) {
    if (c == '\'' || c == '`') continue;
    if (c < 0x80 && std::ispunct(c)) {
      folded.push_back(' ');
    } else if (c < 0x80) {
      folded.push_back(static_cast<char>(std::tolower(c)));
    } else {
      folded.push_back(static_cast<char>(c));
    }
  }
  return collapse_whitespace(folded);
}

inline std::vector<std::string> normalized_tokens(std::string_view s) {
  return split_whitespace(normalize(s));
}

// True when `needle` occurs in `haystack` as a contiguous run of whole tokens.
inline bool contains_token_run(const std::vector<std::string>& haystack,
                               const std::vector<std::string>& needle) {
  if (needle.empty() || needle.size() > haystack.size()) return false;
  for (std::size_t i = 0; i + needle.size() <= haystack.size(); ++i) {
    bool match = true;
    for (std::size_t j = 0; j < needle.size() && match; ++j) match = haystack[i + j] == needle[j];
    if (match) return true;
  }
  return false;
}

// 64-bit FNV-1a. Stable across platforms, used for seeding and checkpoint digests.
inline std::uint64_t fnv1a(std::string_view data, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return out;
}

inline std::string replace_all(std::string s, std::string_view from, std::string_view to) {
  if (from.empty()) return s;
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
  return s;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

}  // namespace deepedit::text
