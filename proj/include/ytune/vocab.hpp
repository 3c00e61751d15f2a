#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ytune/error.hpp"

namespace ytune {

using TokenId = std::uint32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kTaskTokenId = 1;  // "<s>"
inline constexpr TokenId kUnkId = 2;
inline constexpr TokenId kReservedIds = 3;

struct TokenSequence {
  std::vector<TokenId> ids;

  std::size_t size() const { return ids.size(); }

  /// Non-empty, ids below vocab_size, length within max_len, and no pad id
  /// followed by a non-pad id.
  void validate(std::size_t vocab_size, std::size_t max_len) const {
    if (ids.empty()) throw InputError("empty token sequence");
    if (ids.size() > max_len)
      throw InputError("sequence length " + std::to_string(ids.size()) + " exceeds max_len " +
                       std::to_string(max_len));
    bool seen_pad = false;
    for (TokenId id : ids) {
      if (id >= vocab_size)
        throw InputError("token id " + std::to_string(id) + " outside vocabulary of size " +
                         std::to_string(vocab_size));
      if (id == kPadId) {
        seen_pad = true;
      } else if (seen_pad) {
        throw InputError("pad id interior to sequence");
      }
    }
    if (ids.front() == kPadId) throw InputError("sequence consists of padding");
  }

  bool operator==(const TokenSequence&) const = default;
};

inline std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

/// Frequency-ordered vocabulary; ids below kReservedIds are pad, "<s>", unk.
class Vocabulary {
 public:
  Vocabulary() = default;

  /// Most frequent tokens get the smallest ids; ties break lexicographically.
  /// At most `capacity - kReservedIds` corpus tokens are kept.
  static Vocabulary build(const std::vector<std::vector<std::string>>& corpus, std::size_t capacity) {
    if (capacity <= kReservedIds) throw ConfigError("vocabulary capacity must exceed reserved ids");
    std::map<std::string, std::size_t> counts;
    for (const auto& sentence : corpus)
      for (const auto& tok : sentence)
        if (!is_reserved_token(tok)) ++counts[tok];
    std::vector<std::pair<std::string, std::size_t>> sorted(counts.begin(), counts.end());
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary v;
    for (const auto& [tok, n] : sorted) {
      if (v.tokens_.size() + kReservedIds >= capacity) break;
      v.add(tok);
    }
    return v;
  }

  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    Vocabulary v;
    for (const auto& t : tokens) {
      if (v.index_.count(t) || is_reserved_token(t))
        throw InputError("duplicate or reserved vocabulary token '" + t + "'");
      v.add(t);
    }
    return v;
  }

  /// One token per line; comment lines start with '#'. The first
  /// non-comment line is id kReservedIds.
  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open vocabulary " + path.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty() && line[0] == '#') continue;
      tokens.push_back(line);
    }
    return from_tokens(tokens);
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw InputError("cannot write vocabulary " + path.string());
    out << "# ytune vocabulary; line n (0-based, comments excluded) has id n + " << kReservedIds
        << "\n# reserved ids: 0 <pad>, 1 <s>, 2 <unk>\n";
    for (const auto& t : tokens_) out << t << '\n';
  }

  TokenId id(std::string_view token) const {
    if (token == "<pad>") return kPadId;
    if (token == "<s>") return kTaskTokenId;
    if (token == "<unk>") return kUnkId;
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnkId : it->second;
  }

  bool contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

  std::string token(TokenId id) const {
    if (id == kPadId) return "<pad>";
    if (id == kTaskTokenId) return "<s>";
    if (id == kUnkId) return "<unk>";
    return tokens_.at(id - kReservedIds);
  }

  /// Total id count including reserved ids.
  std::size_t size() const { return tokens_.size() + kReservedIds; }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  static bool is_reserved_token(const std::string& t) {
    return t == "<pad>" || t == "<s>" || t == "<unk>";
  }
  void add(const std::string& t) {
    index_.emplace(t, static_cast<TokenId>(tokens_.size() + kReservedIds));
    tokens_.push_back(t);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

inline TokenSequence tokenize_words(const std::vector<std::string>& words, const Vocabulary& vocab,
                                    std::size_t max_len) {
  TokenSequence seq;
  for (const auto& w : words) {
    if (seq.ids.size() == max_len) break;
    seq.ids.push_back(vocab.id(w));
  }
  return seq;
}

/// Whitespace tokenization through `vocab`; OOV tokens map to unk and the
/// result is truncated at max_len.
inline TokenSequence tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
  auto words = split_whitespace(text);
  if (words.empty()) throw InputError("cannot tokenize empty text");
  return tokenize_words(words, vocab, max_len);
}

}  // namespace ytune
