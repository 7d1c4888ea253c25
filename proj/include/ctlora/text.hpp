// Copyright (c) 2026 The ctlora Authors
// SPDX-License-Identifier: Apache-2.0

// Report text -> fixed-length token ids with attention mask.

#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ctlora/error.hpp"

namespace ctlora::text {

inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kCls = 1;
inline constexpr std::int32_t kSep = 2;
inline constexpr std::int32_t kUnk = 3;
inline constexpr std::int32_t kReserved = 4;
inline constexpr std::size_t kDefaultMaxLen = 256;

class Vocabulary {
 public:
  Vocabulary() { install_specials(); }

  /// Builds from explicit token ids. Ids below kReserved belong to the specials.
  explicit Vocabulary(const std::map<std::string, std::int32_t>& ids) {
    install_specials();
    for (const auto& [tok, id] : ids) {
      require(id >= kReserved, Errc::invalid_config, "token '" + tok + "' collides with a special id");
      add(tok, id);
    }
  }

  std::int32_t id(const std::string& tok) const {
    auto it = ids_.find(tok);
    return it == ids_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& tok) const { return ids_.count(tok) != 0; }
  const std::string& token(std::int32_t id) const {
    static const std::string unk = "[UNK]";
    auto it = tokens_.find(id);
    return it == tokens_.end() ? unk : it->second;
  }
  /// One past the largest id.
  std::size_t size() const { return tokens_.empty() ? 0 : static_cast<std::size_t>(tokens_.rbegin()->first) + 1; }

  /// Non-special tokens in id order.
  std::vector<std::string> ordinary_tokens() const {
    std::vector<std::string> out;
    for (const auto& [id, tok] : tokens_)
      if (id >= kReserved) out.push_back(tok);
    return out;
  }

  void add(const std::string& tok, std::int32_t id) {
    require(!ids_.count(tok), Errc::invalid_config, "duplicate token '" + tok + "'");
    require(!tokens_.count(id), Errc::invalid_config, "duplicate id " + std::to_string(id));
    ids_[tok] = id;
    tokens_[id] = tok;
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  void install_specials() {
    ids_ = {{"[PAD]", kPad}, {"[CLS]", kCls}, {"[SEP]", kSep}, {"[UNK]", kUnk}};
    tokens_ = {{kPad, "[PAD]"}, {kCls, "[CLS]"}, {kSep, "[SEP]"}, {kUnk, "[UNK]"}};
  }

  std::unordered_map<std::string, std::int32_t> ids_;
  std::map<std::int32_t, std::string> tokens_;
};

struct TokenSequence {
  std::vector<std::int32_t> input_ids;
  std::vector<std::uint8_t> attention_mask;

  std::size_t real_length() const {
    return static_cast<std::size_t>(std::count(attention_mask.begin(), attention_mask.end(), 1));
  }
};

inline std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

inline std::string concat_sections(std::string_view findings, std::string_view impressions) {
  const std::string f = trim(findings), i = trim(impressions);
  if (f.empty()) return i;
  if (i.empty()) return f;
  return f + " " + i;
}

/// Lowercases, splits on whitespace, and emits each punctuation mark as its own token.
inline std::vector<std::string> split_words(std::string_view report) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : report) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isspace(u)) {
      flush();
    } else if (std::ispunct(u)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(u)));
    }
  }
  flush();
  return out;
}

inline TokenSequence tokenize(std::string_view report, const Vocabulary& vocab, std::size_t max_len = kDefaultMaxLen) {
  require(max_len >= 2, Errc::invalid_config, "max length must be >= 2");
  const auto words = split_words(report);
  const std::size_t body = std::min(words.size(), max_len - 2);
  TokenSequence t;
  t.input_ids.assign(max_len, kPad);
  t.attention_mask.assign(max_len, 0);
  t.input_ids[0] = kCls;
  for (std::size_t i = 0; i < body; ++i) t.input_ids[i + 1] = vocab.id(words[i]);
  t.input_ids[body + 1] = kSep;
  std::fill(t.attention_mask.begin(), t.attention_mask.begin() + static_cast<std::ptrdiff_t>(body + 2), 1);
  return t;
}

/// Ids of in-vocabulary tokens back to their text, specials dropped.
inline std::vector<std::string> decode(const TokenSequence& t, const Vocabulary& vocab) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < t.input_ids.size(); ++i)
    if (t.attention_mask[i] && t.input_ids[i] >= kReserved) out.push_back(vocab.token(t.input_ids[i]));
  return out;
}

/// Keeps tokens seen at least `min_count` times; ids by descending count, then lexicographic.
inline Vocabulary build_vocab(const std::vector<std::string>& corpus, std::size_t min_count = 1) {
  require(!corpus.empty(), Errc::invalid_input, "vocabulary corpus is empty");
  std::map<std::string, std::size_t> counts;
  for (const auto& doc : corpus)
    for (auto& w : split_words(doc)) ++counts[w];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [w, c] : counts)
    if (c >= min_count) kept.emplace_back(w, c);
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  std::int32_t next = kReserved;
  for (const auto& [w, c] : kept) v.add(w, next++);
  return v;
}

/// One token per line; line n holds id n + kReserved.
inline void save_vocab(const Vocabulary& v, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), Errc::data, "cannot write " + path);
  std::int32_t expect = kReserved;
  for (const auto& tok : v.ordinary_tokens()) {
    require(v.id(tok) == expect++, Errc::format, "vocabulary ids are not contiguous; cannot write line format");
    out << tok << "\n";
  }
}

inline Vocabulary load_vocab(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::data, "cannot open " + path);
  Vocabulary v;
  std::string line;
  std::int32_t next = kReserved;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    require(!line.empty(), Errc::format, "empty line in vocabulary file " + path);
    v.add(line, next++);
  }
  return v;
}

}  // namespace ctlora::text
