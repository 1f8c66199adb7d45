#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pulse/errors.hpp"

namespace pulse {

// Merge-based subword tokenizer trained from scratch on function sentences.
// Vocabulary ids are stable: the four specials sit at fixed positions, then
// single characters, then merged tokens in the order their merges were
// learned.

inline constexpr std::uint32_t kPadId = 0;
inline constexpr std::uint32_t kUnkId = 1;
inline constexpr std::uint32_t kClsId = 2;
inline constexpr std::uint32_t kSepId = 3;

inline constexpr std::string_view kPadToken = "[PAD]";
inline constexpr std::string_view kUnkToken = "[UNK]";
inline constexpr std::string_view kClsToken = "[CLS]";
inline constexpr std::string_view kSepToken = "[SEP]";

// Fixed-length encoded sentence: ids padded to max_len, mask marking the
// real (non-pad) prefix.
struct TokenSequence {
  std::vector<std::uint32_t> ids;
  std::vector<std::uint8_t> attention_mask;
  std::size_t n_real = 0;

  bool operator==(const TokenSequence&) const = default;
};

// Splits a sentence into words: whitespace first, then (optionally) each of
// the structural punctuation characters [ ] : + - , becomes its own word, so
// "movdwordptr[ebp-0x4]" shares subwords with other bracketed operands.
inline std::vector<std::string> pre_split(std::string_view text,
                                          bool punctuation_split) {
  auto is_punct = [](char c) {
    return c == '[' || c == ']' || c == ':' || c == '+' || c == '-' ||
           c == ',';
  };
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      words.push_back(cur);
      cur.clear();
    }
  };
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      flush();
    } else if (punctuation_split && is_punct(c)) {
      flush();
      words.emplace_back(1, c);
    } else {
      cur += c;
    }
  }
  flush();
  return words;
}

struct TokenizerModel {
  std::vector<std::string> tokens;  // index == token id
  std::vector<std::pair<std::string, std::string>> merges;  // training order
  std::size_t vocab_size_target = 0;
  bool punctuation_split = true;

  std::size_t vocab_size() const { return tokens.size(); }

  std::uint32_t id_of(const std::string& token) const {
    const auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnkId : it->second;
  }

  bool has_token(const std::string& token) const {
    return token_to_id_.contains(token);
  }

  void rebuild_index() {
    token_to_id_.clear();
    merge_rank_.clear();
    for (std::size_t i = 0; i < tokens.size(); ++i)
      token_to_id_.emplace(tokens[i], static_cast<std::uint32_t>(i));
    for (std::size_t i = 0; i < merges.size(); ++i)
      merge_rank_.emplace(merges[i].first + '\x1f' + merges[i].second, i);
  }

  // Rank of a candidate pair in the merge list, or npos.
  std::size_t merge_rank(const std::string& left,
                         const std::string& right) const {
    const auto it = merge_rank_.find(left + '\x1f' + right);
    return it == merge_rank_.end() ? npos : it->second;
  }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["vocab"] = tokens;
    nlohmann::json m = nlohmann::json::array();
    for (const auto& [l, r] : merges) m.push_back({l, r});
    j["merges"] = std::move(m);
    j["specials"] = {{"pad", kPadId}, {"unk", kUnkId},
                     {"cls", kClsId}, {"sep", kSepId}};
    j["punctuation_split"] = punctuation_split;
    j["vocab_size_target"] = vocab_size_target;
    return j;
  }

  static TokenizerModel from_json(const nlohmann::json& j) {
    TokenizerModel m;
    m.tokens = j.at("vocab").get<std::vector<std::string>>();
    for (const auto& pair : j.at("merges")) {
      if (!pair.is_array() || pair.size() != 2)
        throw DataError("tokenizer file: merge entry is not a pair");
      m.merges.emplace_back(pair[0].get<std::string>(),
                            pair[1].get<std::string>());
    }
    m.punctuation_split = j.at("punctuation_split").get<bool>();
    m.vocab_size_target = j.at("vocab_size_target").get<std::size_t>();
    if (m.tokens.size() < 4 || m.tokens[kPadId] != kPadToken ||
        m.tokens[kUnkId] != kUnkToken || m.tokens[kClsId] != kClsToken ||
        m.tokens[kSepId] != kSepToken)
      throw DataError("tokenizer file: special tokens are not at ids 0..3");
    m.rebuild_index();
    return m;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write tokenizer: " + path.string());
    out << to_json().dump(2) << '\n';
  }

  static TokenizerModel load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open tokenizer: " + path.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw DataError("tokenizer file is not valid JSON (" + path.string() +
                      "): " + e.what());
    }
    return from_json(j);
  }

 private:
  std::unordered_map<std::string, std::uint32_t> token_to_id_;
  std::unordered_map<std::string, std::size_t> merge_rank_;
};

namespace detail {

inline std::vector<std::string> split_chars(std::string_view word) {
  std::vector<std::string> symbols;
  symbols.reserve(word.size());
  for (char c : word) symbols.emplace_back(1, c);
  return symbols;
}

}  // namespace detail

// Learns merges by iterating "most frequent adjacent pair wins"; ties break
// toward the lexicographically smallest (left, right) pair so training is a
// pure function of the corpus. Stops at the vocab target or when no pair
// occurs at least twice.
inline TokenizerModel train_tokenizer(const std::vector<std::string>& corpus,
                                      std::size_t vocab_size,
                                      bool punctuation_split = true) {
  std::map<std::string, std::uint64_t> word_counts;
  for (const std::string& line : corpus)
    for (std::string& w : pre_split(line, punctuation_split))
      word_counts[std::move(w)] += 1;
  if (word_counts.empty()) throw DataError("tokenizer corpus has no words");

  TokenizerModel model;
  model.vocab_size_target = vocab_size;
  model.punctuation_split = punctuation_split;
  model.tokens = {std::string(kPadToken), std::string(kUnkToken),
                  std::string(kClsToken), std::string(kSepToken)};
  std::set<char> chars;
  for (const auto& [w, n] : word_counts)
    for (char c : w) chars.insert(c);
  for (char c : chars) model.tokens.emplace_back(1, c);

  const std::size_t minimum = model.tokens.size();
  if (vocab_size < minimum)
    throw ConfigError("vocab_size " + std::to_string(vocab_size) +
                      " too small; minimum for this corpus is " +
                      std::to_string(minimum));

  // Working state: each distinct word as a symbol sequence plus its count.
  // std::map iteration keeps everything ordered by word.
  std::vector<std::pair<std::vector<std::string>, std::uint64_t>> words;
  words.reserve(word_counts.size());
  for (const auto& [w, n] : word_counts)
    words.emplace_back(detail::split_chars(w), n);

  std::set<std::string> vocab_set(model.tokens.begin(), model.tokens.end());
  while (vocab_set.size() < vocab_size) {
    std::map<std::pair<std::string, std::string>, std::uint64_t> pair_counts;
    for (const auto& [symbols, count] : words)
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i)
        pair_counts[{symbols[i], symbols[i + 1]}] += count;

    // First occurrence of the max count in ascending pair order is the
    // lexicographically smallest winner.
    std::uint64_t best_count = 0;
    const std::pair<std::string, std::string>* best = nullptr;
    for (const auto& [pair, count] : pair_counts) {
      if (count > best_count) {
        best_count = count;
        best = &pair;
      }
    }
    if (best == nullptr || best_count < 2) break;

    const std::string merged = best->first + best->second;
    model.merges.push_back(*best);
    if (vocab_set.insert(merged).second) model.tokens.push_back(merged);

    for (auto& [symbols, count] : words) {
      std::vector<std::string> out;
      out.reserve(symbols.size());
      std::size_t i = 0;
      while (i < symbols.size()) {
        if (i + 1 < symbols.size() && symbols[i] == best->first &&
            symbols[i + 1] == best->second) {
          out.push_back(merged);
          i += 2;
        } else {
          out.push_back(std::move(symbols[i]));
          i += 1;
        }
      }
      symbols = std::move(out);
    }
  }

  model.rebuild_index();
  return model;
}

// Splits one word into subword ids by replaying the learned merges. Uses
// lowest-rank-first application, which for a trained merge list is equivalent
// to replaying the list in training order (a merge's inputs can only be
// produced by earlier merges), but costs O(len^2) instead of O(len * merges).
inline std::vector<std::uint32_t> encode_word(const TokenizerModel& model,
                                              std::string_view word) {
  std::vector<std::string> symbols = detail::split_chars(word);
  while (symbols.size() > 1) {
    std::size_t best_rank = TokenizerModel::npos;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      const std::size_t r = model.merge_rank(symbols[i], symbols[i + 1]);
      if (r < best_rank) best_rank = r;
    }
    if (best_rank == TokenizerModel::npos) break;
    const auto& [left, right] = model.merges[best_rank];
    const std::string merged = left + right;
    std::vector<std::string> out;
    out.reserve(symbols.size());
    std::size_t i = 0;
    while (i < symbols.size()) {
      if (i + 1 < symbols.size() && symbols[i] == left &&
          symbols[i + 1] == right) {
        out.push_back(merged);
        i += 2;
      } else {
        out.push_back(std::move(symbols[i]));
        i += 1;
      }
    }
    symbols = std::move(out);
  }
  std::vector<std::uint32_t> ids;
  ids.reserve(symbols.size());
  for (const std::string& s : symbols) ids.push_back(model.id_of(s));
  return ids;
}

// Encodes a sentence to exactly max_len ids: [CLS] body [SEP] then padding.
// Overlong bodies are truncated from the tail and [SEP] is forced onto the
// last kept position, so every sequence ends its real prefix with [SEP].
inline TokenSequence encode(const TokenizerModel& model, std::string_view text,
                            std::size_t max_len) {
  if (max_len < 2)
    throw ConfigError("max_len must be at least 2 (got " +
                      std::to_string(max_len) + ")");
  TokenSequence seq;
  seq.ids.reserve(max_len);
  seq.ids.push_back(kClsId);
  for (const std::string& w : pre_split(text, model.punctuation_split)) {
    const std::vector<std::uint32_t> ids = encode_word(model, w);
    seq.ids.insert(seq.ids.end(), ids.begin(), ids.end());
    if (seq.ids.size() > max_len) break;  // already truncating; stop early
  }
  seq.ids.push_back(kSepId);
  if (seq.ids.size() > max_len) {
    seq.ids.resize(max_len);
    seq.ids.back() = kSepId;
  }
  seq.n_real = seq.ids.size();
  seq.ids.resize(max_len, kPadId);
  seq.attention_mask.assign(max_len, 0);
  for (std::size_t i = 0; i < seq.n_real; ++i) seq.attention_mask[i] = 1;
  return seq;
}

// Caching encoder for bulk work: trace corpora repeat the same words heavily.
class Encoder {
 public:
  Encoder(const TokenizerModel& model, std::size_t max_len)
      : model_(model), max_len_(max_len) {}

  TokenSequence operator()(std::string_view text) {
    if (max_len_ < 2) throw ConfigError("max_len must be at least 2");
    TokenSequence seq;
    seq.ids.reserve(max_len_);
    seq.ids.push_back(kClsId);
    for (std::string& w : pre_split(text, model_.punctuation_split)) {
      auto it = cache_.find(w);
      if (it == cache_.end()) {
        std::vector<std::uint32_t> ids = encode_word(model_, w);
        it = cache_.emplace(std::move(w), std::move(ids)).first;
      }
      seq.ids.insert(seq.ids.end(), it->second.begin(), it->second.end());
      if (seq.ids.size() > max_len_) break;
    }
    seq.ids.push_back(kSepId);
    if (seq.ids.size() > max_len_) {
      seq.ids.resize(max_len_);
      seq.ids.back() = kSepId;
    }
    seq.n_real = seq.ids.size();
    seq.ids.resize(max_len_, kPadId);
    seq.attention_mask.assign(max_len_, 0);
    for (std::size_t i = 0; i < seq.n_real; ++i) seq.attention_mask[i] = 1;
    return seq;
  }

 private:
  const TokenizerModel& model_;
  std::size_t max_len_;
  std::unordered_map<std::string, std::vector<std::uint32_t>> cache_;
};

// Mean subword tokens per word over a corpus (specials excluded). 1.0 means
// every word stayed whole; the rate is the standard fragmentation measure.
inline double fragmentation_rate(const TokenizerModel& model,
                                 const std::vector<std::string>& corpus) {
  std::uint64_t n_words = 0, n_tokens = 0;
  std::unordered_map<std::string, std::size_t> cache;
  for (const std::string& line : corpus) {
    for (std::string& w : pre_split(line, model.punctuation_split)) {
      n_words += 1;
      auto it = cache.find(w);
      if (it == cache.end()) {
        const std::size_t n = encode_word(model, w).size();
        it = cache.emplace(std::move(w), n).first;
      }
      n_tokens += it->second;
    }
  }
  if (n_words == 0) throw DataError("fragmentation rate: corpus has no words");
  return static_cast<double>(n_tokens) / static_cast<double>(n_words);
}

}  // namespace pulse
