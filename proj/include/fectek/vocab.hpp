#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace fectek {

using TokenId = std::uint32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr TokenId kClsId = 2;
inline constexpr TokenId kSepId = 3;
inline constexpr TokenId kNumReserved = 4;

// True for [PAD], [UNK], [CLS] and [SEP]: positions that never carry a term
// weight or a term-level label.
inline bool is_special(TokenId id) { return id < kNumReserved; }

class Vocabulary {
 public:
  Vocabulary();

  // Tokens with count >= min_freq, ordered by descending count and then
  // lexicographically.
  static Vocabulary from_counts(const std::unordered_map<std::string, std::size_t>& counts,
                                std::size_t min_freq);

  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  std::size_t min_freq() const { return min_freq_; }
  TokenId lookup(std::string_view token) const;
  const std::string& token(TokenId id) const;

  // [CLS] ids... [SEP], with the body truncated to max_len - 2 ids.
  std::vector<TokenId> encode(std::string_view text, std::size_t max_len) const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void add(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t min_freq_ = 1;
};

// Accumulates token counts over a corpus for vocabulary construction.
class VocabularyBuilder {
 public:
  void add_text(std::string_view text);
  Vocabulary build(std::size_t min_freq) const;

  std::size_t total_tokens() const { return total_; }
  // Occurrences of tokens that survive the cutoff.
  std::size_t covered_tokens(std::size_t min_freq) const;

 private:
  std::unordered_map<std::string, std::size_t> counts_;
  std::size_t total_ = 0;
};

}  // namespace fectek
