#include "fectek/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "fectek/error.hpp"
#include "fectek/tokenizer.hpp"

namespace fectek {

namespace {

constexpr std::string_view kHeaderPrefix = "#fectek-vocab v1 min_freq=";

}  // namespace

Vocabulary::Vocabulary() {
  for (const char* reserved : {"[PAD]", "[UNK]", "[CLS]", "[SEP]"}) add(reserved);
}

void Vocabulary::add(std::string token) {
  const auto id = static_cast<TokenId>(tokens_.size());
  index_.emplace(token, id);
  tokens_.push_back(std::move(token));
}

Vocabulary Vocabulary::from_counts(const std::unordered_map<std::string, std::size_t>& counts,
                                   std::size_t min_freq) {
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [token, count] : counts) {
    if (count >= min_freq) kept.emplace_back(token, count);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  Vocabulary vocab;
  vocab.min_freq_ = min_freq;
  for (auto& [token, count] : kept) vocab.add(std::move(token));
  return vocab;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind(kHeaderPrefix, 0) != 0) {
    throw CorruptDataError(path.string() + ": missing '#fectek-vocab v1' header");
  }
  Vocabulary vocab;
  try {
    vocab.min_freq_ = std::stoull(line.substr(kHeaderPrefix.size()));
  } catch (const std::exception&) {
    throw CorruptDataError(path.string() + ": bad min_freq in header");
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || vocab.index_.count(line)) {
      throw CorruptDataError(path.string() + ":" + std::to_string(line_no) +
                             ": empty or duplicate token");
    }
    vocab.add(line);
  }
  return vocab;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary file " + path.string());
  out << kHeaderPrefix << min_freq_ << '\n';
  for (std::size_t id = kNumReserved; id < tokens_.size(); ++id) out << tokens_[id] << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

TokenId Vocabulary::lookup(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id >= tokens_.size()) {
    throw DimensionError("token id " + std::to_string(id) + " outside vocabulary of size " +
                         std::to_string(tokens_.size()));
  }
  return tokens_[id];
}

std::vector<TokenId> Vocabulary::encode(std::string_view text, std::size_t max_len) const {
  if (max_len < 3) throw ConfigError("max_len must be at least 3");
  const auto tokens = tokenize(text);
  const std::size_t body = std::min(tokens.size(), max_len - 2);
  std::vector<TokenId> ids;
  ids.reserve(body + 2);
  ids.push_back(kClsId);
  for (std::size_t i = 0; i < body; ++i) ids.push_back(lookup(tokens[i]));
  ids.push_back(kSepId);
  return ids;
}

void VocabularyBuilder::add_text(std::string_view text) {
  for (auto& token : tokenize(text)) {
    ++counts_[std::move(token)];
    ++total_;
  }
}

Vocabulary VocabularyBuilder::build(std::size_t min_freq) const {
  return Vocabulary::from_counts(counts_, min_freq);
}

std::size_t VocabularyBuilder::covered_tokens(std::size_t min_freq) const {
  std::size_t covered = 0;
  for (const auto& [token, count] : counts_) {
    if (count >= min_freq) covered += count;
  }
  return covered;
}

}  // namespace fectek
