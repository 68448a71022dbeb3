#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fectek/eval.hpp"
#include "fectek/index.hpp"
#include "fectek/model.hpp"
#include "fectek/vocab.hpp"

namespace fectek {

// One `id \t text` record (MS MARCO collection / queries layout).
struct TextRecord {
  std::string id;
  std::string text;
};

std::vector<TextRecord> read_tsv(const std::filesystem::path& path);
void write_tsv(const std::filesystem::path& path, std::span<const TextRecord> records);

// Passage term weights in input order; work is split over `threads` workers
// (0 = hardware concurrency) with graph recording disabled.
std::vector<DocumentWeights> encode_passages(const FecTekModel& model, const Vocabulary& vocab,
                                             std::span<const TextRecord> passages,
                                             std::size_t threads = 0);

// Encodes each query, searches the index and collects the ranked run.
RunFile retrieve(const FecTekModel& model, const Vocabulary& vocab, const InvertedIndex& index,
                 std::span<const TextRecord> queries, std::size_t k, const std::string& tag,
                 std::size_t threads = 0);

// Fails with ConfigError when the checkpoint was trained on a different
// vocabulary size.
void check_vocabulary(const FecTekModel& model, const Vocabulary& vocab);

}  // namespace fectek
