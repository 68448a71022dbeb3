#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fectek/eval.hpp"
#include "fectek/pipeline.hpp"
#include "fectek/trainer.hpp"

namespace fectek {

// A seeded lexical retrieval task: passages mix a few distinctive terms with
// Zipf-distributed common terms; each query names some of one passage's
// distinctive terms plus one common term.
struct SyntheticConfig {
  std::size_t passages = 1000;
  std::size_t vocabulary = 300;
  std::size_t common_terms = 40;
  std::size_t distinctive_per_passage = 6;
  std::size_t min_passage_len = 14;
  std::size_t max_passage_len = 22;
  std::size_t query_terms = 3;  // distinctive terms per query
  std::size_t eval_queries = 100;
  std::size_t train_queries = 400;
  std::size_t negatives = 7;
  std::size_t hard_negatives = 4;  // highest term overlap with the query
  std::uint64_t seed = 42;
};

struct SyntheticCorpus {
  std::vector<std::string> terms;
  std::vector<TextRecord> passages;
  std::vector<TextRecord> queries;  // evaluation queries, unique targets
  Qrels qrels;
  std::vector<TrainingTriple> train;
};

SyntheticCorpus make_synthetic_corpus(const SyntheticConfig& config);

}  // namespace fectek
