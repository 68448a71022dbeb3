#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace fectek {

// query id -> relevant docids (relevance > 0).
using Qrels = std::map<std::string, std::set<std::string>>;

struct RankedDoc {
  std::string docid;
  double score = 0.0;
};

struct QueryRun {
  std::string qid;
  std::vector<RankedDoc> docs;  // rank 1 first
};

struct RunFile {
  std::string tag;
  std::vector<QueryRun> queries;
};

// TSV/whitespace `qid 0 docid relevance`.
Qrels read_qrels(const std::filesystem::path& path);

// Mean over qrels queries with a non-empty relevant set of 1/rank of the
// first relevant doc within the top k; queries absent from the run score 0.
double mrr_at_k(const RunFile& run, const Qrels& qrels, std::size_t k = 10);

// Mean over the same queries of |relevant in top k| / |relevant|.
double recall_at_k(const RunFile& run, const Qrels& qrels, std::size_t k);

// Six-column `qid Q0 docid rank score tag` lines.
void write_run(const RunFile& run, const std::filesystem::path& path);
std::string format_run(const RunFile& run);
RunFile read_run(const std::filesystem::path& path);

}  // namespace fectek
