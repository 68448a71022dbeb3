#include "fectek/pipeline.hpp"

#include <algorithm>
#include <exception>
#include <fstream>
#include <thread>

#include "fectek/error.hpp"

namespace fectek {

namespace {

// Runs fn(i) for i in [0, n) over a fixed number of workers; the first
// exception is rethrown on the calling thread.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, std::max<std::size_t>(n, 1));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& worker : pool) worker.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

std::vector<TextRecord> read_tsv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<TextRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      throw CorruptDataError(path.string() + ":" + std::to_string(line_no) +
                             ": expected 'id<TAB>text'");
    }
    records.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  return records;
}

void write_tsv(const std::filesystem::path& path, std::span<const TextRecord> records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : records) out << r.id << '\t' << r.text << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

void check_vocabulary(const FecTekModel& model, const Vocabulary& vocab) {
  if (model.encoder().vocab_size() != vocab.size()) {
    throw ConfigError("checkpoint expects a vocabulary of " +
                      std::to_string(model.encoder().vocab_size()) + " ids but the vocabulary has " +
                      std::to_string(vocab.size()));
  }
}

std::vector<DocumentWeights> encode_passages(const FecTekModel& model, const Vocabulary& vocab,
                                             std::span<const TextRecord> passages,
                                             std::size_t threads) {
  check_vocabulary(model, vocab);
  std::vector<DocumentWeights> out(passages.size());
  const std::size_t max_len = model.config().encoder.max_passage_len;
  parallel_for(passages.size(), threads, [&](std::size_t i) {
    const auto ids = vocab.encode(passages[i].text, max_len);
    out[i] = {passages[i].id, model.encode_terms(ids)};
  });
  return out;
}

RunFile retrieve(const FecTekModel& model, const Vocabulary& vocab, const InvertedIndex& index,
                 std::span<const TextRecord> queries, std::size_t k, const std::string& tag,
                 std::size_t threads) {
  check_vocabulary(model, vocab);
  RunFile run;
  run.tag = tag;
  run.queries.resize(queries.size());
  const std::size_t max_len = model.config().encoder.max_query_len;
  parallel_for(queries.size(), threads, [&](std::size_t i) {
    const auto weights = model.encode_terms(vocab.encode(queries[i].text, max_len));
    const SearchResult result = search(index, weights, k);
    QueryRun& q = run.queries[i];
    q.qid = queries[i].id;
    for (const SearchHit& hit : result.hits) q.docs.push_back({hit.docid, hit.float_score});
  });
  return run;
}

}  // namespace fectek
