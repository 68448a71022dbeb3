#include "fectek/eval.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "fectek/error.hpp"

namespace fectek {

namespace {

std::unordered_map<std::string, const QueryRun*> index_run(const RunFile& run) {
  std::unordered_map<std::string, const QueryRun*> by_qid;
  for (const QueryRun& q : run.queries) by_qid.emplace(q.qid, &q);
  return by_qid;
}

template <typename PerQuery>
double mean_over_qrels(const RunFile& run, const Qrels& qrels, PerQuery per_query) {
  const auto by_qid = index_run(run);
  double total = 0.0;
  std::size_t counted = 0;
  for (const auto& [qid, relevant] : qrels) {
    if (relevant.empty()) continue;
    ++counted;
    const auto it = by_qid.find(qid);
    if (it != by_qid.end()) total += per_query(*it->second, relevant);
  }
  if (counted == 0) throw ConfigError("qrels contain no relevant judgments");
  return total / static_cast<double>(counted);
}

std::string format_score(double score) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), score);
  return std::string(buf, end);
}

}  // namespace

Qrels read_qrels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open qrels " + path.string());
  Qrels qrels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream fields(line);
    std::string qid, iteration, docid, relevance;
    std::string extra;
    if (!(fields >> qid >> iteration >> docid >> relevance) || (fields >> extra)) {
      throw CorruptDataError(path.string() + ":" + std::to_string(line_no) +
                             ": expected 'qid 0 docid relevance'");
    }
    int rel = 0;
    const auto [ptr, ec] = std::from_chars(relevance.data(), relevance.data() + relevance.size(), rel);
    if (ec != std::errc() || ptr != relevance.data() + relevance.size()) {
      throw CorruptDataError(path.string() + ":" + std::to_string(line_no) +
                             ": relevance is not an integer");
    }
    auto& set = qrels[qid];
    if (rel > 0) set.insert(docid);
  }
  return qrels;
}

double mrr_at_k(const RunFile& run, const Qrels& qrels, std::size_t k) {
  return mean_over_qrels(run, qrels, [k](const QueryRun& q, const std::set<std::string>& rel) {
    const std::size_t n = std::min(k, q.docs.size());
    for (std::size_t i = 0; i < n; ++i) {
      if (rel.count(q.docs[i].docid)) return 1.0 / static_cast<double>(i + 1);
    }
    return 0.0;
  });
}

double recall_at_k(const RunFile& run, const Qrels& qrels, std::size_t k) {
  return mean_over_qrels(run, qrels, [k](const QueryRun& q, const std::set<std::string>& rel) {
    const std::size_t n = std::min(k, q.docs.size());
    std::set<std::string> found;
    for (std::size_t i = 0; i < n; ++i) {
      if (rel.count(q.docs[i].docid)) found.insert(q.docs[i].docid);
    }
    return static_cast<double>(found.size()) / static_cast<double>(rel.size());
  });
}

std::string format_run(const RunFile& run) {
  std::string out;
  for (const QueryRun& q : run.queries) {
    for (std::size_t i = 0; i < q.docs.size(); ++i) {
      out += q.qid + " Q0 " + q.docs[i].docid + ' ' + std::to_string(i + 1) + ' ' +
             format_score(q.docs[i].score) + ' ' + run.tag + '\n';
    }
  }
  return out;
}

void write_run(const RunFile& run, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write run file " + path.string());
  out << format_run(run);
  if (!out) throw IoError("failed writing run file " + path.string());
}

RunFile read_run(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open run file " + path.string());
  RunFile run;
  std::unordered_map<std::string, std::size_t> position;
  std::vector<std::vector<std::pair<std::size_t, RankedDoc>>> ranked;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream fields(line);
    std::string qid, q0, docid, rank_text, score_text, tag, extra;
    const auto bad = [&](const char* why) {
      throw CorruptDataError(path.string() + ":" + std::to_string(line_no) + ": " + why);
    };
    if (!(fields >> qid >> q0 >> docid >> rank_text >> score_text >> tag) || (fields >> extra)) {
      bad("expected six columns 'qid Q0 docid rank score tag'");
    }
    std::size_t rank = 0;
    double score = 0.0;
    auto r1 = std::from_chars(rank_text.data(), rank_text.data() + rank_text.size(), rank);
    auto r2 = std::from_chars(score_text.data(), score_text.data() + score_text.size(), score);
    if (r1.ec != std::errc() || r1.ptr != rank_text.data() + rank_text.size() || rank == 0) {
      bad("rank is not a positive integer");
    }
    if (r2.ec != std::errc() || r2.ptr != score_text.data() + score_text.size()) {
      bad("score is not a number");
    }
    if (run.tag.empty()) run.tag = tag;
    auto [it, inserted] = position.emplace(qid, run.queries.size());
    if (inserted) {
      run.queries.push_back({qid, {}});
      ranked.emplace_back();
    }
    ranked[it->second].push_back({rank, {docid, score}});
  }
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    auto& entries = ranked[i];
    std::sort(entries.begin(), entries.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (std::size_t r = 0; r < entries.size(); ++r) {
      if (entries[r].first != r + 1) {
        throw CorruptDataError(path.string() + ": ranks for query '" + run.queries[i].qid +
                               "' are not contiguous from 1");
      }
      run.queries[i].docs.push_back(std::move(entries[r].second));
    }
  }
  return run;
}

}  // namespace fectek
