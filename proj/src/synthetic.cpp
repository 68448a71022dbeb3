#include "fectek/synthetic.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <set>
#include <unordered_set>

#include "fectek/error.hpp"

namespace fectek {

namespace {

std::vector<std::string> make_words(std::size_t count, std::mt19937_64& rng) {
  static constexpr std::string_view kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n",
                                                  "p", "r", "s", "t", "v", "z", "br", "st"};
  static constexpr std::string_view kVowels[] = {"a", "e", "i", "o", "u", "ai", "ou"};
  std::uniform_int_distribution<std::size_t> onset(0, std::size(kOnsets) - 1);
  std::uniform_int_distribution<std::size_t> vowel(0, std::size(kVowels) - 1);
  std::uniform_int_distribution<int> syllables(2, 3);
  std::unordered_set<std::string> seen;
  std::vector<std::string> words;
  while (words.size() < count) {
    std::string w;
    for (int s = syllables(rng); s > 0; --s) {
      w += kOnsets[onset(rng)];
      w += kVowels[vowel(rng)];
    }
    if (seen.insert(w).second) words.push_back(std::move(w));
  }
  return words;
}

std::string join(const std::vector<std::string>& words, std::span<const std::size_t> ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += words[ids[i]];
  }
  return out;
}

}  // namespace

SyntheticCorpus make_synthetic_corpus(const SyntheticConfig& c) {
  if (c.common_terms == 0 || c.common_terms >= c.vocabulary ||
      c.distinctive_per_passage > c.vocabulary - c.common_terms ||
      c.query_terms > c.distinctive_per_passage || c.eval_queries > c.passages ||
      c.min_passage_len < c.distinctive_per_passage || c.max_passage_len < c.min_passage_len ||
      c.hard_negatives > c.negatives || c.negatives >= c.passages) {
    throw ConfigError("inconsistent synthetic corpus configuration");
  }
  std::mt19937_64 rng(c.seed);
  SyntheticCorpus corpus;
  corpus.terms = make_words(c.vocabulary, rng);

  std::vector<double> zipf(c.common_terms);
  for (std::size_t i = 0; i < zipf.size(); ++i) zipf[i] = 1.0 / static_cast<double>(i + 1);
  std::discrete_distribution<std::size_t> common(zipf.begin(), zipf.end());
  std::uniform_int_distribution<std::size_t> length(c.min_passage_len, c.max_passage_len);
  std::vector<std::size_t> content(c.vocabulary - c.common_terms);
  std::iota(content.begin(), content.end(), c.common_terms);

  std::vector<std::vector<std::size_t>> distinctive(c.passages);
  std::vector<std::set<std::size_t>> term_sets(c.passages);
  for (std::size_t p = 0; p < c.passages; ++p) {
    std::vector<std::size_t> picked;
    std::sample(content.begin(), content.end(), std::back_inserter(picked),
                c.distinctive_per_passage, rng);
    std::vector<std::size_t> tokens = picked;
    const std::size_t len = length(rng);
    while (tokens.size() < len) tokens.push_back(common(rng));
    std::shuffle(tokens.begin(), tokens.end(), rng);
    distinctive[p] = picked;
    term_sets[p].insert(tokens.begin(), tokens.end());
    corpus.passages.push_back({"D" + std::to_string(p), join(corpus.terms, tokens)});
  }

  const auto make_query = [&](std::size_t target, std::mt19937_64& gen) {
    std::vector<std::size_t> ids;
    std::sample(distinctive[target].begin(), distinctive[target].end(), std::back_inserter(ids),
                c.query_terms, gen);
    ids.push_back(common(gen));
    std::shuffle(ids.begin(), ids.end(), gen);
    return ids;
  };

  std::vector<std::size_t> order(c.passages);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i < c.eval_queries; ++i) {
    const std::size_t target = order[i];
    const std::string qid = "Q" + std::to_string(i);
    corpus.queries.push_back({qid, join(corpus.terms, make_query(target, rng))});
    corpus.qrels[qid].insert(corpus.passages[target].id);
  }

  // Training queries use their own stream so eval queries stay fixed when
  // the training set size changes.
  std::mt19937_64 train_rng(c.seed ^ 0x5bd1e995ULL);
  std::uniform_int_distribution<std::size_t> any_passage(0, c.passages - 1);
  for (std::size_t i = 0; i < c.train_queries; ++i) {
    const std::size_t target = any_passage(train_rng);
    const auto query = make_query(target, train_rng);
    std::vector<std::pair<std::size_t, std::size_t>> overlap;  // (-count, passage)
    for (std::size_t p = 0; p < c.passages; ++p) {
      if (p == target) continue;
      std::size_t shared = 0;
      for (std::size_t t : std::set<std::size_t>(query.begin(), query.end())) {
        shared += term_sets[p].count(t);
      }
      overlap.emplace_back(shared, p);
    }
    std::stable_sort(overlap.begin(), overlap.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<std::size_t> negatives;
    for (std::size_t h = 0; h < c.hard_negatives; ++h) negatives.push_back(overlap[h].second);
    while (negatives.size() < c.negatives) {
      const std::size_t p = any_passage(train_rng);
      if (p != target && std::find(negatives.begin(), negatives.end(), p) == negatives.end()) {
        negatives.push_back(p);
      }
    }
    TrainingTriple triple;
    triple.query = join(corpus.terms, query);
    triple.positive = corpus.passages[target].text;
    for (std::size_t p : negatives) triple.negatives.push_back(corpus.passages[p].text);
    corpus.train.push_back(std::move(triple));
  }
  return corpus;
}

}  // namespace fectek
