#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <sstream>

#include "fectek/binary_io.hpp"
#include "fectek/error.hpp"
#include "fectek/index.hpp"
#include "gtest/gtest.h"

using namespace fectek;

namespace {

TermWeightVector weights(std::initializer_list<std::pair<TokenId, double>> entries) {
  TermWeightVector v;
  v.entries.assign(entries.begin(), entries.end());
  return v;
}

std::vector<DocumentWeights> random_corpus(std::size_t docs, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> term(kNumReserved, static_cast<TokenId>(vocab - 1));
  std::uniform_int_distribution<int> len(1, 12);
  std::uniform_real_distribution<double> w(0.0, 3.0);
  std::vector<DocumentWeights> out;
  for (std::size_t d = 0; d < docs; ++d) {
    std::map<TokenId, double> m;
    const int n = len(rng);
    for (int i = 0; i < n; ++i) m[term(rng)] = w(rng);
    DocumentWeights doc{"doc" + std::to_string(d), {}};
    doc.weights.entries.assign(m.begin(), m.end());
    out.push_back(std::move(doc));
  }
  return out;
}

// Impact computed from first principles: nearest step of max/255.
int oracle_impact(double w, double max_w) {
  if (max_w <= 0.0) return 0;
  return static_cast<int>(std::min(255.0, std::floor(w / (max_w / 255.0) + 0.5)));
}

struct OracleHit {
  std::size_t ordinal;
  std::uint64_t score;
};

// Dense scoring of every document, sorted by score then ordinal.
std::vector<OracleHit> brute_force(const std::vector<DocumentWeights>& docs,
                                   const TermWeightVector& query, std::size_t vocab,
                                   std::size_t k) {
  double doc_max = 0.0;
  for (const auto& d : docs)
    for (const auto& [t, w] : d.weights.entries) doc_max = std::max(doc_max, w);
  double q_max = 0.0;
  for (const auto& [t, w] : query.entries) q_max = std::max(q_max, w);
  std::vector<int> q(vocab, 0);
  for (const auto& [t, w] : query.entries) q[t] = oracle_impact(w, q_max);
  std::vector<OracleHit> hits;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    std::uint64_t score = 0;
    for (const auto& [t, w] : docs[i].weights.entries) {
      score += static_cast<std::uint64_t>(q[t]) * oracle_impact(w, doc_max);
    }
    if (score > 0) hits.push_back({i, score});
  }
  std::sort(hits.begin(), hits.end(), [](const OracleHit& a, const OracleHit& b) {
    return a.score != b.score ? a.score > b.score : a.ordinal < b.ordinal;
  });
  if (hits.size() > k) hits.resize(k);
  return hits;
}

TermWeightVector random_query(std::size_t vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<TokenId> term(kNumReserved, static_cast<TokenId>(vocab - 1));
  std::uniform_real_distribution<double> w(0.01, 2.0);
  std::map<TokenId, double> m;
  for (int i = 0; i < 4; ++i) m[term(rng)] = w(rng);
  TermWeightVector v;
  v.entries.assign(m.begin(), m.end());
  return v;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("fectek_test_index_" + name);
}

}  // namespace

TEST(Quantize, Examples) {
  const auto params = QuantizationParams::from_max(2.0);
  EXPECT_DOUBLE_EQ(params.scale, 2.0 / 255.0);
  EXPECT_EQ(quantize_weight(2.0, params), 255);
  EXPECT_EQ(quantize_weight(0.0, params), 0);
  EXPECT_EQ(quantize_weight(1.0, params), 128);  // 127.5 rounds away from zero
  EXPECT_EQ(quantize_weight(5.0, params), 255);
  EXPECT_EQ(QuantizationParams::from_max(0.0).scale, 1.0);

  const auto q = quantize(weights({{4, 2.0}, {5, 0.001}, {6, 1.0}}), params);
  ASSERT_EQ(q.size(), 2u);
  EXPECT_EQ(q[0], (QuantizedTerm{4, 255}));
  EXPECT_EQ(q[1], (QuantizedTerm{6, 128}));
}

TEST(Quantize, ErrorBoundedByHalfStep) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> w(0.0, 7.3);
  std::vector<double> values(10000);
  double max_w = 0.0;
  for (double& v : values) max_w = std::max(max_w, v = w(rng));
  const auto params = QuantizationParams::from_max(max_w);
  for (double v : values) {
    const int impact = quantize_weight(v, params);
    EXPECT_EQ(impact, oracle_impact(v, max_w));
    if (impact == 0) continue;
    EXPECT_LE(std::abs(impact * params.scale - v), (max_w / 255.0) / 2.0 + 1e-12);
  }
}

TEST(Varint, RoundTripAndSizes) {
  std::mt19937_64 rng(2);
  std::vector<std::uint64_t> values{0, 1, 127, 128, 16383, 16384, UINT64_MAX};
  for (int i = 0; i < 1000; ++i) values.push_back(rng() >> (rng() % 64));
  std::vector<std::uint8_t> bytes;
  for (auto v : values) put_varint(bytes, v);
  std::size_t pos = 0;
  for (auto v : values) {
    std::uint64_t got = 0;
    ASSERT_TRUE(get_varint(bytes, pos, bytes.size(), got));
    EXPECT_EQ(got, v);
  }
  EXPECT_EQ(pos, bytes.size());

  std::vector<std::uint8_t> one;
  put_varint(one, 300);
  EXPECT_EQ(one, (std::vector<std::uint8_t>{0xac, 0x02}));
  std::uint64_t v = 0;
  std::size_t p = 0;
  EXPECT_FALSE(get_varint(std::span(one).first(1), p, 1, v));
}

TEST(Postings, GapEncodingRoundTrip) {
  const std::vector<Posting> postings{{0, 9}, {3, 255}, {200, 1}, {70000, 17}};
  const auto bytes = encode_postings(postings);
  EXPECT_EQ(bytes[0], 0);  // first gap is the ordinal itself
  EXPECT_EQ(bytes[1], 9);
  EXPECT_EQ(decode_postings(bytes), postings);
}

TEST(Build, Examples) {
  const auto empty = InvertedIndex::build(std::span<const DocumentWeights>{}, 10);
  EXPECT_EQ(empty.doc_count(), 0u);
  EXPECT_EQ(empty.doc_scale(), 1.0);
  for (TokenId t = 0; t < 10; ++t) EXPECT_TRUE(empty.postings(t).empty());

  const std::vector<DocumentWeights> single{{"d0", weights({{5, 0.7}})}};
  const auto one = InvertedIndex::build(single, 10);
  EXPECT_EQ(one.postings(5), (std::vector<Posting>{{0, 255}}));
  EXPECT_EQ(one.docid(0), "d0");
}

TEST(Build, DeterministicBytes) {
  const auto docs = random_corpus(200, 50, 3);
  EXPECT_EQ(InvertedIndex::build(docs, 50).serialize(), InvertedIndex::build(docs, 50).serialize());
}

TEST(Build, Errors) {
  const std::vector<DocumentWeights> dup{{"x", weights({{5, 1.0}})}, {"x", weights({{6, 1.0}})}};
  try {
    InvertedIndex::build(dup, 10);
    FAIL();
  } catch (const CorruptDataError& e) {
    EXPECT_NE(std::string(e.what()).find("'x'"), std::string::npos);
  }
  const std::vector<DocumentWeights> out_of_range{{"y", weights({{50, 1.0}})}};
  EXPECT_THROW(InvertedIndex::build(out_of_range, 10), CorruptDataError);
}

TEST(Search, Examples) {
  const std::vector<DocumentWeights> docs{
      {"a", weights({{4, 1.0}, {5, 0.5}})},
      {"b", weights({{4, 2.0}})},
      {"c", weights({{6, 1.0}})},
      {"d", weights({{4, 1.0}})},
  };
  const auto index = InvertedIndex::build(docs, 10);
  EXPECT_TRUE(search(index, weights({{7, 1.0}}), 10).hits.empty());
  EXPECT_TRUE(search(index, weights({{4, 1.0}}), 0).hits.empty());
  EXPECT_TRUE(search(index, weights({{99, 1.0}}), 10).hits.empty());

  // One-term query ranks by the posting's impacts, ties by ordinal.
  const auto r = search(index, weights({{4, 1.0}}), 10);
  ASSERT_EQ(r.hits.size(), 3u);
  EXPECT_EQ(r.hits[0].docid, "b");
  EXPECT_EQ(r.hits[0].score, 255u * 255u);
  EXPECT_EQ(r.hits[1].docid, "a");
  EXPECT_EQ(r.hits[2].docid, "d");
  EXPECT_EQ(r.hits[1].score, r.hits[2].score);
  EXPECT_DOUBLE_EQ(r.hits[0].float_score, 255.0 * 255.0 * (1.0 / 255.0) * (2.0 / 255.0));
}

TEST(Search, MatchesBruteForceExactly) {
  constexpr std::size_t kVocab = 300;
  const auto docs = random_corpus(1000, kVocab, 4);
  const auto index = InvertedIndex::build(docs, kVocab);
  std::mt19937_64 rng(5);
  for (int qi = 0; qi < 100; ++qi) {
    const auto query = random_query(kVocab, rng);
    const auto expected = brute_force(docs, query, kVocab, 10);
    const auto got = search(index, query, 10).hits;
    ASSERT_EQ(got.size(), expected.size()) << qi;
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].ordinal, expected[i].ordinal) << qi << " rank " << i;
      EXPECT_EQ(got[i].score, expected[i].score) << qi << " rank " << i;
      EXPECT_EQ(got[i].docid, docs[expected[i].ordinal].docid);
    }
  }
}

TEST(Search, MonotoneInK) {
  constexpr std::size_t kVocab = 40;
  const auto docs = random_corpus(300, kVocab, 6);
  const auto index = InvertedIndex::build(docs, kVocab);
  std::mt19937_64 rng(7);
  for (int qi = 0; qi < 10; ++qi) {
    const auto query = random_query(kVocab, rng);
    const auto big = search(index, query, 60).hits;
    for (std::size_t k = 0; k < 60; ++k) {
      const auto small = search(index, query, k).hits;
      ASSERT_LE(small.size(), k);
      for (std::size_t i = 0; i < small.size(); ++i) EXPECT_EQ(small[i].ordinal, big[i].ordinal);
    }
  }
}

TEST(Search, IntegerRankingEqualsQuantizedFloatRanking) {
  constexpr std::size_t kVocab = 60;
  const auto docs = random_corpus(1000, kVocab, 8);
  const auto index = InvertedIndex::build(docs, kVocab);
  std::mt19937_64 rng(9);
  const auto query = random_query(kVocab, rng);
  const auto hits = search(index, query, 1000).hits;
  for (std::size_t i = 1; i < hits.size(); ++i) {
    EXPECT_GE(hits[i - 1].float_score, hits[i].float_score);
    EXPECT_EQ(hits[i - 1].score > hits[i].score, hits[i - 1].float_score > hits[i].float_score);
  }
}

TEST(Persistence, SaveLoadRoundTrip) {
  const auto docs = random_corpus(100, 30, 10);
  const auto index = InvertedIndex::build(docs, 30);
  const auto path = temp_path("rt.ftek");
  index.save(path);
  const auto back = InvertedIndex::load(path);
  EXPECT_EQ(back, index);
  const auto path2 = temp_path("rt2.ftek");
  back.save(path2);
  EXPECT_EQ(read_file_bytes(path), read_file_bytes(path2));
}

TEST(Persistence, FaultInjection) {
  const auto docs = random_corpus(50, 20, 11);
  const auto index = InvertedIndex::build(docs, 20);
  const auto bytes = index.serialize();

  auto flipped = bytes;
  flipped[1] ^= 0x20;
  try {
    InvertedIndex::deserialize(flipped, "mem");
    FAIL();
  } catch (const CorruptDataError& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos) << e.what();
  }

  // Header is 4 + 4 + 8 + 8 + 8 bytes, then (V + 1) offsets.
  const std::size_t postings_start = 32 + 21 * 8;
  const std::size_t cut = postings_start + index.posting_bytes(4).size() / 2 + 1;
  try {
    InvertedIndex::deserialize(std::span(bytes).first(cut), "mem");
    FAIL();
  } catch (const CorruptDataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("term"), std::string::npos) << msg;
    EXPECT_NE(msg.find("offset"), std::string::npos) << msg;
  }

  // Every truncation point is rejected cleanly.
  for (std::size_t n = 0; n < bytes.size(); n += 7) {
    EXPECT_THROW(InvertedIndex::deserialize(std::span(bytes).first(n), "mem"), CorruptDataError) << n;
  }

  // Non-monotone offsets.
  auto shuffled = bytes;
  std::swap_ranges(shuffled.begin() + 32 + 8 * 5, shuffled.begin() + 32 + 8 * 6,
                   shuffled.begin() + 32 + 8 * 15);
  EXPECT_THROW(InvertedIndex::deserialize(shuffled, "mem"), CorruptDataError);
  EXPECT_THROW(InvertedIndex::load(temp_path("missing.ftek")), IoError);
}

TEST(WeightStream, LineRoundTrip) {
  const DocumentWeights doc{"p1", weights({{5, 0.25}, {12, 1.5}})};
  std::ostringstream out;
  write_weight_line(out, doc);
  EXPECT_EQ(out.str(), "{\"docid\":\"p1\",\"weights\":{\"5\":0.25,\"12\":1.5}}\n");
  const auto back = parse_weight_line(out.str());
  EXPECT_EQ(back.docid, "p1");
  EXPECT_EQ(back.weights.entries, doc.weights.entries);
  EXPECT_THROW(parse_weight_line("{\"docid\":\"p\",\"weights\":{\"x\":1}}"), CorruptDataError);
  EXPECT_THROW(parse_weight_line("{\"docid\":\"p\",\"weights\":{\"5\":-1}}"), CorruptDataError);
  EXPECT_THROW(parse_weight_line("not json"), CorruptDataError);
}
