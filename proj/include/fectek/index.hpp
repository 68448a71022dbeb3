#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "fectek/model.hpp"
#include "fectek/vocab.hpp"

namespace fectek {

inline constexpr int kImpactLevels = 256;

// One quantization step: weight w maps to round(w / scale), so the largest
// observed weight maps to 255.
struct QuantizationParams {
  double scale = 1.0;

  // Sentinel scale 1.0 when max_weight is not positive.
  static QuantizationParams from_max(double max_weight);
  static QuantizationParams for_vector(const TermWeightVector& weights);
};

struct QuantizedTerm {
  TokenId term;
  std::uint8_t impact;

  bool operator==(const QuantizedTerm&) const = default;
};

// Round half away from zero, clamped to [0, 255].
std::uint8_t quantize_weight(double weight, const QuantizationParams& params);

// Entries whose impact rounds to 0 are dropped.
std::vector<QuantizedTerm> quantize(const TermWeightVector& weights,
                                    const QuantizationParams& params);

// LEB128-style base-128 varints.
void put_varint(std::vector<std::uint8_t>& out, std::uint64_t value);
// Advances pos; returns false when the encoding runs past `end` or exceeds
// 64 bits.
bool get_varint(std::span<const std::uint8_t> bytes, std::size_t& pos, std::size_t end,
                std::uint64_t& value);

struct Posting {
  std::uint32_t ordinal;
  std::uint8_t impact;

  bool operator==(const Posting&) const = default;
};

// Gap-encoded postings: for each entry the varint gap from the previous
// ordinal (the first gap is the ordinal itself), then the u8 impact.
std::vector<std::uint8_t> encode_postings(std::span<const Posting> postings);
std::vector<Posting> decode_postings(std::span<const std::uint8_t> bytes);

struct DocumentWeights {
  std::string docid;
  TermWeightVector weights;
};

// Immutable after construction; search is safe from many threads.
class InvertedIndex {
 public:
  // Two passes over the source: the first finds the global maximum doc-side
  // weight, the second quantizes and accumulates postings. `source` must
  // replay the same documents in the same order on each call.
  using DocumentSource = std::function<void(const std::function<void(const DocumentWeights&)>&)>;
  static InvertedIndex build(const DocumentSource& source, std::size_t vocab_size);
  static InvertedIndex build(std::span<const DocumentWeights> docs, std::size_t vocab_size);

  std::size_t vocab_size() const { return offsets_.size() - 1; }
  std::size_t doc_count() const { return docids_.size(); }
  double doc_scale() const { return doc_scale_; }
  const std::string& docid(std::size_t ordinal) const { return docids_.at(ordinal); }

  std::span<const std::uint8_t> posting_bytes(TokenId term) const;
  std::vector<Posting> postings(TokenId term) const;

  std::vector<std::uint8_t> serialize() const;
  static InvertedIndex deserialize(std::span<const std::uint8_t> bytes, const std::string& source);
  void save(const std::filesystem::path& path) const;
  static InvertedIndex load(const std::filesystem::path& path);

  bool operator==(const InvertedIndex&) const = default;

 private:
  InvertedIndex() = default;

  double doc_scale_ = 1.0;
  std::vector<std::uint64_t> offsets_{0};
  std::vector<std::uint8_t> postings_;
  std::vector<std::string> docids_;
};

struct SearchHit {
  std::string docid;
  std::uint32_t ordinal = 0;
  std::uint64_t score = 0;   // sum of query impact * doc impact
  double float_score = 0.0;  // score * query scale * doc scale
};

// Non-increasing by integer score; ties by ascending ordinal.
struct SearchResult {
  std::vector<SearchHit> hits;
};

// Exhaustive document-at-a-time traversal with a bounded min-heap.
SearchResult search(const InvertedIndex& index, std::span<const QuantizedTerm> query,
                    double query_scale, std::size_t k);

// Quantizes the query with its own per-query scale, then searches.
SearchResult search(const InvertedIndex& index, const TermWeightVector& query, std::size_t k);

// JSON lines {"docid": str, "weights": {"<term-id>": float, ...}}.
void write_weight_line(std::ostream& out, const DocumentWeights& doc);
DocumentWeights parse_weight_line(const std::string& line);
void for_each_weight_line(const std::filesystem::path& path,
                          const std::function<void(const DocumentWeights&)>& fn);

}  // namespace fectek
