#include "fectek/index.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <queue>
#include <unordered_set>

#include "fectek/binary_io.hpp"
#include "fectek/error.hpp"
#include "json.hpp"

namespace fectek {

namespace {

constexpr std::string_view kIndexMagic = "FTEK";
constexpr std::uint32_t kIndexVersion = 1;

}  // namespace

QuantizationParams QuantizationParams::from_max(double max_weight) {
  if (!(max_weight > 0.0)) return {1.0};
  return {max_weight / static_cast<double>(kImpactLevels - 1)};
}

QuantizationParams QuantizationParams::for_vector(const TermWeightVector& weights) {
  double hi = 0.0;
  for (const auto& [term, w] : weights.entries) hi = std::max(hi, w);
  return from_max(hi);
}

std::uint8_t quantize_weight(double weight, const QuantizationParams& params) {
  // std::round rounds halfway cases away from zero.
  const double level = std::round(weight / params.scale);
  return static_cast<std::uint8_t>(std::clamp(level, 0.0, 255.0));
}

std::vector<QuantizedTerm> quantize(const TermWeightVector& weights,
                                    const QuantizationParams& params) {
  std::vector<QuantizedTerm> out;
  out.reserve(weights.entries.size());
  for (const auto& [term, w] : weights.entries) {
    const std::uint8_t impact = quantize_weight(w, params);
    if (impact != 0) out.push_back({term, impact});
  }
  return out;
}

void put_varint(std::vector<std::uint8_t>& out, std::uint64_t value) {
  while (value >= 0x80) {
    out.push_back(static_cast<std::uint8_t>(value | 0x80));
    value >>= 7;
  }
  out.push_back(static_cast<std::uint8_t>(value));
}

bool get_varint(std::span<const std::uint8_t> bytes, std::size_t& pos, std::size_t end,
                std::uint64_t& value) {
  value = 0;
  for (int shift = 0; shift < 64; shift += 7) {
    if (pos >= end) return false;
    const std::uint8_t byte = bytes[pos++];
    value |= static_cast<std::uint64_t>(byte & 0x7f) << shift;
    if (!(byte & 0x80)) return true;
  }
  return false;
}

std::vector<std::uint8_t> encode_postings(std::span<const Posting> postings) {
  std::vector<std::uint8_t> out;
  std::uint64_t previous = 0;
  for (std::size_t i = 0; i < postings.size(); ++i) {
    const std::uint64_t ord = postings[i].ordinal;
    put_varint(out, i == 0 ? ord : ord - previous);
    out.push_back(postings[i].impact);
    previous = ord;
  }
  return out;
}

std::vector<Posting> decode_postings(std::span<const std::uint8_t> bytes) {
  std::vector<Posting> out;
  std::size_t pos = 0;
  std::uint64_t ordinal = 0;
  while (pos < bytes.size()) {
    std::uint64_t gap = 0;
    if (!get_varint(bytes, pos, bytes.size(), gap) || pos >= bytes.size()) {
      throw CorruptDataError("posting list truncated at byte " + std::to_string(pos));
    }
    ordinal = out.empty() ? gap : ordinal + gap;
    out.push_back({static_cast<std::uint32_t>(ordinal), bytes[pos++]});
  }
  return out;
}

InvertedIndex InvertedIndex::build(std::span<const DocumentWeights> docs, std::size_t vocab_size) {
  return build(
      [docs](const std::function<void(const DocumentWeights&)>& fn) {
        for (const auto& d : docs) fn(d);
      },
      vocab_size);
}

InvertedIndex InvertedIndex::build(const DocumentSource& source, std::size_t vocab_size) {
  double max_weight = 0.0;
  source([&](const DocumentWeights& doc) {
    for (const auto& [term, w] : doc.weights.entries) {
      if (term >= vocab_size) {
        throw CorruptDataError("document '" + doc.docid + "' has term id " +
                               std::to_string(term) + " outside vocabulary of size " +
                               std::to_string(vocab_size));
      }
      if (!(w >= 0.0) || !std::isfinite(w)) {
        throw CorruptDataError("document '" + doc.docid + "' has invalid weight for term " +
                               std::to_string(term));
      }
      max_weight = std::max(max_weight, w);
    }
  });
  const QuantizationParams params = QuantizationParams::from_max(max_weight);

  std::vector<std::vector<Posting>> lists(vocab_size);
  std::unordered_set<std::string> seen;
  InvertedIndex index;
  index.doc_scale_ = params.scale;
  source([&](const DocumentWeights& doc) {
    if (!seen.insert(doc.docid).second) {
      throw CorruptDataError("duplicate docid '" + doc.docid + "'");
    }
    const auto ordinal = static_cast<std::uint32_t>(index.docids_.size());
    index.docids_.push_back(doc.docid);
    for (const QuantizedTerm& q : quantize(doc.weights, params)) {
      lists[q.term].push_back({ordinal, q.impact});
    }
  });
  index.offsets_.assign(1, 0);
  for (const auto& list : lists) {
    const auto bytes = encode_postings(list);
    index.postings_.insert(index.postings_.end(), bytes.begin(), bytes.end());
    index.offsets_.push_back(index.postings_.size());
  }
  return index;
}

std::span<const std::uint8_t> InvertedIndex::posting_bytes(TokenId term) const {
  if (term >= vocab_size()) return {};
  return std::span<const std::uint8_t>(postings_).subspan(offsets_[term],
                                                          offsets_[term + 1] - offsets_[term]);
}

std::vector<Posting> InvertedIndex::postings(TokenId term) const {
  return decode_postings(posting_bytes(term));
}

std::vector<std::uint8_t> InvertedIndex::serialize() const {
  ByteWriter out;
  out.raw(kIndexMagic);
  out.u32(kIndexVersion);
  out.u64(vocab_size());
  out.u64(doc_count());
  out.f64(doc_scale_);
  for (std::uint64_t off : offsets_) out.u64(off);
  out.raw(postings_);
  for (const auto& id : docids_) {
    out.u32(static_cast<std::uint32_t>(id.size()));
    out.raw(id);
  }
  return out.take();
}

InvertedIndex InvertedIndex::deserialize(std::span<const std::uint8_t> bytes,
                                         const std::string& source) {
  ByteReader in(bytes, source);
  if (in.string(4, "magic") != kIndexMagic) in.fail("bad magic (expected FTEK)");
  const std::uint32_t version = in.u32("version");
  if (version != kIndexVersion) in.fail("unsupported version " + std::to_string(version));
  const std::uint64_t vocab = in.u64("vocabulary size");
  const std::uint64_t docs = in.u64("document count");
  InvertedIndex index;
  index.doc_scale_ = in.f64("doc scale");
  if (!(index.doc_scale_ > 0.0) || !std::isfinite(index.doc_scale_)) in.fail("invalid doc scale");
  if (vocab >= in.remaining() / 8) in.fail("offset table truncated");
  index.offsets_.resize(vocab + 1);
  for (auto& off : index.offsets_) off = in.u64("offset table");
  if (index.offsets_[0] != 0) in.fail("offset table does not start at 0");
  for (std::size_t t = 0; t < vocab; ++t) {
    if (index.offsets_[t + 1] < index.offsets_[t]) {
      in.fail("offset table not monotone at term " + std::to_string(t));
    }
  }
  const std::uint64_t region = index.offsets_[vocab];
  if (region > in.remaining()) {
    std::size_t term = 0;
    while (term < vocab && index.offsets_[term + 1] <= in.remaining()) ++term;
    in.fail("postings region truncated: term " + std::to_string(term) + " at offset " +
            std::to_string(index.offsets_[term]) + " ends past the available " +
            std::to_string(in.remaining()) + " bytes");
  }
  const auto region_bytes = in.raw(region, "postings region");
  index.postings_.assign(region_bytes.begin(), region_bytes.end());
  for (std::size_t t = 0; t < vocab; ++t) {
    std::vector<Posting> list;
    try {
      list = index.postings(static_cast<TokenId>(t));
    } catch (const CorruptDataError& e) {
      in.fail("term " + std::to_string(t) + " at offset " + std::to_string(index.offsets_[t]) +
              ": " + e.what());
    }
    for (std::size_t i = 0; i < list.size(); ++i) {
      if (list[i].ordinal >= docs || list[i].impact == 0 ||
          (i > 0 && list[i].ordinal <= list[i - 1].ordinal)) {
        in.fail("term " + std::to_string(t) + " at offset " +
                std::to_string(index.offsets_[t]) + ": invalid posting " + std::to_string(i));
      }
    }
  }
  if (docs > in.remaining() / 4) in.fail("docid table truncated");
  std::unordered_set<std::string> seen;
  index.docids_.reserve(docs);
  for (std::uint64_t d = 0; d < docs; ++d) {
    const std::uint32_t len = in.u32("docid length");
    std::string id = in.string(len, "docid");
    if (!seen.insert(id).second) in.fail("duplicate docid '" + id + "'");
    index.docids_.push_back(std::move(id));
  }
  if (in.remaining() != 0) in.fail("trailing bytes after docid table");
  return index;
}

void InvertedIndex::save(const std::filesystem::path& path) const {
  write_file_bytes(path, serialize());
}

InvertedIndex InvertedIndex::load(const std::filesystem::path& path) {
  return deserialize(read_file_bytes(path), path.string());
}

namespace {

struct Cursor {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;
  std::uint64_t ordinal = 0;
  std::uint8_t impact = 0;
  std::uint64_t weight = 0;  // query impact
  bool started = false;
  bool done = false;

  void next() {
    if (pos >= bytes.size()) {
      done = true;
      return;
    }
    std::uint64_t gap = 0;
    get_varint(bytes, pos, bytes.size(), gap);
    ordinal = started ? ordinal + gap : gap;
    started = true;
    impact = bytes[pos++];
  }
};

struct Candidate {
  std::uint64_t score;
  std::uint32_t ordinal;
};

// Orders "better" first: higher score, then lower ordinal.
bool better(const Candidate& a, const Candidate& b) {
  return a.score != b.score ? a.score > b.score : a.ordinal < b.ordinal;
}

}  // namespace

SearchResult search(const InvertedIndex& index, std::span<const QuantizedTerm> query,
                    double query_scale, std::size_t k) {
  SearchResult result;
  if (k == 0) return result;
  std::vector<Cursor> cursors;
  for (const QuantizedTerm& q : query) {
    if (q.impact == 0) continue;
    Cursor c;
    c.bytes = index.posting_bytes(q.term);
    c.weight = q.impact;
    c.next();
    if (!c.done) cursors.push_back(c);
  }
  // Top of the heap is the worst retained candidate.
  std::priority_queue<Candidate, std::vector<Candidate>, decltype(&better)> heap(&better);
  while (true) {
    std::uint64_t current = UINT64_MAX;
    for (const Cursor& c : cursors) {
      if (!c.done) current = std::min(current, c.ordinal);
    }
    if (current == UINT64_MAX) break;
    std::uint64_t score = 0;
    for (Cursor& c : cursors) {
      if (!c.done && c.ordinal == current) {
        score += c.weight * c.impact;
        c.next();
      }
    }
    const Candidate cand{score, static_cast<std::uint32_t>(current)};
    if (heap.size() < k) {
      heap.push(cand);
    } else if (better(cand, heap.top())) {
      heap.pop();
      heap.push(cand);
    }
  }
  std::vector<Candidate> ranked;
  ranked.reserve(heap.size());
  while (!heap.empty()) {
    ranked.push_back(heap.top());
    heap.pop();
  }
  std::reverse(ranked.begin(), ranked.end());
  for (const Candidate& c : ranked) {
    result.hits.push_back({index.docid(c.ordinal), c.ordinal, c.score,
                           static_cast<double>(c.score) * query_scale * index.doc_scale()});
  }
  return result;
}

SearchResult search(const InvertedIndex& index, const TermWeightVector& query, std::size_t k) {
  const QuantizationParams params = QuantizationParams::for_vector(query);
  return search(index, quantize(query, params), params.scale, k);
}

void write_weight_line(std::ostream& out, const DocumentWeights& doc) {
  nlohmann::ordered_json weights = nlohmann::ordered_json::object();
  for (const auto& [term, w] : doc.weights.entries) weights[std::to_string(term)] = w;
  nlohmann::ordered_json line;
  line["docid"] = doc.docid;
  line["weights"] = std::move(weights);
  out << line.dump() << '\n';
}

DocumentWeights parse_weight_line(const std::string& line) {
  DocumentWeights doc;
  try {
    const auto j = nlohmann::json::parse(line);
    doc.docid = j.at("docid").get<std::string>();
    for (const auto& [key, value] : j.at("weights").items()) {
      std::size_t used = 0;
      const unsigned long term = std::stoul(key, &used);
      if (used != key.size() || term > UINT32_MAX) throw CorruptDataError("bad term id '" + key + "'");
      const double w = value.get<double>();
      if (w > 0.0) doc.weights.entries.emplace_back(static_cast<TokenId>(term), w);
      else if (!(w == 0.0)) throw CorruptDataError("negative or invalid weight for term " + key);
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptDataError(std::string("malformed weight line: ") + e.what());
  } catch (const std::logic_error& e) {
    throw CorruptDataError(std::string("malformed weight line: ") + e.what());
  }
  std::sort(doc.weights.entries.begin(), doc.weights.entries.end());
  for (std::size_t i = 1; i < doc.weights.entries.size(); ++i) {
    if (doc.weights.entries[i].first == doc.weights.entries[i - 1].first) {
      throw CorruptDataError("duplicate term id in weights of '" + doc.docid + "'");
    }
  }
  return doc;
}

void for_each_weight_line(const std::filesystem::path& path,
                          const std::function<void(const DocumentWeights&)>& fn) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open weight stream " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    DocumentWeights doc;
    try {
      doc = parse_weight_line(line);
    } catch (const CorruptDataError& e) {
      throw CorruptDataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    fn(doc);
  }
}

}  // namespace fectek
