#include "fectek/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <unordered_set>

#include "fectek/binary_io.hpp"
#include "fectek/error.hpp"

namespace fectek {

namespace {

constexpr double kInitStd = 0.02;
constexpr std::string_view kCheckpointMagic = "FTCK";
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr const char* kConfigEntry = "config";

// Maps each shared term to the positions where it occurs in each text.
struct SharedTerms {
  std::vector<std::vector<std::size_t>> query_groups;
  std::vector<std::vector<std::size_t>> passage_groups;
};

std::map<TokenId, std::vector<std::size_t>> term_positions(std::span<const TokenId> ids) {
  std::map<TokenId, std::vector<std::size_t>> positions;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (is_term_position(ids[i])) positions[ids[i]].push_back(i);
  }
  return positions;
}

SharedTerms shared_terms(std::span<const TokenId> query, std::span<const TokenId> passage) {
  const auto q = term_positions(query);
  const auto p = term_positions(passage);
  SharedTerms shared;
  auto qi = q.begin();
  auto pi = p.begin();
  while (qi != q.end() && pi != p.end()) {
    if (qi->first < pi->first) {
      ++qi;
    } else if (pi->first < qi->first) {
      ++pi;
    } else {
      shared.query_groups.push_back(qi->second);
      shared.passage_groups.push_back(pi->second);
      ++qi;
      ++pi;
    }
  }
  return shared;
}

ag::SegmentReduce to_segment_reduce(Aggregation aggregation) {
  return aggregation == Aggregation::kMax ? ag::SegmentReduce::kMax : ag::SegmentReduce::kSum;
}

// w . x_i + b for every row of a (len, d) tensor; result shape (len).
ag::Tensor row_projection(const ag::Tensor& x, const ag::Tensor& w, const ag::Tensor& b) {
  if (x.rank() != 2 || w.numel() != x.dim(1) || b.numel() != 1) {
    throw DimensionError("projector weight " + ag::shape_str(w.shape()) + " / bias " +
                         ag::shape_str(b.shape()) + " do not fit features " +
                         ag::shape_str(x.shape()));
  }
  const ag::Tensor column = ag::reshape(w, {w.numel(), 1});
  const ag::Tensor projected = ag::add(ag::matmul(x, column), b);
  return ag::reshape(projected, {x.dim(0)});
}

CheckpointEntry to_entry(const std::string& name, const ag::Tensor& t) {
  return {name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())};
}

}  // namespace

std::string to_string(Aggregation aggregation) {
  return aggregation == Aggregation::kMax ? "max" : "sum";
}

Aggregation parse_aggregation(const std::string& name) {
  if (name == "max") return Aggregation::kMax;
  if (name == "sum") return Aggregation::kSum;
  throw ConfigError("unknown aggregation '" + name + "' (expected max or sum)");
}

std::size_t FcmParams::bottleneck(std::size_t d) { return std::max<std::size_t>(1, d / kFcmReduction); }

double TermWeightVector::weight(TokenId term) const {
  const auto it = std::lower_bound(entries.begin(), entries.end(), term,
                                   [](const auto& e, TokenId t) { return e.first < t; });
  return it != entries.end() && it->first == term ? it->second : 0.0;
}

bool is_term_position(TokenId id) { return !is_special(id); }

ag::Tensor fcm_forward(const ag::Tensor& hidden, const std::vector<bool>& real_positions,
                       const FcmParams& params) {
  if (hidden.rank() != 2) {
    throw DimensionError("fcm_forward: expected (len, d) input, got " +
                         ag::shape_str(hidden.shape()));
  }
  const std::size_t d = hidden.dim(1);
  if (params.fc1.weight.rank() != 2 || params.fc1.weight.dim(0) != d ||
      params.fc2.weight.rank() != 2 || params.fc2.weight.dim(1) != d) {
    throw DimensionError("fcm_forward: parameters " + ag::shape_str(params.fc1.weight.shape()) +
                         " / " + ag::shape_str(params.fc2.weight.shape()) +
                         " do not match width " + std::to_string(d));
  }
  if (real_positions.size() != hidden.dim(0)) {
    throw DimensionError("fcm_forward: position mask length mismatch");
  }
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < real_positions.size(); ++i) {
    if (real_positions[i]) rows.push_back(i);
  }
  if (rows.empty()) throw DimensionError("fcm_forward: no real positions to pool");
  // Squeeze over positions, excite through the bottleneck, gate the channels.
  const ag::Tensor pooled = ag::reshape(ag::reduce_mean(ag::gather_rows(hidden, rows), 0), {1, d});
  const ag::Tensor gate = ag::sigmoid(params.fc2(ag::relu(params.fc1(pooled))));
  return ag::mul(hidden, gate);
}

ag::Tensor position_term_weights(const ag::Tensor& features, const ag::Tensor& w1,
                                 const ag::Tensor& b1) {
  return ag::log1p(ag::relu(row_projection(features, w1, b1)));
}

TermWeightVector collapse_weights(std::span<const TokenId> ids,
                                  std::span<const double> position_weights,
                                  Aggregation aggregation) {
  if (ids.size() != position_weights.size()) {
    throw DimensionError("collapse_weights: " + std::to_string(ids.size()) + " ids but " +
                         std::to_string(position_weights.size()) + " weights");
  }
  std::map<TokenId, double> merged;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!is_term_position(ids[i])) continue;
    const double w = position_weights[i];
    auto [it, inserted] = merged.emplace(ids[i], w);
    if (!inserted) {
      it->second = aggregation == Aggregation::kMax ? std::max(it->second, w) : it->second + w;
    }
  }
  TermWeightVector out;
  out.source_length = ids.size();
  for (const auto& [term, w] : merged) {
    if (w > 0.0) out.entries.emplace_back(term, w);
  }
  return out;
}

TermWeightVector term_weight(const ag::Tensor& features, std::span<const TokenId> ids,
                             const ag::Tensor& w1, const ag::Tensor& b1,
                             Aggregation aggregation) {
  const ag::Tensor weights = position_term_weights(features, w1, b1);
  return collapse_weights(ids, weights.data(), aggregation);
}

ag::Tensor term_probability(const ag::Tensor& hidden, const ag::Tensor& w2,
                            const ag::Tensor& b2) {
  return ag::sigmoid(row_projection(hidden, w2, b2));
}

std::pair<TermLabels, TermLabels> indicator_labels(std::span<const TokenId> query_ids,
                                                   std::span<const TokenId> passage_ids) {
  const auto label = [](std::span<const TokenId> self, std::span<const TokenId> other) {
    std::unordered_set<TokenId> other_terms;
    for (TokenId id : other) {
      if (is_term_position(id)) other_terms.insert(id);
    }
    TermLabels out;
    out.labels.resize(self.size(), 0.0);
    out.mask.resize(self.size(), false);
    for (std::size_t i = 0; i < self.size(); ++i) {
      if (!is_term_position(self[i])) continue;
      out.mask[i] = true;
      out.labels[i] = other_terms.count(self[i]) ? 1.0 : 0.0;
    }
    return out;
  };
  return {label(query_ids, passage_ids), label(passage_ids, query_ids)};
}

double match_score(const TermWeightVector& query, const TermWeightVector& passage) {
  double score = 0.0;
  auto qi = query.entries.begin();
  auto pi = passage.entries.begin();
  while (qi != query.entries.end() && pi != passage.entries.end()) {
    if (qi->first < pi->first) {
      ++qi;
    } else if (pi->first < qi->first) {
      ++pi;
    } else {
      score += qi->second * pi->second;
      ++qi;
      ++pi;
    }
  }
  return score;
}

ag::Tensor match_score(const WeightedText& query, const WeightedText& passage,
                       Aggregation aggregation) {
  if (query.position_weights.numel() != query.ids.size() ||
      passage.position_weights.numel() != passage.ids.size()) {
    throw DimensionError("match_score: weights do not align with token ids");
  }
  const SharedTerms shared = shared_terms(query.ids, passage.ids);
  if (shared.query_groups.empty()) return ag::Tensor::scalar(0.0);
  const auto mode = to_segment_reduce(aggregation);
  const ag::Tensor q = ag::segment_reduce(query.position_weights, shared.query_groups, mode);
  const ag::Tensor p = ag::segment_reduce(passage.position_weights, shared.passage_groups, mode);
  return ag::sum(ag::mul(q, p));
}

ag::Tensor text_level_loss(const WeightedText& query, const WeightedText& positive,
                           std::span<const WeightedText> negatives, Aggregation aggregation) {
  std::vector<ag::Tensor> scores;
  scores.reserve(1 + negatives.size());
  scores.push_back(match_score(query, positive, aggregation));
  for (const WeightedText& negative : negatives) {
    scores.push_back(match_score(query, negative, aggregation));
  }
  return ag::softmax_nll(ag::stack(scores), 0);
}

ag::Tensor term_level_loss(const ag::Tensor& probs, const TermLabels& labels) {
  return ag::binary_cross_entropy(probs, labels.labels, labels.mask);
}

ag::Tensor term_level_loss(const ag::Tensor& query_probs, const TermLabels& query_labels,
                           const ag::Tensor& passage_probs,
                           const TermLabels& passage_labels) {
  return ag::add(term_level_loss(query_probs, query_labels),
                 term_level_loss(passage_probs, passage_labels));
}

void LossConfig::validate() const {
  if (!text_level && !term_level) {
    throw ConfigError("at least one of the text-level and term-level losses must be enabled");
  }
}

FecTekModel::FecTekModel(const ModelConfig& config, std::size_t vocab_size, std::uint64_t seed)
    : config_(config), encoder_(config.encoder, vocab_size, seed) {
  // Head parameters draw from a stream separate from the encoder's.
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const std::size_t d = config_.encoder.d;
  const std::size_t hidden = FcmParams::bottleneck(d);
  fcm_.fc1 = make_linear(d, hidden, kInitStd, rng);
  fcm_.fc2 = make_linear(hidden, d, kInitStd, rng);
  projector_.w1 = normal_tensor({d}, kInitStd, rng);
  projector_.b1 = ag::Tensor::zeros({1}, true);
  projector_.w2 = normal_tensor({d}, kInitStd, rng);
  projector_.b2 = ag::Tensor::zeros({1}, true);
}

ParameterList FecTekModel::parameters() const {
  ParameterList params = encoder_.parameters();
  params.push_back({"fcm.fc1.weight", fcm_.fc1.weight});
  params.push_back({"fcm.fc1.bias", fcm_.fc1.bias});
  params.push_back({"fcm.fc2.weight", fcm_.fc2.weight});
  params.push_back({"fcm.fc2.bias", fcm_.fc2.bias});
  params.push_back({"projector1.weight", projector_.w1});
  params.push_back({"projector1.bias", projector_.b1});
  params.push_back({"projector2.weight", projector_.w2});
  params.push_back({"projector2.bias", projector_.b2});
  return params;
}

ag::Tensor FecTekModel::features(const EncodedSequence& seq) const {
  return config_.enable_fcm ? fcm_forward(seq.hidden, seq.real_positions, fcm_) : seq.hidden;
}

ag::Tensor FecTekModel::position_weights(const EncodedSequence& seq) const {
  return position_term_weights(features(seq), projector_.w1, projector_.b1);
}

TermWeightVector FecTekModel::encode_terms(std::span<const TokenId> ids) const {
  ag::NoGradGuard no_grad;
  const EncodedSequence seq = encoder_.forward(ids);
  return collapse_weights(ids, position_weights(seq).data(), config_.aggregation);
}

LossBreakdown FecTekModel::total_loss(std::span<const EncodedTriple> batch,
                                      const LossConfig& losses) const {
  losses.validate();
  if (batch.empty()) throw ConfigError("total_loss on an empty batch");
  std::vector<ag::Tensor> per_query;
  LossBreakdown out;
  for (const EncodedTriple& triple : batch) {
    const EncodedSequence query = encoder_.forward(triple.query);
    const EncodedSequence positive = encoder_.forward(triple.positive);
    std::vector<ag::Tensor> parts;
    if (losses.text_level) {
      std::vector<EncodedSequence> negative_seqs;
      negative_seqs.reserve(triple.negatives.size());
      for (const auto& ids : triple.negatives) negative_seqs.push_back(encoder_.forward(ids));
      const WeightedText q{triple.query, position_weights(query)};
      const WeightedText p{triple.positive, position_weights(positive)};
      std::vector<WeightedText> negatives;
      negatives.reserve(negative_seqs.size());
      for (std::size_t j = 0; j < negative_seqs.size(); ++j) {
        negatives.push_back({triple.negatives[j], position_weights(negative_seqs[j])});
      }
      const ag::Tensor text = text_level_loss(q, p, negatives, config_.aggregation);
      out.text_level += text.item();
      parts.push_back(text);
    }
    if (losses.term_level) {
      const auto [query_labels, passage_labels] =
          indicator_labels(triple.query, triple.positive);
      const ag::Tensor term = term_level_loss(
          term_probability(query.hidden, projector_.w2, projector_.b2), query_labels,
          term_probability(positive.hidden, projector_.w2, projector_.b2), passage_labels);
      out.term_level += term.item();
      parts.push_back(term);
    }
    per_query.push_back(parts.size() == 1 ? parts[0] : ag::add(parts[0], parts[1]));
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.total = ag::scale(ag::sum(ag::stack(per_query)), inv);
  out.text_level *= inv;
  out.term_level *= inv;
  return out;
}

void FecTekModel::save(const std::filesystem::path& path) const {
  const EncoderConfig& e = config_.encoder;
  std::vector<CheckpointEntry> entries;
  entries.push_back({kConfigEntry,
                     {9},
                     {static_cast<double>(e.d), static_cast<double>(e.layers),
                      static_cast<double>(e.heads), static_cast<double>(e.ffn_multiplier),
                      static_cast<double>(e.max_query_len),
                      static_cast<double>(e.max_passage_len),
                      static_cast<double>(encoder_.vocab_size()),
                      config_.enable_fcm ? 1.0 : 0.0,
                      config_.aggregation == Aggregation::kMax ? 0.0 : 1.0}});
  for (const auto& [name, tensor] : parameters()) entries.push_back(to_entry(name, tensor));
  write_checkpoint(path, entries);
}

FecTekModel FecTekModel::load(const std::filesystem::path& path) {
  const auto entries = read_checkpoint(path);
  const auto corrupt = [&](const std::string& msg) {
    throw CorruptDataError(path.string() + ": " + msg);
  };
  if (entries.empty() || entries[0].name != kConfigEntry || entries[0].values.size() != 9) {
    corrupt("missing model config entry");
  }
  const auto& c = entries[0].values;
  for (double v : c) {
    if (!(v >= 0.0) || v > 4294967295.0 || v != std::floor(v)) {
      corrupt("malformed model config entry");
    }
  }
  ModelConfig config;
  config.encoder.d = static_cast<std::size_t>(c[0]);
  config.encoder.layers = static_cast<std::size_t>(c[1]);
  config.encoder.heads = static_cast<std::size_t>(c[2]);
  config.encoder.ffn_multiplier = static_cast<std::size_t>(c[3]);
  config.encoder.max_query_len = static_cast<std::size_t>(c[4]);
  config.encoder.max_passage_len = static_cast<std::size_t>(c[5]);
  config.enable_fcm = c[7] != 0.0;
  config.aggregation = c[8] == 0.0 ? Aggregation::kMax : Aggregation::kSum;
  try {
    config.encoder.validate();
  } catch (const ConfigError& e) {
    corrupt(e.what());
  }
  // Check sizes against the stored shapes before allocating, so a damaged
  // config cannot request an arbitrarily large model.
  const std::size_t vocab_size = static_cast<std::size_t>(c[6]);
  const std::size_t d = config.encoder.d;
  const std::size_t layers = config.encoder.layers;
  if (entries.size() < 11 || (entries.size() - 11) / 12 != layers ||
      (entries.size() - 11) % 12 != 0) {
    corrupt("entry count does not match the configured layer count");
  }
  const auto expect_shape = [&](std::size_t i, const ag::Shape& shape) {
    if (entries[i].shape != shape) {
      corrupt("entry '" + entries[i].name + "' " + ag::shape_str(entries[i].shape) +
              " does not match the model config");
    }
  };
  expect_shape(1, {vocab_size, d});
  expect_shape(2, {config.encoder.max_positions(), d});
  if (layers > 0) expect_shape(9, {d, config.encoder.ffn_multiplier * d});
  FecTekModel model(config, vocab_size, 0);
  ParameterList params = model.parameters();
  if (entries.size() != params.size() + 1) {
    corrupt("expected " + std::to_string(params.size()) + " parameter entries, found " +
            std::to_string(entries.size() - 1));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const CheckpointEntry& entry = entries[i + 1];
    auto& [name, tensor] = params[i];
    if (entry.name != name || entry.shape != tensor.shape()) {
      corrupt("entry '" + entry.name + "' " + ag::shape_str(entry.shape) +
              " does not match expected '" + name + "' " + ag::shape_str(tensor.shape()));
    }
    std::copy(entry.values.begin(), entry.values.end(), tensor.mutable_data().begin());
  }
  return model;
}

void write_checkpoint(const std::filesystem::path& path,
                      const std::vector<CheckpointEntry>& entries) {
  ByteWriter out;
  out.raw(kCheckpointMagic);
  out.u32(kCheckpointVersion);
  out.u64(entries.size());
  for (const CheckpointEntry& entry : entries) {
    if (ag::numel(entry.shape) != entry.values.size()) {
      throw DimensionError("checkpoint entry '" + entry.name + "' has inconsistent shape");
    }
    out.u32(static_cast<std::uint32_t>(entry.name.size()));
    out.raw(entry.name);
    out.u32(static_cast<std::uint32_t>(entry.shape.size()));
    for (std::size_t dim : entry.shape) out.u64(dim);
    for (double v : entry.values) out.f64(v);
  }
  write_file_bytes(path, out.bytes());
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader in(bytes, path.string());
  if (in.string(4, "magic") != kCheckpointMagic) in.fail("bad magic (expected FTCK)");
  const std::uint32_t version = in.u32("version");
  if (version != kCheckpointVersion) in.fail("unsupported version " + std::to_string(version));
  const std::uint64_t count = in.u64("entry count");
  std::vector<CheckpointEntry> entries;
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointEntry entry;
    const std::uint32_t name_len = in.u32("name length");
    entry.name = in.string(name_len, "name");
    const std::uint32_t rank = in.u32("rank");
    if (rank > in.remaining() / 8) in.fail("rank " + std::to_string(rank) + " exceeds file");
    std::uint64_t count_values = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const std::uint64_t dim = in.u64("dimension");
      if (dim != 0 && count_values > in.remaining() / 8 / dim) {
        in.fail("entry '" + entry.name + "' payload exceeds file size");
      }
      count_values *= dim;
      entry.shape.push_back(static_cast<std::size_t>(dim));
    }
    if (count_values > in.remaining() / 8) {
      in.fail("entry '" + entry.name + "' payload truncated");
    }
    entry.values.resize(count_values);
    for (double& v : entry.values) v = in.f64("payload");
    entries.push_back(std::move(entry));
  }
  if (in.remaining() != 0) in.fail("trailing bytes after last entry");
  return entries;
}

}  // namespace fectek
