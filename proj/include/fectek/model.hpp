#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fectek/autograd.hpp"
#include "fectek/encoder.hpp"
#include "fectek/parameters.hpp"
#include "fectek/vocab.hpp"

namespace fectek {

// How repeated occurrences of one term collapse into a single weight.
enum class Aggregation { kMax, kSum };

std::string to_string(Aggregation aggregation);
Aggregation parse_aggregation(const std::string& name);

inline constexpr std::size_t kFcmReduction = 16;

// Squeeze-excitation bottleneck: d -> max(1, d/16) -> d.
struct FcmParams {
  Linear fc1;
  Linear fc2;

  static std::size_t bottleneck(std::size_t d);
};

struct ProjectorParams {
  ag::Tensor w1;  // (d) term-weight head
  ag::Tensor b1;  // (1)
  ag::Tensor w2;  // (d) term-probability head
  ag::Tensor b2;  // (1)
};

// Sparse, non-negative term weights for one text, sorted by term id.
struct TermWeightVector {
  std::vector<std::pair<TokenId, double>> entries;
  std::size_t source_length = 0;

  double weight(TokenId term) const;
};

// Per-position binary targets; mask is false for specials, [UNK] and pads.
struct TermLabels {
  std::vector<double> labels;
  std::vector<bool> mask;
};

// A token sequence with differentiable per-position term weights.
struct WeightedText {
  std::span<const TokenId> ids;
  ag::Tensor position_weights;  // (len)
};

// Positions that may carry weights and labels: real, non-[UNK] tokens.
bool is_term_position(TokenId id);

// g = sigmoid(fc2(relu(fc1(mean of real rows of H)))); returns H * g with
// the gate broadcast over positions.
ag::Tensor fcm_forward(const ag::Tensor& hidden, const std::vector<bool>& real_positions,
                       const FcmParams& params);

// log(1 + relu(w1 . f_i + b1)) for every position of F; shape (len).
ag::Tensor position_term_weights(const ag::Tensor& features, const ag::Tensor& w1,
                                 const ag::Tensor& b1);

TermWeightVector term_weight(const ag::Tensor& features, std::span<const TokenId> ids,
                             const ag::Tensor& w1, const ag::Tensor& b1,
                             Aggregation aggregation = Aggregation::kMax);

// Collapses per-position weights into a term vector, dropping non-term
// positions and zero weights.
TermWeightVector collapse_weights(std::span<const TokenId> ids,
                                  std::span<const double> position_weights,
                                  Aggregation aggregation);

// sigmoid(w2 . h_i + b2) per position; shape (len).
ag::Tensor term_probability(const ag::Tensor& hidden, const ag::Tensor& w2,
                            const ag::Tensor& b2);

std::pair<TermLabels, TermLabels> indicator_labels(std::span<const TokenId> query_ids,
                                                   std::span<const TokenId> passage_ids);

// Sum over shared terms of the product of weights.
double match_score(const TermWeightVector& query, const TermWeightVector& passage);

// Differentiable counterpart over per-position weights.
ag::Tensor match_score(const WeightedText& query, const WeightedText& passage,
                       Aggregation aggregation);

// -log softmax of the positive's score over {positive} + negatives.
ag::Tensor text_level_loss(const WeightedText& query, const WeightedText& positive,
                           std::span<const WeightedText> negatives, Aggregation aggregation);

// Masked-mean binary cross-entropy for one side.
ag::Tensor term_level_loss(const ag::Tensor& probs, const TermLabels& labels);

// Query side plus positive-passage side.
ag::Tensor term_level_loss(const ag::Tensor& query_probs, const TermLabels& query_labels,
                           const ag::Tensor& passage_probs,
                           const TermLabels& passage_labels);

struct ModelConfig {
  EncoderConfig encoder;
  bool enable_fcm = true;
  Aggregation aggregation = Aggregation::kMax;
};

struct LossConfig {
  bool text_level = true;
  bool term_level = true;

  void validate() const;
};

// A training triple after tokenization and truncation.
struct EncodedTriple {
  std::vector<TokenId> query;
  std::vector<TokenId> positive;
  std::vector<std::vector<TokenId>> negatives;
};

struct LossBreakdown {
  ag::Tensor total;
  double text_level = 0.0;
  double term_level = 0.0;
};

class FecTekModel {
 public:
  FecTekModel(const ModelConfig& config, std::size_t vocab_size, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const Encoder& encoder() const { return encoder_; }
  const FcmParams& fcm() const { return fcm_; }
  const ProjectorParams& projector() const { return projector_; }

  // encoder, fcm, projector1, projector2 groups in a fixed order.
  ParameterList parameters() const;

  // Term-weight branch input: F when FCM is enabled, H otherwise.
  ag::Tensor features(const EncodedSequence& seq) const;

  // Forward pass producing differentiable per-position weights.
  ag::Tensor position_weights(const EncodedSequence& seq) const;

  // Inference (no graph recording); safe to call concurrently.
  TermWeightVector encode_terms(std::span<const TokenId> ids) const;

  // Mean over triples of text-level + term-level losses.
  LossBreakdown total_loss(std::span<const EncodedTriple> batch,
                           const LossConfig& losses) const;

  void save(const std::filesystem::path& path) const;
  static FecTekModel load(const std::filesystem::path& path);

 private:
  ModelConfig config_;
  Encoder encoder_;
  FcmParams fcm_;
  ProjectorParams projector_;
};

// FTCK container: ordered named f64 tensors.
struct CheckpointEntry {
  std::string name;
  ag::Shape shape;
  std::vector<double> values;

  bool operator==(const CheckpointEntry&) const = default;
};

void write_checkpoint(const std::filesystem::path& path,
                      const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

}  // namespace fectek
