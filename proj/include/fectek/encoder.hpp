#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fectek/autograd.hpp"
#include "fectek/parameters.hpp"
#include "fectek/vocab.hpp"

namespace fectek {

struct EncoderConfig {
  std::size_t d = 64;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ffn_multiplier = 4;
  std::size_t max_query_len = 64;
  std::size_t max_passage_len = 192;

  std::size_t max_positions() const;
  // Throws ConfigError when d is not divisible by heads or a length is < 3.
  void validate() const;
};

// Per-token context representations for one sequence.
struct EncodedSequence {
  std::vector<TokenId> token_ids;
  ag::Tensor hidden;               // (len, d)
  std::vector<bool> real_positions;  // false for [PAD]
};

// Attention probabilities captured during a forward pass, one (len, len)
// tensor per layer and head.
struct AttentionTrace {
  std::vector<ag::Tensor> weights;
};

// Token + learned positional embeddings followed by post-norm transformer
// blocks (self-attention, residual, layer norm, relu feed-forward, residual,
// layer norm). [PAD] positions are excluded as attention keys.
class Encoder {
 public:
  Encoder(const EncoderConfig& config, std::size_t vocab_size, std::uint64_t seed);

  EncodedSequence forward(std::span<const TokenId> ids,
                          AttentionTrace* trace = nullptr) const;

  const EncoderConfig& config() const { return config_; }
  std::size_t vocab_size() const { return vocab_size_; }
  // Stable order; names are prefixed "encoder.".
  ParameterList parameters() const;

 private:
  struct Block {
    Linear qkv;
    Linear out;
    ag::Tensor ln1_gain, ln1_bias;
    Linear ffn1;
    Linear ffn2;
    ag::Tensor ln2_gain, ln2_bias;
  };

  ag::Tensor attention(const Block& block, const ag::Tensor& x,
                       const std::vector<bool>& key_mask, AttentionTrace* trace) const;

  EncoderConfig config_;
  std::size_t vocab_size_;
  ag::Tensor token_embedding_;
  ag::Tensor position_embedding_;
  std::vector<Block> blocks_;
};

}  // namespace fectek
