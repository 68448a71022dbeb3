#include "fectek/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "fectek/error.hpp"

namespace fectek {

namespace {

constexpr double kInitStd = 0.02;
constexpr double kLayerNormEps = 1e-5;

}  // namespace

std::size_t EncoderConfig::max_positions() const {
  return std::max(max_query_len, max_passage_len);
}

void EncoderConfig::validate() const {
  if (d == 0 || heads == 0 || d % heads != 0) {
    throw ConfigError("encoder width " + std::to_string(d) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (max_query_len < 3 || max_passage_len < 3) {
    throw ConfigError("maximum sequence lengths must be at least 3");
  }
  if (ffn_multiplier == 0) throw ConfigError("ffn multiplier must be positive");
}

Encoder::Encoder(const EncoderConfig& config, std::size_t vocab_size, std::uint64_t seed)
    : config_(config), vocab_size_(vocab_size) {
  config_.validate();
  if (vocab_size < kNumReserved) throw ConfigError("vocabulary smaller than reserved ids");
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.d;
  token_embedding_ = normal_tensor({vocab_size, d}, kInitStd, rng);
  position_embedding_ = normal_tensor({config_.max_positions(), d}, kInitStd, rng);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    Block block{
        make_linear(d, 3 * d, kInitStd, rng),
        make_linear(d, d, kInitStd, rng),
        ag::Tensor::full({d}, 1.0, true),
        ag::Tensor::zeros({d}, true),
        make_linear(d, config_.ffn_multiplier * d, kInitStd, rng),
        make_linear(config_.ffn_multiplier * d, d, kInitStd, rng),
        ag::Tensor::full({d}, 1.0, true),
        ag::Tensor::zeros({d}, true),
    };
    blocks_.push_back(std::move(block));
  }
}

ParameterList Encoder::parameters() const {
  ParameterList params{{"encoder.token_embedding", token_embedding_},
                       {"encoder.position_embedding", position_embedding_}};
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    const std::string p = "encoder.layer" + std::to_string(l) + ".";
    params.push_back({p + "qkv.weight", b.qkv.weight});
    params.push_back({p + "qkv.bias", b.qkv.bias});
    params.push_back({p + "out.weight", b.out.weight});
    params.push_back({p + "out.bias", b.out.bias});
    params.push_back({p + "ln1.gain", b.ln1_gain});
    params.push_back({p + "ln1.bias", b.ln1_bias});
    params.push_back({p + "ffn1.weight", b.ffn1.weight});
    params.push_back({p + "ffn1.bias", b.ffn1.bias});
    params.push_back({p + "ffn2.weight", b.ffn2.weight});
    params.push_back({p + "ffn2.bias", b.ffn2.bias});
    params.push_back({p + "ln2.gain", b.ln2_gain});
    params.push_back({p + "ln2.bias", b.ln2_bias});
  }
  return params;
}

ag::Tensor Encoder::attention(const Block& block, const ag::Tensor& x,
                              const std::vector<bool>& key_mask,
                              AttentionTrace* trace) const {
  const std::size_t d = config_.d;
  const std::size_t dh = d / config_.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const ag::Tensor qkv = block.qkv(x);
  std::vector<ag::Tensor> heads;
  heads.reserve(config_.heads);
  for (std::size_t h = 0; h < config_.heads; ++h) {
    const ag::Tensor q = ag::slice_last(qkv, h * dh, dh);
    const ag::Tensor k = ag::slice_last(qkv, d + h * dh, dh);
    const ag::Tensor v = ag::slice_last(qkv, 2 * d + h * dh, dh);
    const ag::Tensor scores = ag::scale(ag::matmul(q, ag::transpose_last2(k)), inv_sqrt);
    const ag::Tensor probs = ag::softmax_last(scores, key_mask);
    if (trace) trace->weights.push_back(probs);
    heads.push_back(ag::matmul(probs, v));
  }
  const ag::Tensor merged = heads.size() == 1 ? heads[0] : ag::concat_last(heads);
  return block.out(merged);
}

EncodedSequence Encoder::forward(std::span<const TokenId> ids, AttentionTrace* trace) const {
  if (ids.empty()) throw DimensionError("encoder forward on an empty sequence");
  if (ids.size() > config_.max_positions()) {
    throw DimensionError("sequence of length " + std::to_string(ids.size()) +
                         " exceeds positional table of " +
                         std::to_string(config_.max_positions()));
  }
  EncodedSequence seq;
  seq.token_ids.assign(ids.begin(), ids.end());
  seq.real_positions.resize(ids.size());
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    rows[i] = ids[i];
    seq.real_positions[i] = ids[i] != kPadId;
  }
  std::vector<std::size_t> positions(ids.size());
  std::iota(positions.begin(), positions.end(), std::size_t{0});

  ag::Tensor x = ag::add(ag::gather_rows(token_embedding_, rows),
                         ag::gather_rows(position_embedding_, positions));
  for (const Block& block : blocks_) {
    const ag::Tensor attended = attention(block, x, seq.real_positions, trace);
    x = ag::layer_norm(ag::add(x, attended), block.ln1_gain, block.ln1_bias, kLayerNormEps);
    const ag::Tensor ffn = block.ffn2(ag::relu(block.ffn1(x)));
    x = ag::layer_norm(ag::add(x, ffn), block.ln2_gain, block.ln2_bias, kLayerNormEps);
  }
  seq.hidden = x;
  return seq;
}

}  // namespace fectek
