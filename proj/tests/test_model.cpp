#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "fd_oracle.hpp"
#include "fectek/binary_io.hpp"
#include "fectek/error.hpp"
#include "fectek/gradcheck.hpp"
#include "fectek/model.hpp"
#include "gtest/gtest.h"

using namespace fectek;
using fectek::testing::max_relative_error;
using fectek::testing::numeric_gradient;

namespace {

ag::Tensor random_tensor(ag::Shape shape, std::mt19937_64& rng, bool grad = true) {
  std::uniform_real_distribution<double> dist(-2.0, 2.0);
  std::vector<double> v(ag::numel(shape));
  for (double& x : v) x = dist(rng);
  return ag::Tensor::from(std::move(shape), std::move(v), grad);
}

FcmParams random_fcm(std::size_t d, std::mt19937_64& rng) {
  const std::size_t h = FcmParams::bottleneck(d);
  return {{random_tensor({d, h}, rng), random_tensor({h}, rng)},
          {random_tensor({h, d}, rng), random_tensor({d}, rng)}};
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.encoder.d = 16;
  c.encoder.layers = 1;
  c.encoder.heads = 2;
  c.encoder.ffn_multiplier = 2;
  c.encoder.max_query_len = 8;
  c.encoder.max_passage_len = 12;
  return c;
}

EncodedTriple toy_triple(std::size_t negatives) {
  EncodedTriple t;
  t.query = {2, 5, 6, 3};
  t.positive = {2, 6, 7, 8, 3};
  for (std::size_t i = 0; i < negatives; ++i) {
    t.negatives.push_back({2, static_cast<TokenId>(9 + i % 6), 5, 3});
  }
  return t;
}

void fill_parameter(const FecTekModel& model, const std::string& name, double value) {
  for (auto& p : model.parameters()) {
    if (p.name == name) {
      for (double& v : p.tensor.mutable_data()) v = value;
    }
  }
}

void zero_weight_head(const FecTekModel& model) {
  fill_parameter(model, "projector1.weight", 0.0);
  fill_parameter(model, "projector1.bias", 0.0);
}

// Scatters into a dense vocabulary-sized vector.
std::vector<double> dense(const TermWeightVector& v, std::size_t vocab) {
  std::vector<double> out(vocab, 0.0);
  for (const auto& [t, w] : v.entries) out[t] = w;
  return out;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("fectek_test_model_" + name);
}

}  // namespace

TEST(Fcm, BottleneckWidth) {
  EXPECT_EQ(FcmParams::bottleneck(64), 4u);
  EXPECT_EQ(FcmParams::bottleneck(16), 1u);
  EXPECT_EQ(FcmParams::bottleneck(8), 1u);
}

TEST(Fcm, ShapePreservingWithSharedGate) {
  std::mt19937_64 rng(1);
  const auto h = random_tensor({5, 32}, rng);
  const auto params = random_fcm(32, rng);
  const auto f = fcm_forward(h, std::vector<bool>(5, true), params);
  ASSERT_EQ(f.shape(), h.shape());
  for (std::size_t k = 0; k < 32; ++k) {
    const double gate = f.data()[k] / h.data()[k];
    EXPECT_GT(gate, 0.0);
    EXPECT_LT(gate, 1.0);
    for (std::size_t i = 1; i < 5; ++i) {
      EXPECT_NEAR(f.data()[i * 32 + k], gate * h.data()[i * 32 + k], 1e-12);
    }
  }
}

TEST(Fcm, SaturatedBiasPassesInputThrough) {
  std::mt19937_64 rng(2);
  const auto h = random_tensor({4, 16}, rng);
  auto params = random_fcm(16, rng);
  for (double& v : params.fc2.bias.mutable_data()) v = 1e3;
  const auto f = fcm_forward(h, std::vector<bool>(4, true), params);
  for (std::size_t i = 0; i < h.numel(); ++i) EXPECT_NEAR(f.data()[i], h.data()[i], 1e-12);
}

TEST(Fcm, PaddingExcludedFromPooling) {
  std::mt19937_64 rng(3);
  const auto h = random_tensor({3, 16}, rng);
  const auto params = random_fcm(16, rng);
  std::vector<double> padded(h.data().begin(), h.data().end());
  for (int k = 0; k < 16; ++k) padded.push_back(100.0);
  const auto hp = ag::Tensor::from({4, 16}, padded);
  const auto f = fcm_forward(h, {true, true, true}, params);
  const auto fp = fcm_forward(hp, {true, true, true, false}, params);
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_DOUBLE_EQ(fp.data()[i], f.data()[i]);
}

TEST(Fcm, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  const auto h = random_tensor({4, 16}, rng);
  const auto params = random_fcm(16, rng);
  const auto target = random_tensor({4, 16}, rng, false);
  auto loss = [&] {
    return ag::sum(ag::mul(fcm_forward(h, std::vector<bool>(4, true), params), target));
  };
  for (ag::Tensor t : {h, params.fc1.weight, params.fc1.bias, params.fc2.weight}) {
    for (ag::Tensor u : {h, params.fc1.weight, params.fc1.bias, params.fc2.weight, params.fc2.bias})
      u.zero_grad();
    loss().backward();
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    const auto numeric = numeric_gradient(
        [&] {
          ag::NoGradGuard g;
          return loss().item();
        },
        t.mutable_data(), 1e-6);
    EXPECT_LE(max_relative_error(analytic, numeric, 1e-7), 1e-5);
  }
}

TEST(TermWeight, Eq1Examples) {
  // One feature column equal to 1 so w1.f + b1 is b1 alone.
  const auto f = ag::Tensor::from({3, 1}, {0.0, 0.0, 0.0});
  const auto w1 = ag::Tensor::from({1}, {1.0});
  auto weight_at = [&](double b1) {
    return position_term_weights(f, w1, ag::Tensor::from({1}, {b1})).data()[0];
  };
  EXPECT_EQ(weight_at(0.0), 0.0);
  EXPECT_NEAR(weight_at(std::exp(1.0) - 1.0), 1.0, 1e-15);
  EXPECT_EQ(weight_at(-0.5), 0.0);
}

TEST(TermWeight, CollapseByMaxDropsSpecialsAndZeros) {
  const std::vector<TokenId> ids{kClsId, 5, 6, 5, kUnkId, 7, kSepId};
  const std::vector<double> w{9.0, 0.2, 0.0, 0.7, 4.0, 0.1, 9.0};
  const auto v = collapse_weights(ids, w, Aggregation::kMax);
  ASSERT_EQ(v.entries.size(), 2u);
  EXPECT_EQ(v.entries[0], (std::pair<TokenId, double>{5, 0.7}));
  EXPECT_EQ(v.entries[1], (std::pair<TokenId, double>{7, 0.1}));
  EXPECT_EQ(v.source_length, 7u);
  const auto s = collapse_weights(ids, w, Aggregation::kSum);
  EXPECT_DOUBLE_EQ(s.weight(5), 0.9);
}

TEST(TermWeight, NonNegativeForRandomFeatures) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto f = random_tensor({10, 8}, rng, false);
    const auto w = position_term_weights(f, random_tensor({8}, rng, false),
                                         random_tensor({1}, rng, false));
    for (double x : w.data()) EXPECT_GE(x, 0.0);
  }
}

TEST(TermProbability, Examples) {
  const auto h = ag::Tensor::from({2, 2}, {0.0, 0.0, 5.0, 5.0});
  const auto p = term_probability(h, ag::Tensor::from({2}, {1.0, 1.0}), ag::Tensor::from({1}, {0.0}));
  EXPECT_EQ(p.data()[0], 0.5);
  EXPECT_GT(p.data()[1], 0.5);
  EXPECT_LT(p.data()[1], 1.0);
  std::mt19937_64 rng(6);
  const auto r = term_probability(random_tensor({20, 4}, rng, false), random_tensor({4}, rng, false),
                                  random_tensor({1}, rng, false));
  for (double x : r.data()) {
    EXPECT_GT(x, 0.0);
    EXPECT_LT(x, 1.0);
  }
}

TEST(TermProbability, GradientWrtW2MatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  const auto h = random_tensor({6, 5}, rng, false);
  auto w2 = random_tensor({5}, rng);
  const auto b2 = random_tensor({1}, rng);
  const auto target = random_tensor({6}, rng, false);
  auto loss = [&] { return ag::sum(ag::mul(term_probability(h, w2, b2), target)); };
  loss().backward();
  std::vector<double> analytic(w2.grad().begin(), w2.grad().end());
  const auto numeric = numeric_gradient(
      [&] {
        ag::NoGradGuard g;
        return loss().item();
      },
      w2.mutable_data(), 1e-6);
  EXPECT_LE(max_relative_error(analytic, numeric), 1e-5);
}

TEST(Indicator, Examples) {
  // apple=4 pie=5 recipe=6
  const std::vector<TokenId> q{kClsId, 4, 5, kSepId};
  const std::vector<TokenId> p{kClsId, 5, 6, kSepId};
  const auto [ql, pl] = indicator_labels(q, p);
  EXPECT_EQ(ql.labels, (std::vector<double>{0, 0, 1, 0}));
  EXPECT_EQ(ql.mask, (std::vector<bool>{false, true, true, false}));
  EXPECT_EQ(pl.labels, (std::vector<double>{0, 1, 0, 0}));

  const auto [dq, dp] = indicator_labels(std::vector<TokenId>{2, 4, 3}, std::vector<TokenId>{2, 7, 3});
  EXPECT_EQ(dq.labels, (std::vector<double>{0, 0, 0}));
  EXPECT_EQ(dp.labels, (std::vector<double>{0, 0, 0}));

  const std::vector<TokenId> same{2, 4, 5, 4, 3};
  const auto [sq, sp] = indicator_labels(same, same);
  EXPECT_EQ(sq.labels, (std::vector<double>{0, 1, 1, 1, 0}));
  EXPECT_EQ(sp.labels, sq.labels);
}

TEST(Indicator, UnknownTokensNeverMatch) {
  const auto [ql, pl] =
      indicator_labels(std::vector<TokenId>{2, kUnkId, 4, 3}, std::vector<TokenId>{2, kUnkId, 3});
  EXPECT_EQ(ql.labels, (std::vector<double>{0, 0, 0, 0}));
  EXPECT_FALSE(ql.mask[1]);
  EXPECT_FALSE(pl.mask[1]);
}

TEST(MatchScore, Examples) {
  TermWeightVector q{{{5, 2.0}}, 3};
  TermWeightVector p{{{5, 3.0}}, 3};
  TermWeightVector r{{{6, 3.0}}, 3};
  EXPECT_EQ(match_score(q, p), 6.0);
  EXPECT_EQ(match_score(q, r), 0.0);
}

TEST(MatchScore, EqualsDenseDotProductAndIsSymmetric) {
  std::mt19937_64 rng(8);
  constexpr std::size_t kVocab = 40;
  std::uniform_int_distribution<TokenId> term(4, kVocab - 1);
  std::uniform_real_distribution<double> weight(0.01, 3.0);
  auto random_vector = [&] {
    std::map<TokenId, double> m;
    for (int i = 0; i < 12; ++i) m[term(rng)] = weight(rng);
    TermWeightVector v;
    v.entries.assign(m.begin(), m.end());
    return v;
  };
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_vector();
    const auto b = random_vector();
    const auto da = dense(a, kVocab);
    const auto db = dense(b, kVocab);
    double expected = 0.0;
    for (std::size_t t = 0; t < kVocab; ++t) expected += da[t] * db[t];
    EXPECT_NEAR(match_score(a, b), expected, 1e-12);
    EXPECT_EQ(match_score(a, b), match_score(b, a));
  }
}

TEST(MatchScore, DifferentiableMatchesSparse) {
  std::mt19937_64 rng(9);
  const std::vector<TokenId> q{2, 5, 6, 5, 1, 3};
  const std::vector<TokenId> p{2, 6, 5, 7, 1, 6, 3};
  for (Aggregation agg : {Aggregation::kMax, Aggregation::kSum}) {
    auto wq = ag::Tensor::from({6}, {0.0, 0.4, 0.3, 0.9, 0.5, 0.0});
    auto wp = ag::Tensor::from({7}, {0.0, 0.2, 0.7, 0.1, 0.8, 0.6, 0.0});
    const double dense_score =
        match_score(WeightedText{q, wq}, WeightedText{p, wp}, agg).item();
    const double sparse_score =
        match_score(collapse_weights(q, wq.data(), agg), collapse_weights(p, wp.data(), agg));
    EXPECT_NEAR(dense_score, sparse_score, 1e-15);
  }
}

TEST(MatchScore, MonotoneInSharedTermWeight) {
  TermWeightVector q{{{5, 1.5}, {6, 0.5}}, 4};
  TermWeightVector p{{{5, 2.0}}, 3};
  const double before = match_score(q, p);
  q.entries[0].second += 0.1;
  EXPECT_GT(match_score(q, p), before);
}

TEST(TextLoss, Examples) {
  const std::vector<TokenId> q{2, 5, 3};
  const std::vector<TokenId> d{2, 5, 3};
  const auto wq = ag::Tensor::from({3}, {0, 1, 0});
  const auto wd = ag::Tensor::from({3}, {0, 1, 0});
  std::vector<WeightedText> negatives(15, WeightedText{d, wd});
  const double equal = text_level_loss({q, wq}, {d, wd}, negatives, Aggregation::kMax).item();
  EXPECT_NEAR(equal, std::log(16.0), 1e-12);
  EXPECT_EQ(text_level_loss({q, wq}, {d, wd}, {}, Aggregation::kMax).item(), 0.0);

  const auto big = ag::Tensor::from({3}, {0, 60, 0});
  const std::vector<TokenId> other{2, 7, 3};
  std::vector<WeightedText> weak(15, WeightedText{other, wd});
  const double confident =
      text_level_loss({q, big}, {d, big}, weak, Aggregation::kMax).item();
  EXPECT_LT(confident, 1e-12);
}

TEST(TextLoss, InitialLossWithZeroedHeadIsLogN) {
  FecTekModel model(tiny_config(), 20, 1);
  zero_weight_head(model);
  const std::vector<EncodedTriple> batch{toy_triple(15)};
  const auto loss = model.total_loss(batch, LossConfig{true, false});
  EXPECT_NEAR(loss.text_level, std::log(16.0), 1e-6);
  EXPECT_NEAR(loss.total.item(), 2.7725887, 1e-6);
}

TEST(TermLoss, Examples) {
  TermLabels labels{{0, 1, 0, 1, 0}, {false, true, true, true, false}};
  const auto half = ag::Tensor::full({5}, 0.5);
  EXPECT_NEAR(term_level_loss(half, labels).item(), std::log(2.0), 1e-12);
  const auto exact = ag::Tensor::from({5}, {0.3, 1.0, 0.0, 1.0, 0.9});
  EXPECT_LT(term_level_loss(exact, labels).item(), 1e-6);
  TermLabels none{{0, 0}, {false, false}};
  EXPECT_EQ(term_level_loss(ag::Tensor::full({2}, 0.3), none).item(), 0.0);
  EXPECT_NEAR(term_level_loss(half, labels, half, labels).item(), 2.0 * std::log(2.0), 1e-12);
}

TEST(TermLoss, NonNegativeAndMonotoneTowardLabels) {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> unit(1e-6, 1.0 - 1e-6);
  TermLabels labels{{1, 0, 1, 1, 0, 0}, std::vector<bool>(6, true)};
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> p(6);
    for (double& x : p) x = unit(rng);
    EXPECT_GE(term_level_loss(ag::Tensor::from({6}, p), labels).item(), 0.0);
  }
  double prev = INFINITY;
  for (double t = 0.0; t <= 1.0; t += 0.05) {
    std::vector<double> p(6);
    for (std::size_t i = 0; i < 6; ++i) p[i] = 0.5 + t * (labels.labels[i] - 0.5) * 0.999;
    const double loss = term_level_loss(ag::Tensor::from({6}, p), labels).item();
    EXPECT_LT(loss, prev);
    prev = loss;
  }
}

TEST(TotalLoss, Configurations) {
  FecTekModel model(tiny_config(), 20, 2);
  const std::vector<EncodedTriple> batch{toy_triple(3), toy_triple(2)};
  const auto both = model.total_loss(batch, LossConfig{true, true});
  const auto text = model.total_loss(batch, LossConfig{true, false});
  EXPECT_DOUBLE_EQ(text.total.item(), text.text_level);
  EXPECT_EQ(text.term_level, 0.0);
  EXPECT_NEAR(both.total.item(), both.text_level + both.term_level, 1e-12);
  EXPECT_GE(both.total.item(), 0.0);
  EXPECT_THROW(model.total_loss(batch, LossConfig{false, false}), ConfigError);
  EXPECT_THROW(model.total_loss(std::vector<EncodedTriple>{}, LossConfig{}), ConfigError);
}

TEST(Model, EncodeTermsExcludesSpecials) {
  FecTekModel model(tiny_config(), 20, 3);
  fill_parameter(model, "projector1.bias", 1.0);
  const std::vector<TokenId> ids{kClsId, 5, kUnkId, 6, 5, kSepId};
  const auto v = model.encode_terms(ids);
  for (const auto& [t, w] : v.entries) {
    EXPECT_FALSE(is_special(t));
    EXPECT_GT(w, 0.0);
  }
  EXPECT_EQ(v.entries.size(), 2u);
}

TEST(Checkpoint, BitExactRoundTrip) {
  FecTekModel model(tiny_config(), 20, 4);
  const auto path = temp_path("a.ftck");
  model.save(path);
  const FecTekModel back = FecTekModel::load(path);
  const auto a = model.parameters();
  const auto b = back.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(a[i].tensor.shape(), b[i].tensor.shape());
    EXPECT_TRUE(std::equal(a[i].tensor.data().begin(), a[i].tensor.data().end(),
                           b[i].tensor.data().begin()));
  }
  EXPECT_EQ(back.config().encoder.d, 16u);
  const auto path2 = temp_path("b.ftck");
  back.save(path2);
  EXPECT_EQ(read_file_bytes(path), read_file_bytes(path2));
}

TEST(Checkpoint, CorruptionIsReported) {
  FecTekModel model(tiny_config(), 20, 5);
  const auto path = temp_path("c.ftck");
  model.save(path);
  auto bytes = read_file_bytes(path);

  auto flipped = bytes;
  flipped[0] ^= 0xff;
  write_file_bytes(path, flipped);
  EXPECT_THROW(FecTekModel::load(path), CorruptDataError);

  for (std::size_t cut : {std::size_t{3}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    write_file_bytes(path, std::span(bytes).first(cut));
    EXPECT_THROW(FecTekModel::load(path), CorruptDataError) << cut;
  }
  EXPECT_THROW(FecTekModel::load(temp_path("missing.ftck")), IoError);
}

TEST(Checkpoint, OversizedConfigIsRejectedBeforeAllocation) {
  FecTekModel model(tiny_config(), 20, 5);
  const auto path = temp_path("config.ftck");
  model.save(path);
  const auto entries = read_checkpoint(path);
  // d, layers, vocabulary size, ffn multiplier, a non-integer, a huge value.
  const std::vector<std::pair<std::size_t, double>> edits{
      {0, 1e9}, {1, 1e6}, {6, 1e12}, {3, 1e9}, {4, 8.5}, {5, 1e300}};
  for (const auto& [field, value] : edits) {
    auto damaged = entries;
    damaged[0].values[field] = value;
    write_checkpoint(path, damaged);
    EXPECT_THROW(FecTekModel::load(path), CorruptDataError) << field;
  }
}

namespace {

FecTekModel gradcheck_model() {
  FecTekModel model(tiny_config(), 12, 6);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> init(-0.5, 0.5);
  for (auto& p : model.parameters()) {
    for (double& v : p.tensor.mutable_data()) v = init(rng);
    if (p.name == "projector1.bias") p.tensor.mutable_data()[0] = 1.0;
  }
  return model;
}

}  // namespace

TEST(GradCheck, EveryGroupMatchesFiniteDifferences) {
  const FecTekModel model = gradcheck_model();
  const std::vector<EncodedTriple> batch{toy_triple(2), toy_triple(3)};
  const auto report = run_gradcheck(model, batch, LossConfig{}, GradCheckConfig{});
  ASSERT_EQ(report.groups.size(), 4u);
  for (const auto& g : report.groups) {
    EXPECT_LE(g.max_rel_error, 1e-4) << g.group << " " << g.worst_parameter;
    EXPECT_GT(g.nonzero, 0u) << g.group;
  }
  EXPECT_TRUE(report.passed());
}

TEST(GradCheck, CorruptedGradientFails) {
  const FecTekModel model = gradcheck_model();
  const std::vector<EncodedTriple> batch{toy_triple(2)};
  GradCheckConfig config;
  config.corrupt_gradient = true;
  const auto report = run_gradcheck(model, batch, LossConfig{}, config);
  EXPECT_FALSE(report.passed());
  EXPECT_EQ(report.worst().group, "projector1");
  EXPECT_EQ(report.worst().worst_parameter, "projector1.weight");
}
