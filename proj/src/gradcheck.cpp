#include "fectek/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <random>
#include <thread>

#include "fectek/error.hpp"

namespace fectek {

namespace {

struct Probe {
  double loss;
  std::vector<std::uint64_t> branches;
};

Probe probe(const FecTekModel& model, std::span<const EncodedTriple> batch,
            const LossConfig& losses) {
  ag::NoGradGuard no_grad;
  ag::BranchRecorder recorder;
  const double loss = model.total_loss(batch, losses).total.item();
  return {loss, recorder.decisions()};
}

std::vector<TokenId> random_sequence(std::size_t len, std::size_t vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<TokenId> term(kNumReserved, static_cast<TokenId>(vocab - 1));
  std::vector<TokenId> ids{kClsId};
  for (std::size_t i = 0; i < len; ++i) ids.push_back(term(rng));
  ids.push_back(kSepId);
  return ids;
}

}  // namespace

bool GradCheckReport::passed() const {
  return std::all_of(groups.begin(), groups.end(), [this](const GroupReport& g) {
    return g.checked > 0 && g.nonzero > 0 && g.max_rel_error <= tolerance;
  });
}

const GroupReport& GradCheckReport::worst() const {
  return *std::max_element(groups.begin(), groups.end(), [](const auto& a, const auto& b) {
    return a.max_rel_error < b.max_rel_error;
  });
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport run_gradcheck(const GradCheckConfig& config) {
  ModelConfig model_config;
  model_config.encoder.d = 32;
  model_config.encoder.layers = 2;
  model_config.encoder.heads = 2;
  model_config.encoder.ffn_multiplier = 2;
  model_config.encoder.max_query_len = 8;
  model_config.encoder.max_passage_len = 12;
  constexpr std::size_t kVocab = 16;
  FecTekModel model(model_config, kVocab, config.seed);
  std::mt19937_64 init_rng(config.seed ^ 0xa5a5a5a5ULL);
  std::uniform_real_distribution<double> init(-config.init_range, config.init_range);
  for (auto& p : model.parameters()) {
    for (double& v : p.tensor.mutable_data()) v = init(init_rng);
    // Keeps the weight head's relu active so projector1 gets non-zero gradients.
    if (p.name == "projector1.bias") p.tensor.mutable_data()[0] = 1.0;
  }

  // Small vocabulary so queries and passages share terms and repeat them.
  std::mt19937_64 rng(config.seed + 1);
  std::vector<EncodedTriple> batch(2);
  for (auto& t : batch) {
    t.query = random_sequence(4, kVocab, rng);
    t.positive = random_sequence(8, kVocab, rng);
    t.positive[2] = t.query[1];
    for (int j = 0; j < 3; ++j) t.negatives.push_back(random_sequence(7, kVocab, rng));
  }
  batch[1].negatives[0].insert(batch[1].negatives[0].end() - 1, kUnkId);
  return run_gradcheck(model, batch, LossConfig{}, config);
}

GradCheckReport run_gradcheck(const FecTekModel& model, std::span<const EncodedTriple> batch,
                              const LossConfig& losses, const GradCheckConfig& config) {
  const auto start = std::chrono::steady_clock::now();
  ParameterList params = model.parameters();
  for (auto& p : params) p.tensor.zero_grad();
  model.total_loss(batch, losses).total.backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) {
    if (p.tensor.has_grad()) {
      analytic.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
    } else {
      analytic.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  for (auto& p : params) p.tensor.zero_grad();
  if (config.corrupt_gradient) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].name == "projector1.weight") analytic[i][0] += 1.0;
    }
  }

  const Probe base = probe(model, batch, losses);

  // Flat (parameter, entry) work list; each worker perturbs its own deep copy.
  std::vector<std::pair<std::size_t, std::size_t>> work;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t j = 0; j < params[i].tensor.numel(); ++j) work.emplace_back(i, j);
  }
  std::vector<double> numeric(work.size(), 0.0);
  std::vector<char> kink(work.size(), 0);
  std::size_t threads = config.threads ? config.threads : std::thread::hardware_concurrency();
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, work.size()));
  std::vector<FecTekModel> replicas;
  for (std::size_t t = 0; t < threads; ++t) {
    replicas.emplace_back(model.config(), model.encoder().vocab_size(), 0);
    ParameterList dst = replicas.back().parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      std::ranges::copy(params[i].tensor.data(), dst[i].tensor.mutable_data().begin());
    }
  }
  auto worker = [&](std::size_t t) {
    ParameterList local = replicas[t].parameters();
    for (std::size_t w = t; w < work.size(); w += threads) {
      const auto [i, j] = work[w];
      auto values = local[i].tensor.mutable_data();
      const double original = values[j];
      values[j] = original + config.eps;
      const Probe plus = probe(replicas[t], batch, losses);
      values[j] = original - config.eps;
      const Probe minus = probe(replicas[t], batch, losses);
      values[j] = original;
      kink[w] = plus.branches != base.branches || minus.branches != base.branches;
      numeric[w] = (plus.loss - minus.loss) / (2.0 * config.eps);
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker, t);
  worker(0);
  for (auto& th : pool) th.join();

  std::map<std::string, GroupReport> groups;
  for (const char* g : {"encoder", "fcm", "projector1", "projector2"}) groups[g].group = g;
  for (std::size_t w = 0; w < work.size(); ++w) {
    const auto [i, j] = work[w];
    GroupReport& report = groups[parameter_group(params[i].name)];
    report.group = parameter_group(params[i].name);
    if (kink[w]) {
      ++report.skipped_kinks;
      continue;
    }
    const double err = relative_error(analytic[i][j], numeric[w], config.magnitude_floor);
    ++report.checked;
    if (std::abs(analytic[i][j]) > config.magnitude_floor) ++report.nonzero;
    if (err > report.max_rel_error || report.worst_parameter.empty()) {
      report.max_rel_error = err;
      report.worst_parameter = params[i].name;
      report.worst_index = j;
    }
  }
  GradCheckReport out;
  out.tolerance = config.tolerance;
  for (const char* g : {"encoder", "fcm", "projector1", "projector2"}) out.groups.push_back(groups[g]);
  out.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace fectek
