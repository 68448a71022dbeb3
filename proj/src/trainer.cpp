#include "fectek/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "fectek/error.hpp"

namespace fectek {

std::vector<TrainingTriple> read_triples(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open training data " + path.string());
  std::vector<TrainingTriple> triples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TrainingTriple t;
      t.query = j.at("query").get<std::string>();
      t.positive = j.at("positive").get<std::string>();
      if (j.contains("negatives")) t.negatives = j.at("negatives").get<std::vector<std::string>>();
      triples.push_back(std::move(t));
    } catch (const nlohmann::json::exception& e) {
      throw CorruptDataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return triples;
}

void write_triples(const std::filesystem::path& path, std::span<const TrainingTriple> triples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& t : triples) {
    out << nlohmann::json{{"query", t.query}, {"positive", t.positive}, {"negatives", t.negatives}}
               .dump()
        << '\n';
  }
}

EncodedTriple encode_triple(const TrainingTriple& triple, const Vocabulary& vocab,
                            const EncoderConfig& config, std::size_t max_negatives) {
  EncodedTriple out;
  out.query = vocab.encode(triple.query, config.max_query_len);
  out.positive = vocab.encode(triple.positive, config.max_passage_len);
  const std::size_t n = std::min(max_negatives, triple.negatives.size());
  for (std::size_t i = 0; i < n; ++i) {
    out.negatives.push_back(vocab.encode(triple.negatives[i], config.max_passage_len));
  }
  return out;
}

LinearWarmupSchedule::LinearWarmupSchedule(double peak, std::size_t total_steps,
                                           double warmup_ratio)
    : peak_(peak),
      total_(static_cast<double>(total_steps)),
      warmup_(warmup_ratio * static_cast<double>(total_steps)) {
  if (warmup_ratio < 0.0 || warmup_ratio > 1.0) {
    throw ConfigError("warmup ratio must lie in [0, 1]");
  }
}

double LinearWarmupSchedule::lr(std::size_t step) const {
  const double s = static_cast<double>(step);
  if (s >= total_) return 0.0;
  if (s < warmup_) return peak_ * s / warmup_;
  return peak_ * (total_ - s) / (total_ - warmup_);
}

void adamw_update(std::span<double> param, std::span<const double> grad, MomentBuffers& moments,
                  std::uint64_t step, double lr, const OptimizerConfig& config) {
  if (grad.size() != param.size() || moments.first.size() != param.size() ||
      moments.second.size() != param.size()) {
    throw DimensionError("adamw_update: parameter of size " + std::to_string(param.size()) +
                         " with gradient of size " + std::to_string(grad.size()));
  }
  if (step == 0) throw ConfigError("adamw_update: step counts from 1");
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  const double decay = 1.0 - lr * config.weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    double& m = moments.first[i];
    double& v = moments.second[i];
    m = config.beta1 * m + (1.0 - config.beta1) * g;
    v = config.beta2 * v + (1.0 - config.beta2) * g * g;
    param[i] *= decay;
    param[i] -= lr * (m / c1) / (std::sqrt(v / c2) + config.eps);
  }
}

AdamW::AdamW(ParameterList params, OptimizerConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    moments_.push_back({std::vector<double>(p.tensor.numel(), 0.0),
                        std::vector<double>(p.tensor.numel(), 0.0)});
  }
}

void AdamW::step(double lr) {
  ++step_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ag::Tensor& t = params_[i].tensor;
    const std::vector<double> zeros(t.has_grad() ? 0 : t.numel(), 0.0);
    const std::span<const double> grad = t.has_grad() ? t.grad() : std::span<const double>(zeros);
    adamw_update(t.mutable_data(), grad, moments_[i], step_, lr, config_);
  }
}

Trainer::Trainer(FecTekModel& model, const TrainConfig& config, std::size_t total_steps)
    : model_(model),
      config_(config),
      params_(model.parameters()),
      optimizer_(model.parameters(), config.optimizer),
      schedule_(config.optimizer.lr, total_steps, config.optimizer.warmup_ratio) {
  config_.losses.validate();
}

StepMetrics Trainer::step(std::span<const EncodedTriple> batch) {
  if (batch.empty()) throw ConfigError("training step on an empty batch");
  LossBreakdown loss = model_.total_loss(batch, config_.losses);
  const auto check = [](double v, const char* component) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(component) + " loss is not finite (" + std::to_string(v) + ")");
    }
  };
  check(loss.text_level, "text-level");
  check(loss.term_level, "term-level");
  check(loss.total.item(), "total");
  loss.total.backward();

  double sq = 0.0;
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  if (config_.clip_norm > 0.0 && norm > config_.clip_norm) {
    const double factor = config_.clip_norm / norm;
    for (auto& p : params_) {
      if (!p.tensor.has_grad()) continue;
      for (double& g : p.tensor.mutable_grad()) g *= factor;
    }
  }
  StepMetrics metrics;
  metrics.step = optimizer_.steps_taken() + 1;
  metrics.lr = schedule_.lr(optimizer_.steps_taken());
  metrics.total = loss.total.item();
  metrics.text_level = loss.text_level;
  metrics.term_level = loss.term_level;
  metrics.grad_norm = norm;
  optimizer_.step(metrics.lr);
  for (auto& p : params_) p.tensor.zero_grad();
  return metrics;
}

nlohmann::json to_json(const StepMetrics& m) {
  return {{"step", m.step},         {"loss", m.total}, {"text_level", m.text_level},
          {"term_level", m.term_level}, {"lr", m.lr},  {"grad_norm", m.grad_norm}};
}

TrainResult train(FecTekModel& model, const Vocabulary& vocab,
                  std::span<const TrainingTriple> dataset, const TrainConfig& config,
                  const nlohmann::json& header) {
  if (dataset.empty()) throw ConfigError("training dataset is empty");
  if (config.batch_size == 0) throw ConfigError("batch size must be positive");
  if (model.encoder().vocab_size() != vocab.size()) {
    throw ConfigError("model vocabulary size " + std::to_string(model.encoder().vocab_size()) +
                      " does not match vocabulary of size " + std::to_string(vocab.size()));
  }
  std::vector<EncodedTriple> encoded;
  encoded.reserve(dataset.size());
  for (const auto& t : dataset) {
    encoded.push_back(encode_triple(t, vocab, model.config().encoder, config.negatives));
  }
  const std::size_t steps_per_epoch = (encoded.size() + config.batch_size - 1) / config.batch_size;
  Trainer trainer(model, config, steps_per_epoch * config.epochs);

  std::ofstream log;
  if (!config.output_dir.empty()) {
    std::filesystem::create_directories(config.output_dir);
    log.open(config.output_dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
    if (!log) throw IoError("cannot write metrics log in " + config.output_dir.string());
    if (!header.is_null()) log << nlohmann::json{{"config", header}}.dump() << '\n';
  }

  TrainResult result;
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(encoded.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<EncodedTriple> batch;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i) {
        batch.push_back(encoded[order[i]]);
      }
      StepMetrics m = trainer.step(batch);
      if (log.is_open()) {
        auto line = to_json(m);
        line["epoch"] = epoch;
        log << line.dump() << '\n';
      }
      result.metrics.push_back(m);
    }
    if (!config.output_dir.empty()) {
      const auto path = config.output_dir / ("epoch-" + std::to_string(epoch) + ".ftck");
      model.save(path);
      result.epoch_checkpoints.push_back(path);
    }
  }
  if (!config.output_dir.empty()) {
    result.final_checkpoint = config.output_dir / "final.ftck";
    model.save(result.final_checkpoint);
    log.flush();
    if (!log) throw IoError("failed writing metrics log");
  }
  return result;
}

}  // namespace fectek
