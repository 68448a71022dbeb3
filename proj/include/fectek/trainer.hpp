#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fectek/model.hpp"
#include "fectek/vocab.hpp"
#include "json.hpp"

namespace fectek {

struct TrainingTriple {
  std::string query;
  std::string positive;
  std::vector<std::string> negatives;
};

// JSON lines: {"query": str, "positive": str, "negatives": [str, ...]}.
std::vector<TrainingTriple> read_triples(const std::filesystem::path& path);
void write_triples(const std::filesystem::path& path, std::span<const TrainingTriple> triples);

// Tokenizes with the query/passage truncation limits, keeping at most
// max_negatives negatives.
EncodedTriple encode_triple(const TrainingTriple& triple, const Vocabulary& vocab,
                            const EncoderConfig& config, std::size_t max_negatives);

struct OptimizerConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double warmup_ratio = 0.1;
};

// Zero at step 0, linear up to `peak` at warmup_ratio * total, linear down
// to zero at `total`.
class LinearWarmupSchedule {
 public:
  LinearWarmupSchedule(double peak, std::size_t total_steps, double warmup_ratio);
  double lr(std::size_t step) const;
  double warmup_end() const { return warmup_; }

 private:
  double peak_;
  double total_;
  double warmup_;
};

struct MomentBuffers {
  std::vector<double> first;
  std::vector<double> second;
};

// One AdamW step on a flat parameter: decoupled decay, then the
// bias-corrected moment update. `step` counts from 1.
void adamw_update(std::span<double> param, std::span<const double> grad, MomentBuffers& moments,
                  std::uint64_t step, double lr, const OptimizerConfig& config);

class AdamW {
 public:
  AdamW(ParameterList params, OptimizerConfig config);

  // Applies one update from the parameters' accumulated gradients.
  void step(double lr);
  std::uint64_t steps_taken() const { return step_; }
  const OptimizerConfig& config() const { return config_; }
  const std::vector<MomentBuffers>& moments() const { return moments_; }

 private:
  ParameterList params_;
  OptimizerConfig config_;
  std::vector<MomentBuffers> moments_;
  std::uint64_t step_ = 0;
};

struct StepMetrics {
  std::size_t step = 0;  // 1-based
  double total = 0.0;
  double text_level = 0.0;
  double term_level = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;  // before clipping
};

struct TrainConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 4;
  std::size_t negatives = 7;
  std::uint64_t seed = 42;
  double clip_norm = 1.0;
  OptimizerConfig optimizer;
  LossConfig losses;
  std::filesystem::path output_dir;  // empty: no files written
};

// Owns the optimizer for a model and performs exclusive update steps.
class Trainer {
 public:
  Trainer(FecTekModel& model, const TrainConfig& config, std::size_t total_steps);

  // forward + backward + clipped AdamW update; gradients are zeroed after.
  // Throws NumericError naming the component when a loss is not finite.
  StepMetrics step(std::span<const EncodedTriple> batch);

  const LinearWarmupSchedule& schedule() const { return schedule_; }

 private:
  FecTekModel& model_;
  TrainConfig config_;
  ParameterList params_;
  AdamW optimizer_;
  LinearWarmupSchedule schedule_;
};

struct TrainResult {
  std::filesystem::path final_checkpoint;  // empty when output_dir is empty
  std::vector<std::filesystem::path> epoch_checkpoints;
  std::vector<StepMetrics> metrics;
};

// Runs config.epochs passes with seeded reshuffling. With an output
// directory, writes epoch-<k>.ftck per epoch, final.ftck and metrics.jsonl
// (optional header line {"config": ...} followed by one line per step).
TrainResult train(FecTekModel& model, const Vocabulary& vocab,
                  std::span<const TrainingTriple> dataset, const TrainConfig& config,
                  const nlohmann::json& header = nullptr);

nlohmann::json to_json(const StepMetrics& metrics);

}  // namespace fectek
