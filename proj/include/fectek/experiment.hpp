#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fectek/eval.hpp"
#include "fectek/index.hpp"
#include "fectek/model.hpp"
#include "fectek/pipeline.hpp"
#include "fectek/trainer.hpp"
#include "fectek/vocab.hpp"

namespace fectek {

struct RetrievalTask {
  Vocabulary vocab;
  std::vector<TextRecord> passages;
  std::vector<TextRecord> queries;
  Qrels qrels;
  std::vector<TrainingTriple> train;
};

struct ExperimentResult {
  double mrr_at_10 = 0.0;
  double recall_at_100 = 0.0;
  double train_seconds = 0.0;
  double total_seconds = 0.0;
  std::vector<StepMetrics> metrics;
  RunFile run;
  std::vector<DocumentWeights> passage_weights;
};

// Builds the vocabulary over passages and training text with min_freq 1.
Vocabulary build_task_vocabulary(std::span<const TextRecord> passages,
                                 std::span<const TrainingTriple> train);

// Train -> encode passages -> build index -> retrieve top-k -> evaluate.
// The trained model is left in `model`.
ExperimentResult run_experiment(FecTekModel& model, const RetrievalTask& task,
                                const TrainConfig& train, std::size_t k = 100,
                                std::size_t threads = 0);

struct AblationRow {
  bool fcm = false;
  bool tkgm = false;
  ExperimentResult result;
};

// The four FCM x TKGM combinations, text-level loss always on, in the row
// order baseline, +FCM, +TKGM, +both.
std::vector<AblationRow> run_ablation(const RetrievalTask& task, const ModelConfig& model,
                                      const TrainConfig& train, std::size_t threads = 0);

std::string format_ablation_table(std::span<const AblationRow> rows);

}  // namespace fectek
