#include "fectek/experiment.hpp"

#include <chrono>
#include <cstdio>

namespace fectek {

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

Vocabulary build_task_vocabulary(std::span<const TextRecord> passages,
                                 std::span<const TrainingTriple> train) {
  VocabularyBuilder builder;
  for (const auto& p : passages) builder.add_text(p.text);
  for (const auto& t : train) builder.add_text(t.query);
  return builder.build(1);
}

ExperimentResult run_experiment(FecTekModel& model, const RetrievalTask& task,
                                const TrainConfig& train_config, std::size_t k,
                                std::size_t threads) {
  const auto start = std::chrono::steady_clock::now();
  ExperimentResult result;
  TrainResult trained = train(model, task.vocab, task.train, train_config);
  result.metrics = std::move(trained.metrics);
  result.train_seconds = seconds_since(start);

  result.passage_weights = encode_passages(model, task.vocab, task.passages, threads);
  const InvertedIndex index = InvertedIndex::build(result.passage_weights, task.vocab.size());
  result.run = retrieve(model, task.vocab, index, task.queries, k, "fectek", threads);
  result.mrr_at_10 = mrr_at_k(result.run, task.qrels, 10);
  result.recall_at_100 = recall_at_k(result.run, task.qrels, 100);
  result.total_seconds = seconds_since(start);
  return result;
}

std::vector<AblationRow> run_ablation(const RetrievalTask& task, const ModelConfig& model_config,
                                      const TrainConfig& train_config, std::size_t threads) {
  std::vector<AblationRow> rows;
  for (const auto& [fcm, tkgm] : {std::pair{false, false}, std::pair{true, false},
                                 std::pair{false, true}, std::pair{true, true}}) {
    ModelConfig mc = model_config;
    mc.enable_fcm = fcm;
    TrainConfig tc = train_config;
    tc.losses = LossConfig{true, tkgm};
    if (!tc.output_dir.empty()) {
      tc.output_dir /= std::string("fcm") + (fcm ? "1" : "0") + "-tkgm" + (tkgm ? "1" : "0");
    }
    FecTekModel model(mc, task.vocab.size(), tc.seed);
    AblationRow row{fcm, tkgm, run_experiment(model, task, tc, 100, threads)};
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_ablation_table(std::span<const AblationRow> rows) {
  std::string out = "| FCM | TKGM | MRR@10 | Recall@100 | train s |\n";
  out += "|-----|------|--------|------------|---------|\n";
  char line[128];
  for (const AblationRow& r : rows) {
    std::snprintf(line, sizeof(line), "| %s | %s | %.4f | %.4f | %.1f |\n",
                  r.fcm ? "✓" : "×", r.tkgm ? "✓" : "×", r.result.mrr_at_10,
                  r.result.recall_at_100, r.result.train_seconds);
    out += line;
  }
  return out;
}

}  // namespace fectek
