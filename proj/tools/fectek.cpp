// fectek command-line interface.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>

#include "CLI11.hpp"
#include "fectek/error.hpp"
#include "fectek/eval.hpp"
#include "fectek/experiment.hpp"
#include "fectek/gradcheck.hpp"
#include "fectek/index.hpp"
#include "fectek/model.hpp"
#include "fectek/pipeline.hpp"
#include "fectek/synthetic.hpp"
#include "fectek/trainer.hpp"
#include "fectek/vocab.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace fectek;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitCorrupt = 4;

std::string shortest(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

struct ModelOptions {
  EncoderConfig encoder;
  bool no_fcm = false;
  std::string aggregation = "max";

  void add(CLI::App* cmd) {
    cmd->add_flag("--no-fcm", no_fcm, "Feed H to the weight head instead of F");
    cmd->add_option("--aggregation", aggregation, "Repeated-term collapse")
        ->check(CLI::IsMember({"max", "sum"}))
        ->capture_default_str();
    cmd->add_option("--d", encoder.d, "Encoder width")->capture_default_str();
    cmd->add_option("--layers", encoder.layers, "Encoder blocks")->capture_default_str();
    cmd->add_option("--heads", encoder.heads, "Attention heads")->capture_default_str();
    cmd->add_option("--ffn-mult", encoder.ffn_multiplier, "Feed-forward width multiplier")
        ->capture_default_str();
    cmd->add_option("--max-query-len", encoder.max_query_len, "Query ids incl. specials")
        ->capture_default_str();
    cmd->add_option("--max-passage-len", encoder.max_passage_len, "Passage ids incl. specials")
        ->capture_default_str();
  }

  ModelConfig resolve() const {
    encoder.validate();
    return {encoder, !no_fcm, parse_aggregation(aggregation)};
  }
};

struct TrainOptions {
  TrainConfig config;
  bool no_tkgm = false;

  void add(CLI::App* cmd) {
    cmd->add_flag("--no-tkgm", no_tkgm, "Disable the term-level loss");
    cmd->add_option("--seed", config.seed, "Random seed")->capture_default_str();
    cmd->add_option("--epochs", config.epochs, "Training epochs")->capture_default_str();
    cmd->add_option("--batch-size", config.batch_size, "Queries per step")->capture_default_str();
    cmd->add_option("--negatives", config.negatives, "Negatives per query")->capture_default_str();
    cmd->add_option("--lr", config.optimizer.lr, "Peak learning rate")->capture_default_str();
    cmd->add_option("--weight-decay", config.optimizer.weight_decay, "AdamW decay")
        ->capture_default_str();
    cmd->add_option("--warmup-ratio", config.optimizer.warmup_ratio, "Warmup fraction")
        ->capture_default_str();
    cmd->add_option("--clip-norm", config.clip_norm, "Global gradient norm (0 = off)")
        ->capture_default_str();
  }

  TrainConfig resolve() const {
    TrainConfig c = config;
    c.losses = LossConfig{true, !no_tkgm};
    return c;
  }
};

nlohmann::json describe(const ModelConfig& m, const TrainConfig& t) {
  return {{"d", m.encoder.d},
          {"layers", m.encoder.layers},
          {"heads", m.encoder.heads},
          {"ffn_mult", m.encoder.ffn_multiplier},
          {"max_query_len", m.encoder.max_query_len},
          {"max_passage_len", m.encoder.max_passage_len},
          {"fcm", m.enable_fcm},
          {"tkgm", t.losses.term_level},
          {"aggregation", to_string(m.aggregation)},
          {"seed", t.seed},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"negatives", t.negatives},
          {"lr", t.optimizer.lr},
          {"beta1", t.optimizer.beta1},
          {"beta2", t.optimizer.beta2},
          {"adam_eps", t.optimizer.eps},
          {"weight_decay", t.optimizer.weight_decay},
          {"warmup_ratio", t.optimizer.warmup_ratio},
          {"clip_norm", t.clip_norm}};
}

std::size_t resolve_threads(std::size_t threads) {
  return threads ? threads : std::max(1u, std::thread::hardware_concurrency());
}

void write_task(const fs::path& dir, const SyntheticCorpus& corpus) {
  fs::create_directories(dir);
  write_tsv(dir / "corpus.tsv", corpus.passages);
  write_tsv(dir / "queries.tsv", corpus.queries);
  write_triples(dir / "train.jsonl", corpus.train);
  std::ofstream qrels(dir / "qrels.tsv", std::ios::binary | std::ios::trunc);
  for (const auto& [qid, docs] : corpus.qrels) {
    for (const auto& d : docs) qrels << qid << "\t0\t" << d << "\t1\n";
  }
  if (!qrels) throw IoError("failed writing " + (dir / "qrels.tsv").string());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fectek: learned sparse retrieval with feature context and term-level guidance"};
  app.require_subcommand(1);
  std::size_t threads = 0;

  // build-vocab
  auto* vocab_cmd = app.add_subcommand("build-vocab", "Build a vocabulary from a TSV corpus");
  fs::path vocab_corpus, vocab_out;
  std::size_t min_freq = 1;
  vocab_cmd->add_option("--corpus", vocab_corpus, "docid<TAB>text file")->required();
  vocab_cmd->add_option("--min-freq", min_freq, "Minimum token count")->capture_default_str();
  vocab_cmd->add_option("--out", vocab_out, "Vocabulary file")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model on JSON-lines triples");
  fs::path train_vocab, train_triples, train_out, resume;
  ModelOptions train_model;
  TrainOptions train_opts;
  train_cmd->add_option("--vocab", train_vocab, "Vocabulary file")->required();
  train_cmd->add_option("--triples", train_triples, "Training triples")->required();
  train_cmd->add_option("--out", train_out, "Output directory")->required();
  train_cmd->add_option("--resume", resume, "Start from this checkpoint's parameters");
  train_model.add(train_cmd);
  train_opts.add(train_cmd);

  // encode
  auto* encode_cmd = app.add_subcommand("encode", "Write passage term weights as JSON lines");
  fs::path enc_ckpt, enc_vocab, enc_corpus, enc_out;
  encode_cmd->add_option("--checkpoint", enc_ckpt, "Model checkpoint")->required();
  encode_cmd->add_option("--vocab", enc_vocab, "Vocabulary file")->required();
  encode_cmd->add_option("--corpus", enc_corpus, "docid<TAB>text file")->required();
  encode_cmd->add_option("--out", enc_out, "Weight stream")->required();
  encode_cmd->add_option("--threads", threads, "Workers (0 = all cores)");

  // index
  auto* index_cmd = app.add_subcommand("index", "Build an inverted index from a weight stream");
  fs::path idx_weights, idx_vocab, idx_out;
  index_cmd->add_option("--weights", idx_weights, "Weight stream")->required();
  index_cmd->add_option("--vocab", idx_vocab, "Vocabulary file")->required();
  index_cmd->add_option("--out", idx_out, "Index file")->required();

  // search
  auto* search_cmd = app.add_subcommand("search", "Retrieve top-k passages for each query");
  fs::path s_ckpt, s_vocab, s_index, s_queries, s_out;
  std::size_t k = 100;
  std::string tag = "fectek";
  search_cmd->add_option("--checkpoint", s_ckpt, "Model checkpoint")->required();
  search_cmd->add_option("--vocab", s_vocab, "Vocabulary file")->required();
  search_cmd->add_option("--index", s_index, "Index file")->required();
  search_cmd->add_option("--queries", s_queries, "qid<TAB>text file")->required();
  search_cmd->add_option("--out", s_out, "Run file")->required();
  search_cmd->add_option("--k", k, "Results per query")->capture_default_str();
  search_cmd->add_option("--tag", tag, "Run tag")->capture_default_str();
  search_cmd->add_option("--threads", threads, "Workers (0 = all cores)");

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "Score a run file against qrels");
  fs::path e_run, e_qrels;
  eval_cmd->add_option("--run", e_run, "Run file")->required();
  eval_cmd->add_option("--qrels", e_qrels, "Qrels file")->required();

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "Compare gradients with finite differences");
  GradCheckConfig grad_config;
  grad_cmd->add_option("--seed", grad_config.seed, "Random seed")->capture_default_str();
  grad_cmd->add_flag("--corrupt-grad", grad_config.corrupt_gradient)->group("");

  // ablate
  auto* ablate_cmd = app.add_subcommand("ablate", "Run the FCM x TKGM grid and print a table");
  fs::path a_dir, a_out;
  bool a_synthetic = false;
  ModelOptions ablate_model;
  TrainOptions ablate_opts;
  SyntheticConfig synth_config;
  ablate_cmd->add_option("--task", a_dir,
                         "Directory with corpus.tsv, queries.tsv, qrels.tsv, train.jsonl");
  ablate_cmd->add_flag("--synthetic", a_synthetic, "Generate the synthetic task instead");
  ablate_cmd->add_option("--out", a_out, "Directory for checkpoints and the table");
  ablate_cmd->add_option("--threads", threads, "Workers (0 = all cores)");
  ablate_model.add(ablate_cmd);
  ablate_opts.add(ablate_cmd);

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "Write the synthetic retrieval task");
  fs::path synth_out;
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();
  synth_cmd->add_option("--seed", synth_config.seed, "Random seed")->capture_default_str();
  synth_cmd->add_option("--passages", synth_config.passages, "Passages")->capture_default_str();
  synth_cmd->add_option("--vocabulary", synth_config.vocabulary, "Distinct terms")
      ->capture_default_str();
  synth_cmd->add_option("--eval-queries", synth_config.eval_queries, "Evaluation queries")
      ->capture_default_str();
  synth_cmd->add_option("--train-queries", synth_config.train_queries, "Training triples")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*vocab_cmd) {
      VocabularyBuilder builder;
      for (const auto& r : read_tsv(vocab_corpus)) builder.add_text(r.text);
      const Vocabulary vocab = builder.build(min_freq);
      vocab.save(vocab_out);
      const double coverage =
          builder.total_tokens()
              ? 100.0 * builder.covered_tokens(min_freq) / builder.total_tokens()
              : 0.0;
      std::printf("V=%zu coverage=%.2f%%\n", vocab.size(), coverage);
    } else if (*train_cmd) {
      if (!fs::exists(train_triples)) {
        std::cerr << "error: triples file not found: " << train_triples << "\n";
        return kExitUsage;
      }
      const Vocabulary vocab = Vocabulary::load(train_vocab);
      const TrainConfig tc = [&] {
        TrainConfig c = train_opts.resolve();
        c.output_dir = train_out;
        return c;
      }();
      const auto triples = read_triples(train_triples);
      FecTekModel model = resume.empty() ? FecTekModel(train_model.resolve(), vocab.size(), tc.seed)
                                         : FecTekModel::load(resume);
      check_vocabulary(model, vocab);
      nlohmann::json header = describe(model.config(), tc);
      header["vocab_size"] = vocab.size();
      header["triples"] = train_triples.string();
      if (!resume.empty()) header["resume"] = resume.string();
      const TrainResult result = train(model, vocab, triples, tc, header);
      const StepMetrics& last = result.metrics.back();
      std::printf("steps=%zu final_loss=%s checkpoint=%s\n", result.metrics.size(),
                  shortest(last.total).c_str(), result.final_checkpoint.string().c_str());
    } else if (*encode_cmd) {
      const FecTekModel model = FecTekModel::load(enc_ckpt);
      const Vocabulary vocab = Vocabulary::load(enc_vocab);
      check_vocabulary(model, vocab);
      const auto passages = read_tsv(enc_corpus);
      const auto weights = encode_passages(model, vocab, passages, resolve_threads(threads));
      std::ofstream out(enc_out, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot write " + enc_out.string());
      for (const auto& doc : weights) write_weight_line(out, doc);
      if (!out) throw IoError("failed writing " + enc_out.string());
      std::printf("encoded=%zu\n", weights.size());
    } else if (*index_cmd) {
      const Vocabulary vocab = Vocabulary::load(idx_vocab);
      const InvertedIndex index = InvertedIndex::build(
          [&](const std::function<void(const DocumentWeights&)>& fn) {
            for_each_weight_line(idx_weights, fn);
          },
          vocab.size());
      index.save(idx_out);
      std::printf("docs=%zu vocab=%zu doc_scale=%s\n", index.doc_count(), index.vocab_size(),
                  shortest(index.doc_scale()).c_str());
    } else if (*search_cmd) {
      const FecTekModel model = FecTekModel::load(s_ckpt);
      const Vocabulary vocab = Vocabulary::load(s_vocab);
      check_vocabulary(model, vocab);
      const InvertedIndex index = InvertedIndex::load(s_index);
      if (index.vocab_size() != vocab.size()) {
        throw ConfigError("index vocabulary size " + std::to_string(index.vocab_size()) +
                          " does not match vocabulary of size " + std::to_string(vocab.size()));
      }
      const auto queries = read_tsv(s_queries);
      const RunFile run = retrieve(model, vocab, index, queries, k, tag, resolve_threads(threads));
      write_run(run, s_out);
      std::printf("queries=%zu\n", run.queries.size());
    } else if (*eval_cmd) {
      const RunFile run = read_run(e_run);
      const Qrels qrels = read_qrels(e_qrels);
      std::printf("MRR@10=%s Recall@100=%s\n", shortest(mrr_at_k(run, qrels, 10)).c_str(),
                  shortest(recall_at_k(run, qrels, 100)).c_str());
    } else if (*grad_cmd) {
      const GradCheckReport report = run_gradcheck(grad_config);
      for (const auto& g : report.groups) {
        std::printf("%-10s max_rel_error=%.3e checked=%zu skipped_kinks=%zu worst=%s[%zu]\n",
                    g.group.c_str(), g.max_rel_error, g.checked, g.skipped_kinks,
                    g.worst_parameter.c_str(), g.worst_index);
      }
      std::printf("seconds=%.1f tolerance=%.0e\n", report.seconds, report.tolerance);
      if (!report.passed()) {
        const GroupReport& w = report.worst();
        std::printf("FAIL worst offender: %s[%zu] (group %s, relative error %.3e)\n",
                    w.worst_parameter.c_str(), w.worst_index, w.group.c_str(), w.max_rel_error);
        return kExitFailure;
      }
      std::printf("PASS\n");
    } else if (*ablate_cmd) {
      if (a_synthetic == !a_dir.empty()) {
        std::cerr << "error: give exactly one of --task and --synthetic\n";
        return kExitUsage;
      }
      RetrievalTask task;
      if (a_synthetic) {
        SyntheticCorpus corpus = make_synthetic_corpus(synth_config);
        task.passages = std::move(corpus.passages);
        task.queries = std::move(corpus.queries);
        task.qrels = std::move(corpus.qrels);
        task.train = std::move(corpus.train);
      } else {
        task.passages = read_tsv(a_dir / "corpus.tsv");
        task.queries = read_tsv(a_dir / "queries.tsv");
        task.qrels = read_qrels(a_dir / "qrels.tsv");
        task.train = read_triples(a_dir / "train.jsonl");
      }
      task.vocab = build_task_vocabulary(task.passages, task.train);
      TrainConfig tc = ablate_opts.resolve();
      tc.output_dir = a_out;
      const auto rows = run_ablation(task, ablate_model.resolve(), tc, resolve_threads(threads));
      const std::string table = format_ablation_table(rows);
      std::fputs(table.c_str(), stdout);
      if (!a_out.empty()) {
        std::ofstream(a_out / "ablation.md", std::ios::binary | std::ios::trunc) << table;
      }
    } else if (*synth_cmd) {
      const SyntheticCorpus corpus = make_synthetic_corpus(synth_config);
      write_task(synth_out, corpus);
      std::printf("passages=%zu queries=%zu train=%zu\n", corpus.passages.size(),
                  corpus.queries.size(), corpus.train.size());
    }
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const CorruptDataError& e) {
    std::cerr << "corrupt data: " << e.what() << "\n";
    return kExitCorrupt;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return 0;
}
