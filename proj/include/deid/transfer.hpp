#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "deid/bpe.hpp"
#include "deid/corpus.hpp"
#include "deid/metrics.hpp"
#include "deid/model.hpp"
#include "deid/synthetic.hpp"
#include "deid/training.hpp"

namespace deid {

enum class StrategyKind {
  ZeroShot,
  PretrainThenFewShot,
  MultiTask,
  MultiTaskThenFewShot,
  ScratchFewShot,
};

std::string to_string(StrategyKind kind);
StrategyKind parse_strategy_kind(std::string_view name);
bool needs_fewshot(StrategyKind kind);

// Corpora and shared vocabulary of one experiment. The target pool is the
// only source of few-shot sentences.
struct TransferData {
  Corpus source;
  Corpus target_pool;
  Corpus target_dev;
  Vocab vocab;
  ModelConfig model;
};

// Synthetic benchmark plus a vocabulary trained on source text and the
// unlabeled target text.
TransferData prepare_synthetic(const SyntheticConfig& config, std::uint64_t seed,
                               std::size_t vocab_size, ModelConfig model = {});

// Phase budgets and optimizer settings shared by all strategies.
struct ExperimentConfig {
  TrainConfig train;  // learning rate, warmup, batch size, clipping
  std::size_t source_epochs = 3;
  std::size_t fewshot_epochs = 25;
  std::size_t multitask_epochs = 3;
  // Peak learning rate of few-shot phases that continue from a trained
  // checkpoint (PretrainThenFewShot, MultiTaskThenFewShot). 0 = train.learning_rate.
  double adapt_learning_rate = 0.0;

  nlohmann::json to_json() const;
};

struct StrategySpec {
  StrategyKind kind = StrategyKind::ZeroShot;
  FewShotSpec fewshot;
  std::optional<Corpus> fewshot_corpus;  // overrides sampling when set
  std::uint64_t seed = 0;
};

struct PhaseRecord {
  std::string name;
  std::vector<std::string> corpora;
  std::size_t epochs = 0;
  TrainReport report;
};

struct StrategyReport {
  StrategyKind kind = StrategyKind::ZeroShot;
  std::uint64_t seed = 0;
  std::optional<std::size_t> k;
  MetricsReport metrics;
  std::string dev_hash;
  std::vector<PhaseRecord> phases;
  // Every corpus name any phase read, in order (the access audit).
  std::vector<std::string> corpora_read;
  Corpus predictions;
  nlohmann::json config;

  nlohmann::json to_json() const;  // without the predictions corpus
};

// Source-trained models keyed by (seed, epochs, config); shared between the
// ZeroShot and PretrainThenFewShot cells of one seed. Thread-safe.
class PretrainCache {
 public:
  // Returns a copy; `train` runs at most once per key.
  TrainResult get_or_train(const std::string& key, const std::function<TrainResult()>& train);

 private:
  struct Entry {
    std::once_flag once;
    TrainResult result;
  };
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Entry>> entries_;
};

StrategyReport run_strategy(const StrategySpec& spec, const TransferData& data,
                            const ExperimentConfig& config, PretrainCache* cache = nullptr);

// Runs every (spec) cell, `jobs` at a time; results keep the input order.
std::vector<StrategyReport> run_strategies(const std::vector<StrategySpec>& specs,
                                           const TransferData& data,
                                           const ExperimentConfig& config, std::size_t jobs = 1);

// ---------------------------------------------------------------------------
// Scratch vs pretrain learning curves over few-shot sizes

struct GridSpec {
  std::vector<std::size_t> ks{50, 100, 250, 500};
  std::vector<StrategyKind> kinds{StrategyKind::ScratchFewShot, StrategyKind::PretrainThenFewShot};
  std::size_t epochs = 15;
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

struct Curve {
  StrategyKind kind = StrategyKind::ScratchFewShot;
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::vector<double> dev_f1;  // one entry per epoch

  double final_f1() const { return dev_f1.empty() ? 0.0 : dev_f1.back(); }
};

struct GridResult {
  std::vector<Curve> curves;
  std::vector<std::string> warnings;  // skipped cells

  // Mean final-epoch F1 over seeds; nullopt when no curve exists.
  std::optional<double> mean_final(StrategyKind kind, std::size_t k) const;
  nlohmann::json to_json() const;
  std::string to_csv() const;
};

GridResult run_grid(const GridSpec& grid, const TransferData& data, const ExperimentConfig& config,
                    std::size_t jobs = 1);

// ---------------------------------------------------------------------------
// Reporting

// Rows in strategy order, best value per column marked with '*'. Throws when
// the reports were evaluated on different dev sets.
std::string compare_table(const std::vector<StrategyReport>& reports);
std::string compare_csv(const std::vector<StrategyReport>& reports);

// Mean micro P/R/F1 per (kind, k) over seeds.
struct StrategySummary {
  StrategyKind kind = StrategyKind::ZeroShot;
  std::optional<std::size_t> k;
  std::size_t runs = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};
std::vector<StrategySummary> summarize(const std::vector<StrategyReport>& reports);
std::string summary_table(const std::vector<StrategySummary>& rows);

// Builds an annotation pool from raw sentences: score with a trained model,
// split into predicted-PHI and predicted-clean sentences, then take n/2 from
// each (topping up from the other when one side runs short). Deterministic.
Corpus select_for_annotation(const Model& model, const Vocab& vocab, const Corpus& raw,
                             std::size_t n, std::uint64_t seed);

}  // namespace deid
