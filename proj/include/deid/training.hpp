#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "deid/bpe.hpp"
#include "deid/corpus.hpp"
#include "deid/kv_config.hpp"
#include "deid/model.hpp"
#include "deid/tensor.hpp"

namespace deid {

struct TrainConfig {
  double learning_rate = 3e-5;
  double warmup_fraction = 0.10;
  std::size_t epochs = 3;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip_norm = 1.0;  // <= 0 disables clipping
  double weight_decay = 0.0;    // decoupled, off by default
  bool eval_each_epoch = true;

  void validate() const;
  // Keys match the field names; unknown keys are rejected.
  static TrainConfig from_kv(const KvConfig& kv);
  static TrainConfig from_kv(const KvConfig& kv, TrainConfig base);
  nlohmann::json to_json() const;
};

// Linear warmup 0 -> peak over ceil(warmup_fraction * total) steps, then
// linear decay to 0 at total_steps. Step t's update uses lr_at(t).
double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& config);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t t = 0;
};

AdamState init_adam(const nn::ParameterSet& params);

// Global-norm clipping (when enabled) then a bias-corrected Adam update from
// the gradients stored on the parameters. Returns the pre-clip global norm.
double adam_step(nn::ParameterSet& params, AdamState& state, double lr, const TrainConfig& config);

struct BatchItem {
  std::size_t dataset = 0;
  std::size_t index = 0;  // sentence index within the dataset

  bool operator==(const BatchItem&) const = default;
};
using Batch = std::vector<BatchItem>;

// One epoch of batches over several datasets. Dataset i is shuffled with its
// own stream derived from (seed, epoch, i) and cut into ceil(n_i / batch_size)
// batches; a dataset smaller than one batch is upsampled (cycled through its
// shuffled order) to exactly one full batch. Batches of all datasets are
// interleaved proportionally: batch j of dataset i sits at (j + 0.5) / count_i,
// ties broken by dataset index.
std::vector<Batch> epoch_batches(const std::vector<std::size_t>& dataset_sizes,
                                 std::size_t batch_size, std::uint64_t seed, std::size_t epoch);

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean over the epoch's steps
  std::optional<double> dev_precision;
  std::optional<double> dev_recall;
  std::optional<double> dev_f1;
};

struct TrainReport {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::optional<std::size_t> best_epoch;  // 1-based; set when dev selection ran
  double wall_seconds = 0.0;
  std::vector<std::string> corpora_read;  // names of every corpus the run touched

  std::vector<double> loss_trace() const;
  // One JSON object per line: {"kind":"step",...} then {"kind":"epoch",...}, then a summary.
  std::string to_json_lines() const;
};

struct TrainResult {
  nn::ParameterSet params;
  TrainReport report;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Starts from `init` (which is not modified). Selects the epoch with the best
// dev entity-F1 (earliest on ties) when eval_each_epoch and dev is non-empty;
// otherwise returns the final weights.
TrainResult fine_tune(const ModelConfig& model, const nn::ParameterSet& init, const Vocab& vocab,
                      const Corpus& train, const Corpus& dev, const TrainConfig& config,
                      const EpochCallback& on_epoch = {});

TrainResult multi_task_train(const ModelConfig& model, const nn::ParameterSet& init,
                             const Vocab& vocab, const std::vector<Corpus>& datasets,
                             const Corpus& dev, const TrainConfig& config,
                             const EpochCallback& on_epoch = {});

}  // namespace deid
