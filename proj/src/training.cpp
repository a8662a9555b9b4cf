#include "deid/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>
#include <sstream>

#include "deid/error.hpp"
#include "deid/metrics.hpp"
#include "deid/rng.hpp"

namespace deid {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
    throw ConfigError("warmup_fraction must lie in [0, 1)");
  }
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
}

TrainConfig TrainConfig::from_kv(const KvConfig& kv) { return from_kv(kv, TrainConfig{}); }

TrainConfig TrainConfig::from_kv(const KvConfig& kv, TrainConfig base) {
  static const std::set<std::string> known{
      "learning_rate", "warmup_fraction", "epochs",         "batch_size",   "seed",
      "beta1",         "beta2",           "adam_eps",       "grad_clip_norm", "weight_decay",
      "eval_each_epoch"};
  for (const auto& [k, _] : kv.values()) {
    if (!known.count(k)) throw ConfigError("unknown training key '" + k + "'");
  }
  auto non_negative = [&](const std::string& key, std::int64_t fallback) {
    const auto v = kv.get_int(key, fallback);
    if (v < 0) throw ConfigError("key '" + key + "' must be >= 0");
    return v;
  };
  TrainConfig c = base;
  c.learning_rate = kv.get_double("learning_rate", c.learning_rate);
  c.warmup_fraction = kv.get_double("warmup_fraction", c.warmup_fraction);
  c.epochs = static_cast<std::size_t>(non_negative("epochs", static_cast<std::int64_t>(c.epochs)));
  c.batch_size =
      static_cast<std::size_t>(non_negative("batch_size", static_cast<std::int64_t>(c.batch_size)));
  c.seed = static_cast<std::uint64_t>(non_negative("seed", static_cast<std::int64_t>(c.seed)));
  c.beta1 = kv.get_double("beta1", c.beta1);
  c.beta2 = kv.get_double("beta2", c.beta2);
  c.adam_eps = kv.get_double("adam_eps", c.adam_eps);
  c.grad_clip_norm = kv.get_double("grad_clip_norm", c.grad_clip_norm);
  c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
  c.eval_each_epoch = kv.get_bool("eval_each_epoch", c.eval_each_epoch);
  c.validate();
  return c;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"warmup_fraction", warmup_fraction},
          {"epochs", epochs},               {"batch_size", batch_size},
          {"seed", seed},                   {"beta1", beta1},
          {"beta2", beta2},                 {"adam_eps", adam_eps},
          {"grad_clip_norm", grad_clip_norm}, {"weight_decay", weight_decay},
          {"eval_each_epoch", eval_each_epoch}};
}

double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& config) {
  if (total_steps == 0 || step >= total_steps) return 0.0;
  const auto warmup = static_cast<std::size_t>(
      std::ceil(config.warmup_fraction * static_cast<double>(total_steps)));
  const double peak = config.learning_rate;
  if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  return peak * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup);
}

AdamState init_adam(const nn::ParameterSet& params) {
  AdamState s;
  for (const auto& [_, t] : params.entries()) {
    s.m.emplace_back(t.size(), 0.0);
    s.v.emplace_back(t.size(), 0.0);
  }
  return s;
}

double adam_step(nn::ParameterSet& params, AdamState& state, double lr, const TrainConfig& config) {
  double sq = 0.0;
  for (const auto& [_, t] : params.entries()) {
    for (double g : t.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double clip_scale =
      config.grad_clip_norm > 0.0 && norm > config.grad_clip_norm ? config.grad_clip_norm / norm : 1.0;

  ++state.t;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
  auto& entries = params.entries();
  for (std::size_t p = 0; p < entries.size(); ++p) {
    auto& t = entries[p].second;
    const auto g = t.grad();
    auto w = t.mutable_values();
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * clip_scale;
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + config.adam_eps) + config.weight_decay * w[i]);
    }
  }
  return norm;
}

std::vector<Batch> epoch_batches(const std::vector<std::size_t>& dataset_sizes,
                                 std::size_t batch_size, std::uint64_t seed, std::size_t epoch) {
  struct Slot {
    double position;
    std::size_t dataset;
    Batch batch;
  };
  std::vector<Slot> slots;
  for (std::size_t d = 0; d < dataset_sizes.size(); ++d) {
    const std::size_t n = dataset_sizes[d];
    if (n == 0) continue;
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, epoch, d));
    rng.shuffle(order);
    std::vector<Batch> batches;
    if (n < batch_size) {
      Batch b;
      for (std::size_t i = 0; i < batch_size; ++i) b.push_back({d, order[i % n]});
      batches.push_back(std::move(b));
    } else {
      for (std::size_t start = 0; start < n; start += batch_size) {
        Batch b;
        for (std::size_t i = start; i < std::min(n, start + batch_size); ++i) b.push_back({d, order[i]});
        batches.push_back(std::move(b));
      }
    }
    const auto count = static_cast<double>(batches.size());
    for (std::size_t j = 0; j < batches.size(); ++j) {
      slots.push_back({(static_cast<double>(j) + 0.5) / count, d, std::move(batches[j])});
    }
  }
  std::stable_sort(slots.begin(), slots.end(), [](const Slot& a, const Slot& b) {
    if (a.position != b.position) return a.position < b.position;
    return a.dataset < b.dataset;
  });
  std::vector<Batch> out;
  out.reserve(slots.size());
  for (auto& s : slots) out.push_back(std::move(s.batch));
  return out;
}

std::vector<double> TrainReport::loss_trace() const {
  std::vector<double> out;
  out.reserve(steps.size());
  for (const auto& s : steps) out.push_back(s.loss);
  return out;
}

std::string TrainReport::to_json_lines() const {
  std::ostringstream out;
  for (const auto& s : steps) {
    out << nlohmann::json{{"kind", "step"}, {"step", s.step},  {"epoch", s.epoch},
                          {"loss", s.loss}, {"lr", s.lr},      {"grad_norm", s.grad_norm}}
               .dump()
        << '\n';
  }
  for (const auto& e : epochs) {
    nlohmann::json j{{"kind", "epoch"}, {"epoch", e.epoch}, {"train_loss", e.train_loss}};
    if (e.dev_f1) {
      j["dev_precision"] = *e.dev_precision;
      j["dev_recall"] = *e.dev_recall;
      j["dev_f1"] = *e.dev_f1;
    }
    out << j.dump() << '\n';
  }
  nlohmann::json summary{{"kind", "summary"}, {"wall_seconds", wall_seconds},
                         {"corpora_read", corpora_read}};
  summary["best_epoch"] = best_epoch ? nlohmann::json(*best_epoch) : nlohmann::json(nullptr);
  out << summary.dump() << '\n';
  return out.str();
}

namespace {

struct EncodedDataset {
  std::vector<EncodedSentence> encoded;
  std::vector<std::vector<int>> targets;
};

EncodedDataset encode_dataset(const Corpus& corpus, const Vocab& vocab, std::size_t max_len) {
  EncodedDataset out;
  out.encoded.reserve(corpus.size());
  for (const auto& s : corpus.sentences) {
    auto enc = encode(s, vocab, max_len);
    auto labels = s.labels();
    labels.resize(enc.num_words);
    out.targets.push_back(align_labels(enc, labels));
    out.encoded.push_back(std::move(enc));
  }
  return out;
}

}  // namespace

TrainResult multi_task_train(const ModelConfig& model, const nn::ParameterSet& init,
                             const Vocab& vocab, const std::vector<Corpus>& datasets,
                             const Corpus& dev, const TrainConfig& config,
                             const EpochCallback& on_epoch) {
  config.validate();
  model.validate();
  if (datasets.empty()) throw ConfigError("training needs at least one dataset");
  for (const auto& d : datasets) {
    if (!(d.label_set == datasets[0].label_set)) {
      throw LabelError("dataset '" + d.name + "' has a different label set from '" +
                       datasets[0].name + "'");
    }
  }
  if (!dev.empty() && !(dev.label_set == datasets[0].label_set)) {
    throw LabelError("dev corpus '" + dev.name + "' has a different label set");
  }
  std::size_t total_rows = 0;
  for (const auto& d : datasets) total_rows += d.size();
  if (total_rows == 0) throw ConfigError("training data is empty");

  const auto start_time = std::chrono::steady_clock::now();
  TrainResult result;
  for (const auto& d : datasets) result.report.corpora_read.push_back(d.name);
  if (!dev.empty()) result.report.corpora_read.push_back(dev.name);

  std::vector<EncodedDataset> data;
  std::vector<std::size_t> sizes;
  for (const auto& d : datasets) {
    data.push_back(encode_dataset(d, vocab, model.max_len));
    sizes.push_back(d.size());
  }

  std::vector<std::vector<Batch>> schedule;
  std::size_t total_steps = 0;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    schedule.push_back(epoch_batches(sizes, config.batch_size, config.seed, e));
    total_steps += schedule.back().size();
  }

  nn::ParameterSet params = init.clone();
  for (auto& [_, t] : params.entries()) t.set_requires_grad(true);
  AdamState adam = init_adam(params);
  Rng dropout_rng(derive_seed(config.seed, 0xD809));
  const bool select = config.eval_each_epoch && !dev.empty();
  double best_f1 = -1.0;
  nn::ParameterSet best;

  std::size_t step = 0;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    double loss_sum = 0.0;
    for (const auto& batch : schedule[e]) {
      std::vector<const EncodedSentence*> rows;
      std::vector<int> targets;
      for (const auto& item : batch) {
        const auto& ds = data[item.dataset];
        rows.push_back(&ds.encoded[item.index]);
        targets.insert(targets.end(), ds.targets[item.index].begin(), ds.targets[item.index].end());
      }
      const PackedBatch packed = pack(rows);
      const double lr = lr_at(step, total_steps, config);
      double loss_value = 0.0;
      params.zero_grad();
      if (packed.rows() > 0) {
        nn::Graph graph;
        nn::Graph::Scope scope(graph);
        ForwardOptions fo{true, &dropout_rng};
        const nn::Tensor l = loss(forward(model, params, packed, fo), targets);
        loss_value = l.item();
        if (!std::isfinite(loss_value)) {
          std::string ids;
          for (std::size_t i = 0; i < batch.size() && i < 64; ++i) {
            ids += (i ? "," : "") + std::to_string(batch[i].dataset) + ":" +
                   std::to_string(batch[i].index);
          }
          throw Error("numeric_error", "non-finite loss at step " + std::to_string(step) +
                                           " (epoch " + std::to_string(e + 1) +
                                           ", lr=" + std::to_string(lr) + ", batch=" + ids + ")");
        }
        nn::backward(l);
      }
      const double norm = adam_step(params, adam, lr, config);
      result.report.steps.push_back({step, e + 1, loss_value, lr, norm});
      loss_sum += loss_value;
      ++step;
    }
    EpochRecord rec;
    rec.epoch = e + 1;
    rec.train_loss = schedule[e].empty() ? 0.0 : loss_sum / static_cast<double>(schedule[e].size());
    if (select) {
      const auto m = evaluate(dev, predict_corpus(model, params, dev, vocab)).micro;
      rec.dev_precision = m.precision;
      rec.dev_recall = m.recall;
      rec.dev_f1 = m.f1;
      if (m.f1 > best_f1) {
        best_f1 = m.f1;
        best = params.clone();
        result.report.best_epoch = e + 1;
      }
    }
    result.report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  params.zero_grad();
  result.params = select ? std::move(best) : std::move(params);
  result.report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
  return result;
}

TrainResult fine_tune(const ModelConfig& model, const nn::ParameterSet& init, const Vocab& vocab,
                      const Corpus& train, const Corpus& dev, const TrainConfig& config,
                      const EpochCallback& on_epoch) {
  if (train.empty()) throw ConfigError("fine_tune: training corpus '" + train.name + "' is empty");
  return multi_task_train(model, init, vocab, {train}, dev, config, on_epoch);
}

}  // namespace deid
