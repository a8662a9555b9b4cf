#include "deid/transfer.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "deid/error.hpp"
#include "deid/hash.hpp"
#include "deid/rng.hpp"
#include "parallel.hpp"

namespace deid {

namespace {

constexpr std::uint64_t kInitStream = 0x11;
constexpr std::uint64_t kPretrainStream = 0x21;
constexpr std::uint64_t kFewShotStream = 0x31;
constexpr std::uint64_t kMultiTaskStream = 0x41;

std::string sentence_text(const Sentence& s) {
  std::string out;
  for (const auto& t : s.tokens) {
    if (!out.empty()) out += ' ';
    out += t.text;
  }
  return out;
}

TrainConfig phase_config(const ExperimentConfig& config, std::size_t epochs, std::uint64_t seed) {
  TrainConfig t = config.train;
  t.epochs = epochs;
  t.seed = seed;
  return t;
}

double adapt_lr(const ExperimentConfig& config) {
  return config.adapt_learning_rate > 0.0 ? config.adapt_learning_rate : config.train.learning_rate;
}

}  // namespace

std::string to_string(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::ZeroShot: return "ZeroShot";
    case StrategyKind::PretrainThenFewShot: return "PretrainThenFewShot";
    case StrategyKind::MultiTask: return "MultiTask";
    case StrategyKind::MultiTaskThenFewShot: return "MultiTaskThenFewShot";
    case StrategyKind::ScratchFewShot: return "ScratchFewShot";
  }
  return "?";
}

StrategyKind parse_strategy_kind(std::string_view name) {
  for (auto k : {StrategyKind::ZeroShot, StrategyKind::PretrainThenFewShot, StrategyKind::MultiTask,
                 StrategyKind::MultiTaskThenFewShot, StrategyKind::ScratchFewShot}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown strategy '" + std::string(name) +
                    "' (expected ZeroShot, PretrainThenFewShot, MultiTask, MultiTaskThenFewShot "
                    "or ScratchFewShot)");
}

bool needs_fewshot(StrategyKind kind) { return kind != StrategyKind::ZeroShot; }

TransferData prepare_synthetic(const SyntheticConfig& config, std::uint64_t seed,
                               std::size_t vocab_size, ModelConfig model) {
  auto bench = generate_synthetic_bilingual(config, seed);
  std::vector<std::string> texts;
  texts.reserve(bench.source.size() + bench.raw_target_text.size());
  for (const auto& s : bench.source.sentences) texts.push_back(sentence_text(s));
  for (const auto& t : bench.raw_target_text) texts.push_back(t);
  TransferData data;
  data.vocab = train_bpe(texts, vocab_size, seed);
  data.source = std::move(bench.source);
  data.target_pool = std::move(bench.target);
  data.target_dev = std::move(bench.target_dev);
  model.vocab_size = data.vocab.size();
  model.num_labels = data.source.label_set.size();
  model.validate(data.source.label_set);
  data.model = model;
  return data;
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"train", train.to_json()},
          {"source_epochs", source_epochs},
          {"fewshot_epochs", fewshot_epochs},
          {"multitask_epochs", multitask_epochs},
          {"adapt_learning_rate", adapt_learning_rate}};
}

nlohmann::json StrategyReport::to_json() const {
  nlohmann::json j{{"strategy", to_string(kind)},
                   {"seed", seed},
                   {"metrics", metrics.to_json()},
                   {"dev_hash", dev_hash},
                   {"corpora_read", corpora_read},
                   {"config", config}};
  j["k"] = k ? nlohmann::json(*k) : nlohmann::json(nullptr);
  j["phases"] = nlohmann::json::array();
  for (const auto& p : phases) {
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : p.report.epochs) {
      epochs.push_back({{"epoch", e.epoch},
                        {"train_loss", e.train_loss},
                        {"dev_f1", e.dev_f1 ? nlohmann::json(*e.dev_f1) : nlohmann::json(nullptr)}});
    }
    j["phases"].push_back({{"name", p.name},
                           {"corpora", p.corpora},
                           {"epochs", p.epochs},
                           {"steps", p.report.steps.size()},
                           {"best_epoch", p.report.best_epoch ? nlohmann::json(*p.report.best_epoch)
                                                              : nlohmann::json(nullptr)},
                           {"epoch_records", epochs}});
  }
  return j;
}

TrainResult PretrainCache::get_or_train(const std::string& key,
                                        const std::function<TrainResult()>& train) {
  std::shared_ptr<Entry> entry;
  {
    std::lock_guard lock(mutex_);
    auto& slot = entries_[key];
    if (!slot) slot = std::make_shared<Entry>();
    entry = slot;
  }
  std::call_once(entry->once, [&] { entry->result = train(); });
  return {entry->result.params.clone(), entry->result.report};
}

namespace {

TrainResult pretrain_source(const TransferData& data, const ExperimentConfig& config,
                            std::uint64_t seed, PretrainCache* cache) {
  auto train = [&] {
    const auto init = init_parameters(data.model, derive_seed(seed, kInitStream));
    return fine_tune(data.model, init, data.vocab, data.source, data.target_dev,
                     phase_config(config, config.source_epochs, derive_seed(seed, kPretrainStream)));
  };
  if (cache == nullptr) return train();
  const std::string key = std::to_string(seed) + "|" + config.to_json().dump() + "|" +
                          data.model.hash() + "|" + corpus_hash(data.source);
  return cache->get_or_train(key, train);
}

}  // namespace

StrategyReport run_strategy(const StrategySpec& spec, const TransferData& data,
                            const ExperimentConfig& config, PretrainCache* cache) {
  if (data.target_dev.empty()) throw ConfigError("target dev corpus is empty");
  StrategyReport report;
  report.kind = spec.kind;
  report.seed = spec.seed;
  report.dev_hash = corpus_hash(data.target_dev);
  report.config = config.to_json();
  report.config["model"] = data.model.to_json();

  Corpus fewshot;
  if (needs_fewshot(spec.kind)) {
    fewshot = spec.fewshot_corpus ? *spec.fewshot_corpus : sample_fewshot(data.target_pool, spec.fewshot);
    if (fewshot.empty()) throw ConfigError(to_string(spec.kind) + " needs a non-empty few-shot corpus");
    report.k = fewshot.size();
    report.config["fewshot"] = {{"k", fewshot.size()},
                                {"seed", spec.fewshot.seed},
                                {"hash", corpus_hash(fewshot)},
                                {"explicit", spec.fewshot_corpus.has_value()}};
  }

  auto record = [&](std::string name, std::vector<std::string> corpora, std::size_t epochs,
                    TrainReport r) {
    for (const auto& c : r.corpora_read) report.corpora_read.push_back(c);
    report.phases.push_back({std::move(name), std::move(corpora), epochs, std::move(r)});
  };

  nn::ParameterSet params;
  switch (spec.kind) {
    case StrategyKind::ZeroShot:
    case StrategyKind::PretrainThenFewShot: {
      auto pre = pretrain_source(data, config, spec.seed, cache);
      record("fine-tune source", {data.source.name}, config.source_epochs, std::move(pre.report));
      params = std::move(pre.params);
      break;
    }
    case StrategyKind::MultiTask:
    case StrategyKind::MultiTaskThenFewShot: {
      const auto init = init_parameters(data.model, derive_seed(spec.seed, kInitStream));
      auto r = multi_task_train(
          data.model, init, data.vocab, {data.source, fewshot}, data.target_dev,
          phase_config(config, config.multitask_epochs, derive_seed(spec.seed, kMultiTaskStream)));
      record("multi-task source+fewshot", {data.source.name, fewshot.name}, config.multitask_epochs,
             std::move(r.report));
      params = std::move(r.params);
      break;
    }
    case StrategyKind::ScratchFewShot:
      params = init_parameters(data.model, derive_seed(spec.seed, kInitStream));
      break;
  }

  if (spec.kind == StrategyKind::PretrainThenFewShot ||
      spec.kind == StrategyKind::MultiTaskThenFewShot ||
      spec.kind == StrategyKind::ScratchFewShot) {
    TrainConfig tc =
        phase_config(config, config.fewshot_epochs, derive_seed(spec.seed, kFewShotStream));
    if (spec.kind != StrategyKind::ScratchFewShot) tc.learning_rate = adapt_lr(config);
    auto r = fine_tune(data.model, params, data.vocab, fewshot, data.target_dev, tc);
    record("fine-tune fewshot", {fewshot.name}, config.fewshot_epochs, std::move(r.report));
    params = std::move(r.params);
  }

  report.predictions = predict_corpus(data.model, params, data.target_dev, data.vocab);
  report.metrics = evaluate(data.target_dev, report.predictions);
  return report;
}

std::vector<StrategyReport> run_strategies(const std::vector<StrategySpec>& specs,
                                           const TransferData& data,
                                           const ExperimentConfig& config, std::size_t jobs) {
  PretrainCache cache;
  std::vector<StrategyReport> out(specs.size());
  parallel_for(specs.size(), jobs,
               [&](std::size_t i) { out[i] = run_strategy(specs[i], data, config, &cache); });
  return out;
}

// ---------------------------------------------------------------------------
// Grid

std::optional<double> GridResult::mean_final(StrategyKind kind, std::size_t k) const {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& c : curves) {
    if (c.kind == kind && c.k == k) {
      sum += c.final_f1();
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

nlohmann::json GridResult::to_json() const {
  nlohmann::json j{{"curves", nlohmann::json::array()}, {"warnings", warnings}};
  for (const auto& c : curves) {
    j["curves"].push_back(
        {{"kind", to_string(c.kind)}, {"k", c.k}, {"seed", c.seed}, {"dev_f1", c.dev_f1}});
  }
  return j;
}

std::string GridResult::to_csv() const {
  std::ostringstream out;
  out << "kind,k,seed,epoch,dev_f1\n";
  char buf[32];
  for (const auto& c : curves) {
    for (std::size_t e = 0; e < c.dev_f1.size(); ++e) {
      std::snprintf(buf, sizeof buf, "%.6f", c.dev_f1[e]);
      out << to_string(c.kind) << ',' << c.k << ',' << c.seed << ',' << (e + 1) << ',' << buf << '\n';
    }
  }
  return out.str();
}

GridResult run_grid(const GridSpec& grid, const TransferData& data, const ExperimentConfig& config,
                    std::size_t jobs) {
  for (auto kind : grid.kinds) {
    if (kind != StrategyKind::ScratchFewShot && kind != StrategyKind::PretrainThenFewShot) {
      throw ConfigError("grid kinds must be ScratchFewShot or PretrainThenFewShot");
    }
  }
  GridResult result;
  struct Cell {
    StrategyKind kind;
    std::size_t k;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (std::size_t k : grid.ks) {
    if (k > data.target_pool.size()) {
      result.warnings.push_back("K=" + std::to_string(k) + " exceeds the target pool of " +
                                std::to_string(data.target_pool.size()) + " sentences; cell skipped");
      continue;
    }
    for (auto seed : grid.seeds) {
      for (auto kind : grid.kinds) cells.push_back({kind, k, seed});
    }
  }

  PretrainCache cache;
  std::vector<std::optional<Curve>> curves(cells.size());
  std::vector<std::string> errors(cells.size());
  parallel_for(cells.size(), jobs, [&](std::size_t i) {
    const Cell& cell = cells[i];
    Corpus fewshot;
    try {
      fewshot = sample_fewshot(data.target_pool, {cell.k, cell.seed, true});
    } catch (const Error& e) {
      errors[i] = "K=" + std::to_string(cell.k) + " seed " + std::to_string(cell.seed) +
                  ": " + e.what() + "; cell skipped";
      return;
    }
    nn::ParameterSet start =
        cell.kind == StrategyKind::PretrainThenFewShot
            ? pretrain_source(data, config, cell.seed, &cache).params
            : init_parameters(data.model, derive_seed(cell.seed, kInitStream));
    TrainConfig tc = phase_config(config, grid.epochs, derive_seed(cell.seed, kFewShotStream));
    if (cell.kind == StrategyKind::PretrainThenFewShot) tc.learning_rate = adapt_lr(config);
    tc.eval_each_epoch = true;
    auto r = fine_tune(data.model, start, data.vocab, fewshot, data.target_dev, tc);
    Curve c{cell.kind, cell.k, cell.seed, {}};
    for (const auto& e : r.report.epochs) c.dev_f1.push_back(e.dev_f1.value_or(0.0));
    curves[i] = std::move(c);
  });
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (curves[i]) result.curves.push_back(std::move(*curves[i]));
    if (!errors[i].empty()) result.warnings.push_back(errors[i]);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Reporting

namespace {

std::string row_label(StrategyKind kind, std::optional<std::size_t> k) {
  std::string s = to_string(kind);
  if (k) s += " (K=" + std::to_string(*k) + ")";
  return s;
}

template <typename Row, typename Get>
std::string format_rows(const std::vector<Row>& rows, Get get, const std::vector<std::string>& labels) {
  double best[3] = {-1.0, -1.0, -1.0};
  for (const auto& r : rows) {
    const auto v = get(r);
    for (int c = 0; c < 3; ++c) best[c] = std::max(best[c], v[c]);
  }
  std::size_t width = 8;
  for (const auto& l : labels) width = std::max(width, l.size());
  std::ostringstream out;
  char buf[64];
  out << std::string(width, ' ').replace(0, 8, "Strategy") << " | Precision | Recall    | F1\n";
  out << std::string(width, '-') << "-+-----------+-----------+----------\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto v = get(rows[i]);
    out << labels[i] << std::string(width - labels[i].size(), ' ');
    for (int c = 0; c < 3; ++c) {
      std::snprintf(buf, sizeof buf, " | %6.2f%-3s", 100.0 * v[c], v[c] == best[c] ? " *" : "");
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

std::vector<const StrategyReport*> ordered(const std::vector<StrategyReport>& reports) {
  if (reports.empty()) throw ConfigError("no reports to compare");
  for (const auto& r : reports) {
    if (r.dev_hash != reports.front().dev_hash) {
      throw Error("dev_mismatch", "reports were evaluated on different dev sets (" +
                                      reports.front().dev_hash + " vs " + r.dev_hash + ")");
    }
  }
  std::vector<const StrategyReport*> rows;
  for (const auto& r : reports) rows.push_back(&r);
  std::stable_sort(rows.begin(), rows.end(), [](const StrategyReport* a, const StrategyReport* b) {
    return static_cast<int>(a->kind) < static_cast<int>(b->kind);
  });
  return rows;
}

}  // namespace

std::string compare_table(const std::vector<StrategyReport>& reports) {
  const auto rows = ordered(reports);
  std::vector<std::string> labels;
  for (const auto* r : rows) {
    labels.push_back(row_label(r->kind, r->k) + " seed " + std::to_string(r->seed));
  }
  return format_rows(
      rows,
      [](const StrategyReport* r) {
        return std::array<double, 3>{r->metrics.micro.precision, r->metrics.micro.recall,
                                     r->metrics.micro.f1};
      },
      labels);
}

std::string compare_csv(const std::vector<StrategyReport>& reports) {
  const auto rows = ordered(reports);
  std::ostringstream out;
  out << "strategy,k,seed,precision,recall,f1\n";
  char buf[96];
  for (const auto* r : rows) {
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f", r->metrics.micro.precision,
                  r->metrics.micro.recall, r->metrics.micro.f1);
    out << to_string(r->kind) << ',' << (r->k ? std::to_string(*r->k) : "") << ',' << r->seed << buf
        << '\n';
  }
  return out.str();
}

std::vector<StrategySummary> summarize(const std::vector<StrategyReport>& reports) {
  std::vector<StrategySummary> rows;
  for (const auto* r : ordered(reports)) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const StrategySummary& s) {
      return s.kind == r->kind && s.k == r->k;
    });
    if (it == rows.end()) {
      rows.push_back({r->kind, r->k});
      it = rows.end() - 1;
    }
    ++it->runs;
    it->precision += r->metrics.micro.precision;
    it->recall += r->metrics.micro.recall;
    it->f1 += r->metrics.micro.f1;
  }
  for (auto& s : rows) {
    const auto n = static_cast<double>(s.runs);
    s.precision /= n;
    s.recall /= n;
    s.f1 /= n;
  }
  return rows;
}

std::string summary_table(const std::vector<StrategySummary>& rows) {
  std::vector<std::string> labels;
  for (const auto& r : rows) {
    labels.push_back(row_label(r.kind, r.k) + " x" + std::to_string(r.runs));
  }
  return format_rows(
      rows,
      [](const StrategySummary& s) { return std::array<double, 3>{s.precision, s.recall, s.f1}; },
      labels);
}

Corpus select_for_annotation(const Model& model, const Vocab& vocab, const Corpus& raw,
                             std::size_t n, std::uint64_t seed) {
  if (n > raw.size()) {
    throw ConfigError("cannot select " + std::to_string(n) + " sentences from " +
                      std::to_string(raw.size()));
  }
  const Corpus predicted = predict_corpus(model.config, model.params, raw, vocab);
  std::vector<std::size_t> with_phi, without_phi;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const auto labels = predicted.sentences[i].labels();
    const bool any = std::any_of(labels.begin(), labels.end(), [](LabelId l) { return l != kOutside; });
    (any ? with_phi : without_phi).push_back(i);
  }
  Rng rng(derive_seed(seed, 0x5E1));
  rng.shuffle(with_phi);
  rng.shuffle(without_phi);
  std::size_t take_phi = std::min(with_phi.size(), n / 2);
  std::size_t take_clean = std::min(without_phi.size(), n - take_phi);
  take_phi = std::min(with_phi.size(), n - take_clean);
  std::vector<std::size_t> chosen(with_phi.begin(), with_phi.begin() + static_cast<std::ptrdiff_t>(take_phi));
  chosen.insert(chosen.end(), without_phi.begin(),
                without_phi.begin() + static_cast<std::ptrdiff_t>(take_clean));
  std::sort(chosen.begin(), chosen.end());
  Corpus out;
  out.label_set = raw.label_set;
  out.name = raw.name + ".selected";
  for (auto i : chosen) out.sentences.push_back(raw.sentences[i]);
  return out;
}

}  // namespace deid
