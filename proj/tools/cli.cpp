#include "cli.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "deid/annotation.hpp"
#include "deid/bpe.hpp"
#include "deid/corpus.hpp"
#include "deid/deid.hpp"
#include "deid/error.hpp"
#include "deid/hash.hpp"
#include "deid/kv_config.hpp"
#include "deid/metrics.hpp"
#include "deid/model.hpp"
#include "deid/synthetic.hpp"
#include "deid/training.hpp"
#include "deid/transfer.hpp"

#ifndef DEID_VERSION
#define DEID_VERSION "0.0.0"
#endif

namespace deid::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kConfigEnv = "DEID_CONFIG";

// Record of one invocation: everything needed to rerun it, plus content
// hashes of what it read and wrote.
class Manifest {
 public:
  Manifest(const std::vector<std::string>& args) {
    j_["tool"] = "deid";
    j_["version"] = DEID_VERSION;
    j_["argv"] = args;
    j_["inputs"] = json::object();
    j_["outputs"] = json::object();
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    j_["started"] = buf;
  }

  void set(const std::string& key, json value) { j_[key] = std::move(value); }
  void input(const std::string& path) { j_["inputs"][path] = file_hash(path); }
  void output(const std::string& path) { j_["outputs"][path] = file_hash(path); }
  json& data() { return j_; }

  static std::string file_hash(const std::string& path) {
    std::error_code ec;
    if (fs::is_directory(path, ec)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::recursive_directory_iterator(path)) {
        if (e.is_regular_file()) files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      Fnv1a h;
      for (const auto& f : files) {
        h.update(fs::relative(f, path).string()).update(std::string_view("\0", 1)).update(read_text_file(f.string()));
      }
      return h.hex();
    }
    try {
      return hash_hex(read_text_file(path));
    } catch (const Error&) {
      return "unreadable";
    }
  }

 private:
  json j_;
};

struct Common {
  bool json_out = false;
  std::string manifest_path;
};

void add_common(CLI::App* app, Common& c) {
  app->add_flag("--json", c.json_out, "Machine-readable JSON on stdout");
  app->add_option("--manifest", c.manifest_path, "Also write the run manifest to this file");
}

Vocab read_vocab(const std::string& path) { return Vocab::deserialize(read_text_file(path)); }

std::string sentence_text(const Sentence& s) {
  std::string out;
  for (std::size_t i = 0; i < s.tokens.size(); ++i) {
    if (i) out += ' ';
    out += s.tokens[i].text;
  }
  return out;
}

// Raw text for BPE: words of a CoNLL file, or the lines of any other file.
void append_text(const std::string& path, std::vector<std::string>& texts) {
  if (path.size() > 6 && path.substr(path.size() - 6) == ".conll") {
    for (const auto& s : read_conll_file(path).sentences) texts.push_back(sentence_text(s));
    return;
  }
  std::istringstream in(read_text_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) texts.push_back(line);
  }
}

// Training config: $DEID_CONFIG (unless --config is given), then --set overrides.
TrainConfig load_train_config(const std::string& config_path, const std::vector<std::string>& sets,
                              Manifest& manifest) {
  std::string path = config_path;
  if (path.empty()) {
    if (const char* env = std::getenv(kConfigEnv); env != nullptr && *env != '\0') path = env;
  }
  KvConfig kv;
  if (!path.empty()) {
    kv = KvConfig::parse(read_text_file(path));
    manifest.input(path);
  }
  for (const auto& s : sets) kv.set_override(s);
  TrainConfig c = TrainConfig::from_kv(kv);
  manifest.set("train_config", c.to_json());
  return c;
}

struct ModelFlags {
  ModelConfig config;
  void add(CLI::App* app) {
    app->add_option("--layers", config.layers, "Encoder layers")->capture_default_str();
    app->add_option("--heads", config.heads, "Attention heads")->capture_default_str();
    app->add_option("--hidden", config.hidden_dim, "Hidden size")->capture_default_str();
    app->add_option("--ffn", config.ffn_dim, "Feed-forward size")->capture_default_str();
    app->add_option("--max-len", config.max_len, "Max sub-word pieces per sentence")->capture_default_str();
    app->add_option("--dropout", config.dropout_p, "Dropout probability")->capture_default_str();
  }
};

void print_metrics(std::ostream& out, const MetricsReport& m, bool as_json) {
  if (as_json) {
    out << m.to_json().dump(2) << '\n';
  } else {
    out << m.to_table();
  }
}

// ---------------------------------------------------------------------------
// Transfer spec file

struct TransferSpecFile {
  TransferData data;
  ExperimentConfig experiment;
  std::vector<StrategyKind> strategies;
  std::size_t k = 50;
  std::vector<std::uint64_t> seeds{1};
  std::optional<GridSpec> grid;
  json echo;
};

TrainConfig train_from_json(const json& j) {
  KvConfig kv;
  for (const auto& [key, value] : j.items()) {
    kv.set(key, value.is_string() ? value.get<std::string>() : value.dump());
  }
  return TrainConfig::from_kv(kv);
}

TransferSpecFile load_transfer_spec(const std::string& path, Manifest& manifest) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw Error("parse_error", path + ": " + e.what());
  }
  manifest.input(path);
  TransferSpecFile spec;
  spec.echo = j;
  try {
    const ModelConfig model = j.contains("model") ? ModelConfig::from_json(j["model"]) : ModelConfig{};
    const json& d = j.at("data");
    if (d.contains("synthetic")) {
      KvConfig kv;
      for (const auto& [key, value] : d["synthetic"].items()) {
        kv.set(key, value.is_string() ? value.get<std::string>() : value.dump());
      }
      const SyntheticConfig sc = SyntheticConfig::from_kv(kv);
      spec.data = prepare_synthetic(sc, sc.seed, d.value("vocab_size", std::size_t{1000}), model);
    } else {
      auto load = [&](const char* key) {
        const std::string p = d.at(key).get<std::string>();
        manifest.input(p);
        Corpus c = read_conll_file(p);
        c.name = key;
        return c;
      };
      spec.data.source = load("source");
      spec.data.target_pool = load("target_pool");
      spec.data.target_dev = load("target_dev");
      if (d.contains("vocab")) {
        const std::string p = d["vocab"].get<std::string>();
        manifest.input(p);
        spec.data.vocab = read_vocab(p);
      } else {
        std::vector<std::string> texts;
        for (const auto& s : spec.data.source.sentences) texts.push_back(sentence_text(s));
        for (const auto& s : spec.data.target_pool.sentences) texts.push_back(sentence_text(s));
        spec.data.vocab = train_bpe(texts, d.value("vocab_size", std::size_t{1000}));
      }
      spec.data.model = model;
      spec.data.model.vocab_size = spec.data.vocab.size();
      spec.data.model.num_labels = spec.data.source.label_set.size();
      spec.data.model.validate(spec.data.source.label_set);
    }
    if (j.contains("train")) spec.experiment.train = train_from_json(j["train"]);
    spec.experiment.source_epochs = j.value("source_epochs", spec.experiment.source_epochs);
    spec.experiment.fewshot_epochs = j.value("fewshot_epochs", spec.experiment.fewshot_epochs);
    spec.experiment.multitask_epochs = j.value("multitask_epochs", spec.experiment.multitask_epochs);
    spec.experiment.adapt_learning_rate = j.value("adapt_learning_rate", spec.experiment.adapt_learning_rate);
    for (const auto& s : j.value("strategies", std::vector<std::string>{})) {
      spec.strategies.push_back(parse_strategy_kind(s));
    }
    spec.k = j.value("k", spec.k);
    spec.seeds = j.value("seeds", spec.seeds);
    if (j.contains("grid")) {
      GridSpec g;
      const json& gj = j["grid"];
      g.ks = gj.value("ks", g.ks);
      g.epochs = gj.value("epochs", g.epochs);
      g.seeds = gj.value("seeds", g.seeds);
      if (gj.contains("kinds")) {
        g.kinds.clear();
        for (const auto& s : gj["kinds"]) g.kinds.push_back(parse_strategy_kind(s.get<std::string>()));
      }
      spec.grid = g;
    }
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  if (spec.strategies.empty() && !spec.grid) {
    throw ConfigError(path + ": needs \"strategies\" and/or \"grid\"");
  }
  return spec;
}

void write_file(const fs::path& path, const std::string& content, Manifest& manifest) {
  write_text_file(path.string(), content);
  manifest.output(path.string());
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot cross-lingual clinical de-identification toolkit", "deid"};
  app.set_version_flag("--version", DEID_VERSION);
  app.require_subcommand(1);
  Manifest manifest(args);
  Common common;
  std::function<void()> action;

  // convert ----------------------------------------------------------------
  auto* convert = app.add_subcommand("convert", "Standoff XML documents to coarse-label CoNLL");
  std::vector<std::string> convert_in;
  std::string convert_out;
  convert->add_option("inputs", convert_in, "XML files or directories of .xml files")->required();
  convert->add_option("-o,--output", convert_out, "Output CoNLL file")->required();
  add_common(convert, common);
  convert->callback([&] {
    action = [&] {
      std::vector<std::string> files;
      for (const auto& p : convert_in) {
        if (fs::is_directory(p)) {
          for (const auto& e : fs::directory_iterator(p)) {
            if (e.is_regular_file() && e.path().extension() == ".xml") files.push_back(e.path().string());
          }
        } else {
          files.push_back(p);
        }
      }
      std::sort(files.begin(), files.end());
      Corpus corpus;
      for (const auto& f : files) {
        manifest.input(f);
        for (auto& s : convert_standoff_xml(parse_standoff_xml(read_text_file(f)))) {
          corpus.sentences.push_back(std::move(s));
        }
      }
      write_file(convert_out, write_conll(corpus), manifest);
      json summary{{"documents", files.size()}, {"sentences", corpus.size()}};
      if (common.json_out) {
        out << summary.dump() << '\n';
      } else {
        out << "converted " << files.size() << " documents, " << corpus.size() << " sentences\n";
      }
    };
  });

  // normalize --------------------------------------------------------------
  auto* normalize = app.add_subcommand("normalize", "Map fine-grained CoNLL labels to the 7 PHI types");
  std::string norm_in, norm_out;
  normalize->add_option("-i,--input", norm_in, "CoNLL file with fine-grained labels")->required();
  normalize->add_option("-o,--output", norm_out, "Output CoNLL file")->required();
  add_common(normalize, common);
  normalize->callback([&] {
    action = [&] {
      manifest.input(norm_in);
      std::istringstream in(read_text_file(norm_in));
      std::string line, mapped;
      std::size_t line_no = 0;
      while (std::getline(in, line)) {
        ++line_no;
        const auto tab = line.rfind('\t');
        if (line.empty() || line[0] == '#' || tab == std::string::npos) {
          mapped += line + '\n';
          continue;
        }
        const std::string label = line.substr(tab + 1);
        std::string coarse = "O";
        if (label != "O") {
          if (label.size() < 3 || (label[0] != 'B' && label[0] != 'I') || label[1] != '-') {
            throw ParseError(line_no, "label '" + label + "' is not O, B-X or I-X");
          }
          const std::string type = normalize_labels(label.substr(2));
          if (type != "O") coarse = label.substr(0, 2) + type;
        }
        mapped += line.substr(0, tab + 1) + coarse + '\n';
      }
      Corpus corpus = parse_conll(mapped);
      for (auto& s : corpus.sentences) {
        const auto repaired = repair_bio(s.labels());
        for (std::size_t i = 0; i < s.tokens.size(); ++i) s.tokens[i].label = repaired[i];
      }
      write_file(norm_out, write_conll(corpus), manifest);
      if (common.json_out) {
        out << json{{"sentences", corpus.size()}}.dump() << '\n';
      } else {
        out << "normalized " << corpus.size() << " sentences\n";
      }
    };
  });

  // synth ------------------------------------------------------------------
  auto* synth = app.add_subcommand("synth", "Generate the synthetic bilingual benchmark");
  std::string synth_config, synth_dir;
  std::vector<std::string> synth_sets;
  std::size_t synth_notes = 0;
  std::optional<std::uint64_t> synth_seed;
  synth->add_option("-c,--config", synth_config, "Synthetic config file (key = value)");
  synth->add_option("--set", synth_sets, "Override a config key (key=value)");
  synth->add_option("--seed", synth_seed, "Seed (overrides the config's seed)");
  synth->add_option("--notes", synth_notes, "Also write this many target-language notes")->capture_default_str();
  synth->add_option("-o,--out-dir", synth_dir, "Output directory")->required();
  add_common(synth, common);
  synth->callback([&] {
    action = [&] {
      KvConfig kv;
      if (!synth_config.empty()) {
        kv = KvConfig::parse(read_text_file(synth_config));
        manifest.input(synth_config);
      }
      for (const auto& s : synth_sets) kv.set_override(s);
      SyntheticConfig sc = SyntheticConfig::from_kv(kv);
      if (synth_seed) sc.seed = *synth_seed;
      manifest.set("seed", sc.seed);
      const auto bench = generate_synthetic_bilingual(sc, sc.seed);
      const fs::path dir(synth_dir);
      fs::create_directories(dir);
      write_file(dir / "synth.cfg", sc.to_kv(), manifest);
      write_file(dir / "source.conll", write_conll(bench.source), manifest);
      write_file(dir / "target_train.conll", write_conll(bench.target), manifest);
      write_file(dir / "target_dev.conll", write_conll(bench.target_dev), manifest);
      std::string raw;
      for (const auto& t : bench.raw_target_text) raw += t + '\n';
      write_file(dir / "raw_target.txt", raw, manifest);
      if (synth_notes > 0) {
        fs::create_directories(dir / "notes");
        for (const auto& n : generate_synthetic_notes(sc, sc.seed, synth_notes)) {
          write_text_file((dir / "notes" / (n.id + ".txt")).string(), n.text);
        }
        manifest.output((dir / "notes").string());
      }
      json summary{{"source", bench.source.size()},
                   {"target_train", bench.target.size()},
                   {"target_dev", bench.target_dev.size()},
                   {"raw_target", bench.raw_target_text.size()},
                   {"notes", synth_notes}};
      out << (common.json_out ? summary.dump() : "wrote " + summary.dump()) << '\n';
    };
  });

  // bpe-train --------------------------------------------------------------
  auto* bpe = app.add_subcommand("bpe-train", "Learn a BPE sub-word vocabulary");
  std::vector<std::string> bpe_in;
  std::string bpe_out;
  std::size_t bpe_size = 1000;
  std::uint64_t bpe_seed = 0;
  bpe->add_option("inputs", bpe_in, "Text inputs: .conll files (words) or plain text (one sentence per line)")
      ->required();
  bpe->add_option("--vocab-size", bpe_size, "Target vocabulary size")->capture_default_str();
  bpe->add_option("--seed", bpe_seed, "Seed (recorded; training is deterministic)")->capture_default_str();
  bpe->add_option("-o,--output", bpe_out, "Vocabulary file")->required();
  add_common(bpe, common);
  bpe->callback([&] {
    action = [&] {
      std::vector<std::string> texts;
      for (const auto& p : bpe_in) {
        manifest.input(p);
        append_text(p, texts);
      }
      manifest.set("seed", bpe_seed);
      const Vocab v = train_bpe(texts, bpe_size, bpe_seed);
      write_file(bpe_out, v.serialize(), manifest);
      if (common.json_out) {
        out << json{{"vocab_size", v.size()}, {"merges", v.merges().size()}}.dump() << '\n';
      } else {
        out << "vocabulary of " << v.size() << " pieces (" << v.merges().size() << " merges)\n";
      }
    };
  });

  // train / multitask ------------------------------------------------------
  struct TrainArgs {
    std::vector<std::string> train;
    std::string dev, vocab, output, init, config, log;
    std::vector<std::string> sets;
    ModelFlags model;
  };
  TrainArgs ta;
  auto add_train_flags = [&](CLI::App* sub, bool multi) {
    if (multi) {
      sub->add_option("--train", ta.train, "Training corpus (repeat for each dataset)")->required();
    } else {
      sub->add_option("--train", ta.train, "Training corpus")->required()->expected(1);
    }
    sub->add_option("--dev", ta.dev, "Dev corpus for best-epoch selection");
    sub->add_option("--vocab", ta.vocab, "Vocabulary file")->required();
    sub->add_option("--init", ta.init, "Start from this checkpoint (model flags are then ignored)");
    sub->add_option("-c,--config", ta.config,
                    std::string("Training config file (default: $") + kConfigEnv + ")");
    sub->add_option("--set", ta.sets, "Override a training key (key=value)");
    sub->add_option("--log", ta.log, "Write the JSON-lines training log here");
    sub->add_option("-o,--output", ta.output, "Output checkpoint")->required();
    ta.model.add(sub);
    add_common(sub, common);
  };
  auto run_training = [&](bool multi) {
    const Vocab vocab = read_vocab(ta.vocab);
    manifest.input(ta.vocab);
    const TrainConfig tc = load_train_config(ta.config, ta.sets, manifest);
    manifest.set("seed", tc.seed);
    std::vector<Corpus> sets;
    for (std::size_t i = 0; i < ta.train.size(); ++i) {
      manifest.input(ta.train[i]);
      sets.push_back(read_conll_file(ta.train[i]));
      sets.back().name = fs::path(ta.train[i]).filename().string();
    }
    Corpus dev;
    if (!ta.dev.empty()) {
      manifest.input(ta.dev);
      dev = read_conll_file(ta.dev);
      dev.name = fs::path(ta.dev).filename().string();
    }
    Model model;
    if (!ta.init.empty()) {
      manifest.input(ta.init);
      model = load_model_file(ta.init);
      if (model.config.vocab_size != vocab.size()) {
        throw ConfigError("checkpoint vocab_size " + std::to_string(model.config.vocab_size) +
                          " does not match the vocabulary (" + std::to_string(vocab.size()) + ")");
      }
    } else {
      model.config = ta.model.config;
      model.config.vocab_size = vocab.size();
      model.config.num_labels = LabelSet{}.size();
      model.params = init_parameters(model.config, derive_seed(tc.seed, 0x11));
    }
    model.config.validate(LabelSet{});
    manifest.set("model_config", model.config.to_json());
    auto on_epoch = [&](const EpochRecord& e) {
      err << "epoch " << e.epoch << " loss " << e.train_loss;
      if (e.dev_f1) err << " dev_f1 " << *e.dev_f1;
      err << '\n';
    };
    TrainResult r = multi ? multi_task_train(model.config, model.params, vocab, sets, dev, tc, on_epoch)
                          : fine_tune(model.config, model.params, vocab, sets[0], dev, tc, on_epoch);
    model.params = std::move(r.params);
    save_model_file(ta.output, model);
    manifest.output(ta.output);
    if (!ta.log.empty()) write_file(ta.log, r.report.to_json_lines(), manifest);
    json summary{{"steps", r.report.steps.size()},
                 {"epochs", r.report.epochs.size()},
                 {"final_loss", r.report.steps.empty() ? 0.0 : r.report.steps.back().loss},
                 {"wall_seconds", r.report.wall_seconds}};
    summary["best_epoch"] = r.report.best_epoch ? json(*r.report.best_epoch) : json(nullptr);
    if (!r.report.epochs.empty() && r.report.epochs.back().dev_f1) {
      const auto& best = r.report.epochs[r.report.best_epoch.value_or(r.report.epochs.size()) - 1];
      summary["dev_f1"] = best.dev_f1.value_or(0.0);
    }
    if (common.json_out) {
      out << summary.dump() << '\n';
    } else {
      out << "trained " << summary["steps"] << " steps; checkpoint " << ta.output << '\n';
      if (summary.contains("dev_f1")) {
        out << "best epoch " << summary["best_epoch"] << " dev F1 " << summary["dev_f1"] << '\n';
      }
    }
  };
  auto* train = app.add_subcommand("train", "Fine-tune the tagger on one corpus");
  add_train_flags(train, false);
  train->callback([&] { action = [&] { run_training(false); }; });
  auto* multitask = app.add_subcommand("multitask", "Train on several corpora at once (proportional sampling)");
  add_train_flags(multitask, true);
  multitask->callback([&] { action = [&] { run_training(true); }; });

  // predict ----------------------------------------------------------------
  auto* predict = app.add_subcommand("predict", "Tag a CoNLL corpus; writes token, gold, prediction columns");
  std::string pred_model, pred_vocab, pred_in, pred_out;
  predict->add_option("--model", pred_model, "Checkpoint")->required();
  predict->add_option("--vocab", pred_vocab, "Vocabulary file")->required();
  predict->add_option("-i,--input", pred_in, "CoNLL corpus")->required();
  predict->add_option("-o,--output", pred_out, "Predictions file")->required();
  add_common(predict, common);
  predict->callback([&] {
    action = [&] {
      for (const auto& p : {pred_model, pred_vocab, pred_in}) manifest.input(p);
      const Model m = load_model_file(pred_model);
      const Corpus gold = read_conll_file(pred_in);
      const Corpus pred = predict_corpus(m.config, m.params, gold, read_vocab(pred_vocab));
      write_file(pred_out, write_conll_predictions(gold, pred), manifest);
      print_metrics(out, evaluate(gold, pred), common.json_out);
    };
  });

  // eval -------------------------------------------------------------------
  auto* eval = app.add_subcommand("eval", "Entity-level precision, recall and F1");
  std::string eval_gold, eval_pred, eval_predictions;
  eval->add_option("--gold", eval_gold, "Gold CoNLL");
  eval->add_option("--pred", eval_pred, "Predicted CoNLL (same sentences)");
  eval->add_option("--predictions", eval_predictions, "Three-column token/gold/pred file instead");
  add_common(eval, common);
  eval->callback([&] {
    action = [&] {
      Corpus gold, pred;
      if (!eval_predictions.empty()) {
        manifest.input(eval_predictions);
        auto gp = parse_conll_predictions(read_text_file(eval_predictions));
        gold = std::move(gp.gold);
        pred = std::move(gp.pred);
      } else {
        if (eval_gold.empty() || eval_pred.empty()) {
          throw CLI::ValidationError("eval", "needs --gold and --pred, or --predictions");
        }
        manifest.input(eval_gold);
        manifest.input(eval_pred);
        gold = read_conll_file(eval_gold);
        pred = read_conll_file(eval_pred);
      }
      const MetricsReport m = evaluate(gold, pred);
      manifest.set("micro_f1", m.micro.f1);
      print_metrics(out, m, common.json_out);
    };
  });

  // kappa ------------------------------------------------------------------
  auto* kappa = app.add_subcommand("kappa", "Token-level Cohen's kappa between two annotations");
  std::string kappa_a, kappa_b;
  bool kappa_exclude_o = false;
  kappa->add_option("--a", kappa_a, "First annotator's CoNLL")->required();
  kappa->add_option("--b", kappa_b, "Second annotator's CoNLL")->required();
  kappa->add_flag("--exclude-o", kappa_exclude_o, "Drop tokens both annotators labeled O");
  add_common(kappa, common);
  kappa->callback([&] {
    action = [&] {
      manifest.input(kappa_a);
      manifest.input(kappa_b);
      const Corpus a = read_conll_file(kappa_a);
      const Corpus b = read_conll_file(kappa_b);
      const KappaResult k = corpus_kappa(a, b, KappaOptions{kappa_exclude_o});
      const AgreementPartition part = partition_agreement(a, b);
      json j{{"kappa", k.kappa},
             {"observed", k.observed},
             {"expected", k.expected},
             {"tokens", k.tokens},
             {"agreed_sentences", part.agreed.size()},
             {"disagreed_sentences", part.disagreed.size()}};
      manifest.set("kappa", k.kappa);
      if (common.json_out) {
        out << j.dump() << '\n';
      } else {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.3f", k.kappa);
        out << "kappa " << buf << " over " << k.tokens << " tokens; " << part.agreed.size()
            << " sentences agreed, " << part.disagreed.size() << " disagreed\n";
      }
    };
  });

  // sample-fewshot ---------------------------------------------------------
  auto* sample = app.add_subcommand("sample-fewshot", "Draw a K-shot corpus covering every PHI type");
  std::string sample_in, sample_out;
  FewShotSpec sample_spec;
  bool sample_no_cover = false;
  sample->add_option("-i,--input", sample_in, "Labeled pool (CoNLL)")->required();
  sample->add_option("-k", sample_spec.k, "Number of sentences")->capture_default_str();
  sample->add_option("--seed", sample_spec.seed, "Seed")->capture_default_str();
  sample->add_flag("--no-coverage", sample_no_cover, "Do not require every PHI type");
  sample->add_option("-o,--output", sample_out, "Output CoNLL")->required();
  add_common(sample, common);
  sample->callback([&] {
    action = [&] {
      manifest.input(sample_in);
      manifest.set("seed", sample_spec.seed);
      sample_spec.require_all_labels = !sample_no_cover;
      const Corpus c = sample_fewshot(read_conll_file(sample_in), sample_spec);
      write_file(sample_out, write_conll(c), manifest);
      if (common.json_out) {
        out << json{{"sentences", c.size()}, {"hash", corpus_hash(c)}}.dump() << '\n';
      } else {
        out << "sampled " << c.size() << " sentences\n";
      }
    };
  });

  // select -----------------------------------------------------------------
  auto* select = app.add_subcommand(
      "select", "Build an annotation pool: half predicted-PHI, half predicted-clean sentences");
  std::string sel_model, sel_vocab, sel_in, sel_out;
  std::size_t sel_n = 0;
  std::uint64_t sel_seed = 0;
  select->add_option("--model", sel_model, "Checkpoint")->required();
  select->add_option("--vocab", sel_vocab, "Vocabulary file")->required();
  select->add_option("-i,--input", sel_in, "Raw sentences (CoNLL, labels ignored)")->required();
  select->add_option("-n", sel_n, "Pool size")->required();
  select->add_option("--seed", sel_seed, "Seed")->capture_default_str();
  select->add_option("-o,--output", sel_out, "Output CoNLL (unlabeled)")->required();
  add_common(select, common);
  select->callback([&] {
    action = [&] {
      for (const auto& p : {sel_model, sel_vocab, sel_in}) manifest.input(p);
      manifest.set("seed", sel_seed);
      Corpus c = select_for_annotation(load_model_file(sel_model), read_vocab(sel_vocab),
                                       read_conll_file(sel_in), sel_n, sel_seed);
      for (auto& s : c.sentences) {
        for (auto& t : s.tokens) t.label = kOutside;
      }
      write_file(sel_out, write_conll(c), manifest);
      out << (common.json_out ? json{{"sentences", c.size()}}.dump() : "selected " + std::to_string(c.size()) + " sentences")
          << '\n';
    };
  });

  // transfer ---------------------------------------------------------------
  auto* transfer = app.add_subcommand("transfer", "Run transfer strategies and/or the scratch-vs-pretrain grid");
  std::string transfer_spec, transfer_dir;
  std::size_t transfer_jobs = 1;
  transfer->add_option("--spec", transfer_spec, "Experiment spec (JSON)")->required();
  transfer->add_option("--jobs", transfer_jobs, "Cells run in parallel")->capture_default_str();
  transfer->add_option("-o,--out-dir", transfer_dir, "Write reports, tables, predictions and curves here");
  add_common(transfer, common);
  transfer->callback([&] {
    action = [&] {
      const auto t0 = std::chrono::steady_clock::now();
      TransferSpecFile spec = load_transfer_spec(transfer_spec, manifest);
      manifest.set("experiment", spec.experiment.to_json());
      manifest.set("model_config", spec.data.model.to_json());
      manifest.set("seeds", spec.seeds);
      manifest.set("data_hashes", {{"source", corpus_hash(spec.data.source)},
                                   {"target_pool", corpus_hash(spec.data.target_pool)},
                                   {"target_dev", corpus_hash(spec.data.target_dev)},
                                   {"vocab", hash_hex(spec.data.vocab.serialize())}});
      const fs::path dir(transfer_dir);
      if (!transfer_dir.empty()) fs::create_directories(dir);
      json result = json::object();
      if (!spec.strategies.empty()) {
        std::vector<StrategySpec> cells;
        for (auto seed : spec.seeds) {
          for (auto kind : spec.strategies) {
            StrategySpec s;
            s.kind = kind;
            s.seed = seed;
            s.fewshot = {spec.k, seed, true};
            cells.push_back(std::move(s));
          }
        }
        const auto reports = run_strategies(cells, spec.data, spec.experiment, transfer_jobs);
        const auto summary = summarize(reports);
        json rows = json::array();
        for (const auto& r : reports) rows.push_back(r.to_json());
        json means = json::array();
        for (const auto& s : summary) {
          json m{{"strategy", to_string(s.kind)}, {"runs", s.runs}, {"precision", s.precision},
                 {"recall", s.recall}, {"f1", s.f1}};
          m["k"] = s.k ? json(*s.k) : json(nullptr);
          means.push_back(std::move(m));
        }
        result["reports"] = rows;
        result["summary"] = means;
        if (!transfer_dir.empty()) {
          write_file(dir / "reports.json", rows.dump(2) + "\n", manifest);
          write_file(dir / "table.txt", compare_table(reports), manifest);
          write_file(dir / "table.csv", compare_csv(reports), manifest);
          write_file(dir / "summary.txt", summary_table(summary), manifest);
          fs::create_directories(dir / "predictions");
          for (const auto& r : reports) {
            const std::string name = to_string(r.kind) + "_seed" + std::to_string(r.seed) + ".conll";
            write_file(dir / "predictions" / name, write_conll_predictions(spec.data.target_dev, r.predictions),
                       manifest);
          }
        }
        if (!common.json_out) out << (spec.seeds.size() == 1 ? compare_table(reports) : summary_table(summary));
      }
      if (spec.grid) {
        const GridResult g = run_grid(*spec.grid, spec.data, spec.experiment, transfer_jobs);
        for (const auto& w : g.warnings) err << "warning: " << w << '\n';
        json means = json::array();
        for (auto kind : spec.grid->kinds) {
          for (auto k : spec.grid->ks) {
            if (auto m = g.mean_final(kind, k)) {
              means.push_back({{"strategy", to_string(kind)}, {"k", k}, {"mean_final_f1", *m}});
            }
          }
        }
        result["grid"] = g.to_json();
        result["grid_means"] = means;
        if (!transfer_dir.empty()) {
          write_file(dir / "grid.json", g.to_json().dump(2) + "\n", manifest);
          write_file(dir / "grid.csv", g.to_csv(), manifest);
        }
        if (!common.json_out) {
          out << "grid: mean final-epoch dev F1 over " << spec.grid->seeds.size() << " seeds\n";
          for (const auto& m : means) {
            char buf[128];
            std::snprintf(buf, sizeof buf, "  %-22s K=%-4zu %.4f\n", m["strategy"].get<std::string>().c_str(),
                          m["k"].get<std::size_t>(), m["mean_final_f1"].get<double>());
            out << buf;
          }
        }
      }
      manifest.set("wall_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      if (common.json_out) {
        if (result.contains("reports")) {
          for (auto& r : result["reports"]) r.erase("config");
        }
        out << result.dump() << '\n';
      }
      if (!transfer_dir.empty()) write_file(dir / "manifest.json", manifest.data().dump(2) + "\n", manifest);
    };
  });

  // deid -------------------------------------------------------------------
  auto* deid_cmd = app.add_subcommand("deid", "De-identify notes: redact or pseudonymize predicted PHI");
  std::string deid_model, deid_vocab, deid_in, deid_out, deid_report, deid_mode = "redact";
  std::vector<std::string> deid_surrogates;
  std::uint64_t deid_seed = 0;
  std::size_t deid_jobs = 1;
  deid_cmd->add_option("--model", deid_model, "Checkpoint")->required();
  deid_cmd->add_option("--vocab", deid_vocab, "Vocabulary file")->required();
  deid_cmd->add_option("-i,--input", deid_in, "Note file or directory of notes")->required();
  deid_cmd->add_option("-o,--output", deid_out, "Output file or directory")->required();
  deid_cmd->add_option("--mode", deid_mode, "redact or pseudonymize")
      ->check(CLI::IsMember({"redact", "pseudonymize"}))
      ->capture_default_str();
  deid_cmd->add_option("--surrogates", deid_surrogates, "Surrogate list for a type: TYPE=path (repeatable)");
  deid_cmd->add_option("--seed", deid_seed, "Pseudonymization seed")->capture_default_str();
  deid_cmd->add_option("--jobs", deid_jobs, "Notes processed in parallel")->capture_default_str();
  deid_cmd->add_option("--report", deid_report, "Write the JSON summary here (directory mode)");
  add_common(deid_cmd, common);
  deid_cmd->callback([&] {
    action = [&] {
      for (const auto& p : {deid_model, deid_vocab, deid_in}) manifest.input(p);
      manifest.set("seed", deid_seed);
      const Model m = load_model_file(deid_model);
      const Vocab v = read_vocab(deid_vocab);
      SurrogateTable table = SurrogateTable::builtin();
      for (const auto& s : deid_surrogates) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw CLI::ValidationError("--surrogates", "expected TYPE=path, got " + s);
        table.load_file(s.substr(0, eq), s.substr(eq + 1));
        manifest.input(s.substr(eq + 1));
      }
      DeidOptions opts{parse_deid_mode(deid_mode), deid_seed, &table};
      if (fs::is_directory(deid_in)) {
        const BatchSummary summary = batch_deidentify(deid_in, deid_out, m, v, opts, deid_jobs);
        manifest.output(deid_out);
        if (!deid_report.empty()) write_file(deid_report, summary.to_json().dump(2) + "\n", manifest);
        for (const auto& e : summary.errors) err << "warning: " << e.file << ": error[" << e.kind << "]: " << e.message << '\n';
        if (common.json_out) {
          out << summary.to_json().dump() << '\n';
        } else {
          out << summary.notes << " notes, " << summary.sentences << " sentences, " << summary.total_spans()
              << " spans replaced";
          if (!summary.errors.empty()) out << ", " << summary.errors.size() << " files failed";
          out << '\n';
          for (const auto& [type, n] : summary.spans_per_type) out << "  " << type << ' ' << n << '\n';
        }
      } else {
        const DeidResult r = deidentify(read_text_file(deid_in), m, v, opts);
        write_file(deid_out, r.masked, manifest);
        if (common.json_out) {
          out << r.to_json().dump() << '\n';
        } else {
          out << r.replacements.size() << " spans replaced in " << r.sentences << " sentences\n";
        }
      }
    };
  });

  // serve ------------------------------------------------------------------
  auto* serve = app.add_subcommand("serve", "Run the annotation service");
  std::string serve_db, serve_project, serve_pool, serve_model, serve_vocab;
  ServerOptions serve_opts;
  serve->add_option("--db", serve_db, "SQLite store (created if missing)")->required();
  serve->add_option("--project", serve_project, "Project config (JSON); creates the project on first run");
  serve->add_option("--pool", serve_pool, "Sentence pool (CoNLL) for a new project");
  serve->add_option("--host", serve_opts.host, "Bind address")->capture_default_str();
  serve->add_option("--port", serve_opts.port, "Port (0 picks a free one)")->capture_default_str();
  serve->add_option("--ui-dir", serve_opts.ui_dir, "Static UI bundle served at /");
  serve->add_option("--model", serve_model, "Checkpoint for pre-annotation suggestions");
  serve->add_option("--vocab", serve_vocab, "Vocabulary for --model");
  add_common(serve, common);
  serve->callback([&] {
    action = [&] {
      AnnotationService service(serve_db);
      if (!serve_project.empty()) {
        manifest.input(serve_project);
        json pj;
        try {
          pj = json::parse(read_text_file(serve_project));
        } catch (const json::parse_error& e) {
          throw Error("parse_error", serve_project + ": " + e.what());
        }
        const ProjectConfig pc = ProjectConfig::from_json(pj);
        if (serve_pool.empty()) throw CLI::ValidationError("--pool", "required with --project");
        manifest.input(serve_pool);
        service.create_project(pc, read_conll_file(serve_pool));
      }
      std::shared_ptr<Model> model;
      std::shared_ptr<Vocab> vocab;
      if (!serve_model.empty()) {
        if (serve_vocab.empty()) throw CLI::ValidationError("--vocab", "required with --model");
        model = std::make_shared<Model>(load_model_file(serve_model));
        vocab = std::make_shared<Vocab>(read_vocab(serve_vocab));
        service.set_suggester([model, vocab](const Sentence& s) {
          return deid::predict(model->config, model->params, s, *vocab);
        });
      }
      for (const auto& id : service.project_ids()) {
        if (service.project_config(id).pre_annotation && !model) {
          throw ConfigError("project '" + id + "' enables pre_annotation but no --model was given");
        }
      }
      AnnotationServer server(service, serve_opts);
      const int port = server.bind();
      err << "listening on http://" << serve_opts.host << ':' << port << '\n';
      err << "manifest: " << manifest.data().dump() << '\n';
      server.listen();
    };
  });

  // ------------------------------------------------------------------------
  std::vector<std::string> argv_rest(args.begin() + (args.empty() ? 0 : 1), args.end());
  std::reverse(argv_rest.begin(), argv_rest.end());
  try {
    app.parse(argv_rest);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  std::string subcommand;
  for (const auto* sub : app.get_subcommands()) subcommand = sub->get_name();
  manifest.set("subcommand", subcommand);
  int status = 0;
  try {
    if (action) action();
  } catch (const CLI::ParseError& e) {
    err << "error[usage]: " << e.what() << '\n';
    status = 2;
  } catch (const Error& e) {
    err << "error[" << e.kind() << "]: " << e.what() << '\n';
    status = 1;
  } catch (const fs::filesystem_error& e) {
    err << "error[io_error]: " << e.what() << '\n';
    status = 1;
  } catch (const std::exception& e) {
    err << "error[internal_error]: " << e.what() << '\n';
    status = 1;
  }
  manifest.set("exit_code", status);
  err << "manifest: " << manifest.data().dump() << '\n';
  if (!common.manifest_path.empty()) {
    try {
      write_text_file(common.manifest_path, manifest.data().dump(2) + "\n");
    } catch (const Error& e) {
      err << "error[" << e.kind() << "]: " << e.what() << '\n';
      if (status == 0) status = 1;
    }
  }
  return status;
}

}  // namespace deid::cli
