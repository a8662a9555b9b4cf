#include "deid/model.hpp"

#include <algorithm>

#include "deid/error.hpp"
#include "deid/hash.hpp"
#include "deid/metrics.hpp"

namespace deid {

using nn::Tensor;

void ModelConfig::validate(const LabelSet& label_set) const {
  validate();
  if (num_labels != label_set.size()) {
    throw ConfigError("model: num_labels " + std::to_string(num_labels) + " but label set has " +
                      std::to_string(label_set.size()));
  }
}

void ModelConfig::validate() const {
  if (layers == 0) throw ConfigError("model: layers must be >= 1");
  if (heads == 0 || hidden_dim == 0 || hidden_dim % heads != 0) {
    throw ConfigError("model: hidden_dim " + std::to_string(hidden_dim) +
                      " must be divisible by heads " + std::to_string(heads));
  }
  if (ffn_dim == 0) throw ConfigError("model: ffn_dim must be >= 1");
  if (vocab_size <= Vocab::kNumSpecials) throw ConfigError("model: vocab_size not set");
  if (max_len == 0) throw ConfigError("model: max_len must be >= 1");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
    throw ConfigError("model: dropout_p must lie in [0, 1)");
  }
  if (num_labels < 3 || num_labels % 2 == 0) {
    throw ConfigError("model: num_labels must be 2*types+1, got " + std::to_string(num_labels));
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"layers", layers},         {"heads", heads},           {"hidden_dim", hidden_dim},
          {"ffn_dim", ffn_dim},       {"vocab_size", vocab_size}, {"max_len", max_len},
          {"dropout_p", dropout_p},   {"num_labels", num_labels}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_len = j.value("max_len", c.max_len);
    c.dropout_p = j.value("dropout_p", c.dropout_p);
    c.num_labels = j.value("num_labels", c.num_labels);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

std::string ModelConfig::hash() const { return hash_hex(to_json().dump()); }

nn::ParameterSet init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, 0x1417));
  nn::ParameterSet p;
  const std::size_t d = config.hidden_dim;
  auto normal = [&](std::size_t rows, std::size_t cols) {
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = rng.truncated_normal(0.02);
    return Tensor::matrix(rows, cols, std::move(v), true);
  };
  auto zeros = [](std::size_t n) { return Tensor::zeros({n}, true); };
  auto ones = [](std::size_t n) { return Tensor({n}, std::vector<double>(n, 1.0), true); };

  p.add("tok_emb", normal(config.vocab_size, d));
  p.add("pos_emb", normal(config.max_len, d));
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string pre = "L" + std::to_string(l) + ".";
    p.add(pre + "ln1.g", ones(d));
    p.add(pre + "ln1.b", zeros(d));
    // No key bias: it adds a per-query constant to the scores, which softmax
    // cancels, so its gradient is identically zero.
    p.add(pre + "attn.wq", normal(d, d));
    p.add(pre + "attn.bq", zeros(d));
    p.add(pre + "attn.wk", normal(d, d));
    p.add(pre + "attn.wv", normal(d, d));
    p.add(pre + "attn.bv", zeros(d));
    p.add(pre + "attn.wo", normal(d, d));
    p.add(pre + "attn.bo", zeros(d));
    p.add(pre + "ln2.g", ones(d));
    p.add(pre + "ln2.b", zeros(d));
    p.add(pre + "ffn.w1", normal(d, config.ffn_dim));
    p.add(pre + "ffn.b1", zeros(config.ffn_dim));
    p.add(pre + "ffn.w2", normal(config.ffn_dim, d));
    p.add(pre + "ffn.b2", zeros(d));
  }
  p.add("final_ln.g", ones(d));
  p.add("final_ln.b", zeros(d));
  p.add("cls.w", normal(d, config.num_labels));
  p.add("cls.b", zeros(config.num_labels));
  return p;
}

PackedBatch pack(const std::vector<const EncodedSentence*>& batch) {
  PackedBatch out;
  out.offsets.push_back(0);
  for (const auto* e : batch) {
    for (std::size_t i = 0; i < e->size(); ++i) {
      out.ids.push_back(e->subtoken_ids[i]);
      out.positions.push_back(static_cast<int>(i));
      out.key_mask.push_back(e->subtoken_ids[i] != Vocab::kPad);
    }
    out.offsets.push_back(out.ids.size());
  }
  return out;
}

PackedBatch pack(const std::vector<EncodedSentence>& batch) {
  std::vector<const EncodedSentence*> ptrs;
  for (const auto& e : batch) ptrs.push_back(&e);
  return pack(ptrs);
}

Tensor forward(const ModelConfig& config, const nn::ParameterSet& params, const PackedBatch& batch,
               const ForwardOptions& options) {
  for (int pos : batch.positions) {
    if (static_cast<std::size_t>(pos) >= config.max_len) {
      throw ShapeError("sequence longer than max_len " + std::to_string(config.max_len));
    }
  }
  const bool dropout_on = options.train && config.dropout_p > 0.0;
  if (dropout_on && options.dropout_rng == nullptr) {
    throw ConfigError("forward: training with dropout needs a dropout rng");
  }
  auto drop = [&](const Tensor& x) {
    return dropout_on ? nn::dropout(x, config.dropout_p, options.dropout_rng->next_u64()) : x;
  };

  Tensor x = nn::add(nn::embedding_lookup(params.at("tok_emb"), batch.ids),
                     nn::embedding_lookup(params.at("pos_emb"), batch.positions));
  x = drop(x);
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string pre = "L" + std::to_string(l) + ".";
    auto linear = [&](const Tensor& in, const std::string& w, const std::string& b) {
      return nn::add(nn::matmul(in, params.at(pre + w)), params.at(pre + b));
    };
    Tensor h = nn::layer_norm(x, params.at(pre + "ln1.g"), params.at(pre + "ln1.b"));
    Tensor a = nn::packed_attention(linear(h, "attn.wq", "attn.bq"), nn::matmul(h, params.at(pre + "attn.wk")),
                                    linear(h, "attn.wv", "attn.bv"), batch.offsets, config.heads,
                                    batch.key_mask);
    x = nn::add(x, drop(linear(a, "attn.wo", "attn.bo")));
    h = nn::layer_norm(x, params.at(pre + "ln2.g"), params.at(pre + "ln2.b"));
    Tensor f = linear(nn::gelu(linear(h, "ffn.w1", "ffn.b1")), "ffn.w2", "ffn.b2");
    x = nn::add(x, drop(f));
  }
  x = nn::layer_norm(x, params.at("final_ln.g"), params.at("final_ln.b"));
  return nn::add(nn::matmul(x, params.at("cls.w")), params.at("cls.b"));
}

Tensor loss(const Tensor& logits, const std::vector<int>& aligned_labels, int ignore_id) {
  return nn::cross_entropy_with_ignore(logits, aligned_labels, ignore_id);
}

namespace {

std::vector<LabelId> decode_rows(const Tensor& logits, std::size_t row0, const EncodedSentence& enc,
                                 std::size_t total_words) {
  const std::size_t L = logits.cols();
  std::vector<LabelId> words(total_words, kOutside);
  for (std::size_t i = 0; i < enc.size(); ++i) {
    if (!enc.first_piece_mask[i]) continue;
    const double* row = logits.values().data() + (row0 + i) * L;
    // max_element returns the first maximum: lowest label index wins ties.
    words[enc.word_index[i]] = static_cast<LabelId>(std::max_element(row, row + L) - row);
  }
  return repair_bio(std::move(words));
}

}  // namespace

std::vector<LabelId> predict(const ModelConfig& config, const nn::ParameterSet& params,
                             const Sentence& sentence, const Vocab& vocab) {
  if (sentence.tokens.empty()) return {};
  nn::Graph::NoGradScope no_grad;
  const auto enc = encode(sentence, vocab, config.max_len);
  if (enc.size() == 0) return std::vector<LabelId>(sentence.tokens.size(), kOutside);
  const Tensor logits = forward(config, params, pack(std::vector<EncodedSentence>{enc}));
  return decode_rows(logits, 0, enc, sentence.tokens.size());
}

Corpus predict_corpus(const ModelConfig& config, const nn::ParameterSet& params,
                      const Corpus& corpus, const Vocab& vocab, std::size_t batch_size) {
  nn::Graph::NoGradScope no_grad;
  Corpus out = corpus;
  std::vector<EncodedSentence> encoded;
  encoded.reserve(corpus.size());
  for (const auto& s : corpus.sentences) encoded.push_back(encode(s, vocab, config.max_len));
  for (std::size_t start = 0; start < corpus.size(); start += batch_size) {
    const std::size_t end = std::min(corpus.size(), start + batch_size);
    std::vector<const EncodedSentence*> batch;
    for (std::size_t i = start; i < end; ++i) {
      if (encoded[i].size() > 0) batch.push_back(&encoded[i]);
    }
    if (batch.empty()) continue;
    const PackedBatch packed = pack(batch);
    const Tensor logits = forward(config, params, packed);
    std::size_t b = 0;
    for (std::size_t i = start; i < end; ++i) {
      auto& tokens = out.sentences[i].tokens;
      std::vector<LabelId> labels(tokens.size(), kOutside);
      if (encoded[i].size() > 0) {
        labels = decode_rows(logits, packed.offsets[b], encoded[i], tokens.size());
        ++b;
      }
      for (std::size_t w = 0; w < tokens.size(); ++w) tokens[w].label = labels[w];
    }
  }
  return out;
}

std::string save_model(const Model& model) {
  nlohmann::json meta{{"model_config", model.config.to_json()},
                      {"config_hash", model.config.hash()}};
  return nn::serialize_parameters(model.params, meta.dump());
}

Model load_model(std::string_view bytes) {
  std::string meta_line;
  Model m;
  m.params = nn::deserialize_parameters(bytes, &meta_line);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_line);
  } catch (const nlohmann::json::exception&) {
    throw Error("checkpoint_error", "checkpoint metadata is not JSON");
  }
  if (!meta.contains("model_config")) throw Error("checkpoint_error", "checkpoint has no model config");
  m.config = ModelConfig::from_json(meta["model_config"]);
  if (meta.value("config_hash", std::string{}) != m.config.hash()) {
    throw Error("checkpoint_error", "model config hash mismatch");
  }
  const auto expected = init_parameters(m.config, 0);
  if (expected.size() != m.params.size()) {
    throw Error("checkpoint_error", "checkpoint tensor count does not match its config");
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& [name, t] = expected.entries()[i];
    const auto& [got_name, got] = m.params.entries()[i];
    if (name != got_name || t.shape() != got.shape()) {
      throw Error("checkpoint_error", "checkpoint tensor '" + got_name + "' does not match config");
    }
  }
  return m;
}

void save_model_file(const std::string& path, const Model& model) {
  write_text_file(path, save_model(model));
}

Model load_model_file(const std::string& path) { return load_model(read_text_file(path)); }

}  // namespace deid
