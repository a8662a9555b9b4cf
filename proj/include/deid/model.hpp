#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "deid/bpe.hpp"
#include "deid/corpus.hpp"
#include "deid/rng.hpp"
#include "deid/tensor.hpp"

namespace deid {

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t hidden_dim = 128;
  std::size_t ffn_dim = 256;
  std::size_t vocab_size = 0;
  std::size_t max_len = kDefaultMaxLen;
  double dropout_p = 0.1;
  std::size_t num_labels = 15;

  void validate() const;
  void validate(const LabelSet& label_set) const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  std::string hash() const;
  bool operator==(const ModelConfig&) const = default;
};

// Parameter names:
//   tok_emb, pos_emb
//   L{i}.ln1.g/b, L{i}.attn.wq/bq/wk/wv/bv/wo/bo, L{i}.ln2.g/b, L{i}.ffn.w1/b1/w2/b2
//   final_ln.g/b, cls.w, cls.b
nn::ParameterSet init_parameters(const ModelConfig& config, std::uint64_t seed);

struct ForwardOptions {
  bool train = false;
  Rng* dropout_rng = nullptr;  // required when train && dropout_p > 0
};

struct PackedBatch {
  std::vector<int> ids;
  std::vector<int> positions;
  std::vector<std::uint8_t> key_mask;  // 0 at PAD
  std::vector<std::size_t> offsets;  // sentence s occupies rows [offsets[s], offsets[s+1])

  std::size_t rows() const { return ids.size(); }
  std::size_t sentences() const { return offsets.empty() ? 0 : offsets.size() - 1; }
};

PackedBatch pack(const std::vector<const EncodedSentence*>& batch);
PackedBatch pack(const std::vector<EncodedSentence>& batch);

// Pre-LN transformer encoder, final layer norm, linear classifier.
// Returns logits of shape [rows, num_labels].
nn::Tensor forward(const ModelConfig& config, const nn::ParameterSet& params,
                   const PackedBatch& batch, const ForwardOptions& options = {});

// Mean NLL over positions whose target != ignore_id.
nn::Tensor loss(const nn::Tensor& logits, const std::vector<int>& aligned_labels,
                int ignore_id = kIgnoreLabel);

// Word-level labels: first-piece argmax (lowest index on ties), truncated
// words get O, then IOB2 repair.
std::vector<LabelId> predict(const ModelConfig& config, const nn::ParameterSet& params,
                             const Sentence& sentence, const Vocab& vocab);
// Batched inference over a whole corpus; labels replaced by predictions.
Corpus predict_corpus(const ModelConfig& config, const nn::ParameterSet& params,
                      const Corpus& corpus, const Vocab& vocab, std::size_t batch_size = 64);

struct Model {
  ModelConfig config;
  nn::ParameterSet params;
};

// Parameter checkpoint with the config (and its hash) on the metadata line.
std::string save_model(const Model& model);
Model load_model(std::string_view bytes);
void save_model_file(const std::string& path, const Model& model);
Model load_model_file(const std::string& path);

}  // namespace deid
