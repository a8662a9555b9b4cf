#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "deid/corpus.hpp"

namespace deid {

using PieceId = int;

// Byte-pair-encoding vocabulary over Unicode code points. Pieces never span
// word boundaries; word alignment is carried by EncodedSentence instead of a
// boundary marker.
class Vocab {
 public:
  static constexpr PieceId kPad = 0;
  static constexpr PieceId kUnk = 1;
  static constexpr PieceId kBos = 2;
  static constexpr PieceId kEos = 3;
  static constexpr std::size_t kNumSpecials = 4;

  Vocab();

  std::size_t size() const { return pieces_.size(); }
  const std::vector<std::string>& pieces() const { return pieces_; }
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

  std::optional<PieceId> find(std::string_view piece) const;
  const std::string& piece(PieceId id) const { return pieces_.at(static_cast<std::size_t>(id)); }

  // Pieces of a single word, merges applied by rank. Unknown characters map to kUnk.
  std::vector<PieceId> encode_word(std::string_view word) const;

  std::string serialize() const;
  static Vocab deserialize(std::string_view text);

  bool operator==(const Vocab& other) const {
    return pieces_ == other.pieces_ && merges_ == other.merges_;
  }

 private:
  friend Vocab train_bpe(const std::vector<std::string>&, std::size_t, std::uint64_t);

  PieceId add_piece(const std::string& piece);
  void add_merge(const std::string& left, const std::string& right);

  std::vector<std::string> pieces_;
  std::unordered_map<std::string, PieceId> index_;
  std::vector<std::pair<std::string, std::string>> merges_;
  // (left id, right id) -> (rank, merged id)
  std::unordered_map<std::uint64_t, std::pair<std::size_t, PieceId>> merge_rank_;
};

// Words are taken with tokenize_words(). Frequency ties between candidate
// pairs go to the lexicographically smallest (left, right). The result does
// not depend on `seed`; it is accepted so that every artifact-producing step
// has the same (inputs, seed) signature.
Vocab train_bpe(const std::vector<std::string>& corpus_text, std::size_t vocab_size,
                std::uint64_t seed = 0);

// Number of distinct code points in the training words.
std::size_t bpe_alphabet_size(const std::vector<std::string>& corpus_text);

inline constexpr std::size_t kDefaultMaxLen = 128;
inline constexpr int kIgnoreLabel = -100;

struct EncodedSentence {
  std::vector<PieceId> subtoken_ids;
  std::vector<std::size_t> word_index;  // originating word of each subtoken
  std::vector<bool> first_piece_mask;
  std::size_t num_words = 0;    // words represented after truncation
  std::size_t total_words = 0;  // words in the input sentence
  std::size_t unk_count = 0;

  std::size_t size() const { return subtoken_ids.size(); }
};

EncodedSentence encode(const std::vector<std::string>& words, const Vocab& vocab,
                       std::size_t max_len = kDefaultMaxLen);
EncodedSentence encode(const Sentence& sentence, const Vocab& vocab,
                       std::size_t max_len = kDefaultMaxLen);

// Word strings recovered from the pieces (UNK pieces decode as "<unk>").
std::vector<std::string> decode(const EncodedSentence& encoded, const Vocab& vocab);

// First piece of each word carries the word label; continuations get ignore_id.
std::vector<int> align_labels(const EncodedSentence& encoded, const std::vector<LabelId>& word_labels,
                              int ignore_id = kIgnoreLabel);

// Inverse of align_labels: reads labels at first-piece positions.
std::vector<LabelId> project_to_words(const EncodedSentence& encoded,
                                      const std::vector<int>& subtoken_labels);

// Fraction of subtoken occurrences in `target` whose piece also occurs in `source`.
double shared_piece_fraction(const std::vector<EncodedSentence>& source,
                             const std::vector<EncodedSentence>& target);

}  // namespace deid
