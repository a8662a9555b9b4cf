#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "deid/corpus.hpp"
#include "deid/kv_config.hpp"

namespace deid {

// Synthetic stand-in for a source-language clinical corpus and a related
// target language. Sentences are assembled from clinical clause templates
// with PHI slots; the target language rewrites a (1 - overlap) fraction of
// alphabetic word types with Catalan-like spelling rules, so shifted words
// still share sub-word pieces with their source forms.
// Abbreviations from the sentence splitter's list are never rewritten.
struct SyntheticConfig {
  std::size_t source_sentences = 2000;
  std::size_t target_train_sentences = 500;
  std::size_t target_dev_sentences = 500;
  // Unlabeled target sentences for building the shared sub-word vocabulary.
  std::size_t raw_target_sentences = 2000;
  // Fraction of alphabetic word types left unchanged in the target language.
  double overlap = 0.6;
  // Probability that a target clause comes from the target-only template pool
  // (domain shift on top of the lexical shift).
  double target_novel_rate = 0.3;
  // Expected entities of each PHI type per sentence.
  std::map<std::string, double> densities{
      {"DATE", 0.35},      {"AGE", 0.20},        {"LOCATION", 0.30}, {"NAME", 0.35},
      {"CONTACT", 0.15},   {"PROFESSION", 0.15}, {"ID", 0.20},
  };
  std::uint64_t seed = 1;

  void validate(const LabelSet& label_set = LabelSet{}) const;
  static SyntheticConfig from_kv(const KvConfig& kv);
  std::string to_kv() const;
};

struct SyntheticBenchmark {
  Corpus source;
  Corpus target;      // target-language training pool
  Corpus target_dev;
  std::vector<std::string> raw_target_text;  // unlabeled, disjoint from the above
};

SyntheticBenchmark generate_synthetic_bilingual(const SyntheticConfig& config, std::uint64_t seed);

// Word-type rewrite used for the target language.
class LexicalShift {
 public:
  explicit LexicalShift(double overlap);

  // Returns the target-language form of an alphabetic word (identity when the
  // type is kept). Non-alphabetic tokens are returned unchanged.
  std::string apply(std::string_view word) const;
  bool is_shifted(std::string_view word) const;

  // All alphabetic word types the generator can emit in the source language.
  static const std::vector<std::string>& source_lexicon();

 private:
  std::map<std::string, std::string, std::less<>> table_;
};

bool is_alphabetic_word(std::string_view token);

// Joins tokens into natural text such that tokenize_words() recovers them.
std::string detokenize(const std::vector<std::string>& tokens);

struct SyntheticNote {
  std::string id;
  std::string text;
  Corpus gold;  // sentences as generated, for reference scoring
};

// Target-language notes of 3-8 sentences each, drawn from their own seed stream.
std::vector<SyntheticNote> generate_synthetic_notes(const SyntheticConfig& config,
                                                    std::uint64_t seed, std::size_t count);

}  // namespace deid
