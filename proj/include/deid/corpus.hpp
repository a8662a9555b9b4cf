#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace deid {

// Index into LabelSet::bio_labels(). O is always 0.
using LabelId = int;

inline constexpr LabelId kOutside = 0;

// PHI entity types plus the derived IOB2 label list
// [O, B-T0, I-T0, B-T1, I-T1, ...].
class LabelSet {
 public:
  // DATE, AGE, LOCATION, NAME, CONTACT, PROFESSION, ID.
  LabelSet();
  explicit LabelSet(std::vector<std::string> phi_types);

  const std::vector<std::string>& phi_types() const { return phi_types_; }
  const std::vector<std::string>& bio_labels() const { return bio_labels_; }
  std::size_t size() const { return bio_labels_.size(); }
  std::size_t num_types() const { return phi_types_.size(); }

  // Throws LabelError naming the label when unknown.
  LabelId id(std::string_view bio_label) const;
  std::optional<LabelId> find(std::string_view bio_label) const;
  const std::string& name(LabelId id) const;

  std::optional<std::size_t> type_index(std::string_view phi_type) const;
  LabelId begin_id(std::size_t type) const { return static_cast<LabelId>(1 + 2 * type); }
  LabelId inside_id(std::size_t type) const { return static_cast<LabelId>(2 + 2 * type); }
  static bool is_begin(LabelId id) { return id > 0 && id % 2 == 1; }
  static bool is_inside(LabelId id) { return id > 0 && id % 2 == 0; }
  // Entity type of a B-/I- label; nullopt for O.
  static std::optional<std::size_t> type_of(LabelId id) {
    if (id <= 0) return std::nullopt;
    return static_cast<std::size_t>((id - 1) / 2);
  }

  bool operator==(const LabelSet& other) const { return phi_types_ == other.phi_types_; }

 private:
  std::vector<std::string> phi_types_;
  std::vector<std::string> bio_labels_;
};

struct Token {
  std::string text;
  LabelId label = kOutside;

  bool operator==(const Token&) const = default;
};

struct Sentence {
  std::vector<Token> tokens;
  std::optional<std::string> doc_id;
  std::optional<std::int64_t> sent_index;

  std::vector<LabelId> labels() const;
  std::vector<std::string> words() const;
  bool operator==(const Sentence&) const = default;
};

struct Corpus {
  std::vector<Sentence> sentences;
  LabelSet label_set;
  std::string name;

  std::size_t size() const { return sentences.size(); }
  bool empty() const { return sentences.empty(); }
  bool operator==(const Corpus& other) const {
    return sentences == other.sentences && label_set == other.label_set;
  }
};

// Content fingerprint (tokens + labels + label set); name excluded.
std::string corpus_hash(const Corpus& corpus);

// ---------------------------------------------------------------------------
// CoNLL I/O
//
// One `token<TAB>label` line per token, blank line between sentences. Lines of
// the form `# doc_id = X` / `# sent_index = N` (no TAB) attach metadata to the
// following sentence.

Corpus parse_conll(std::string_view text, const LabelSet& label_set = LabelSet{},
                   std::string name = {});
std::string write_conll(const Corpus& corpus);

// Three-column `token<TAB>gold<TAB>pred` predictions file.
struct GoldPred {
  Corpus gold;
  Corpus pred;
};
GoldPred parse_conll_predictions(std::string_view text, const LabelSet& label_set = LabelSet{});
std::string write_conll_predictions(const Corpus& gold, const Corpus& pred);

Corpus read_conll_file(const std::string& path, const LabelSet& label_set = LabelSet{});
void write_text_file(const std::string& path, std::string_view content);
std::string read_text_file(const std::string& path);

// ---------------------------------------------------------------------------
// Label normalization

// Maps a fine-grained MEDDOCAN type to its coarse PHI name, or "O" for the
// OTHER group. Throws LabelError listing the valid names otherwise.
std::string normalize_labels(std::string_view fine_label);
const std::vector<std::string>& fine_grained_labels();

// ---------------------------------------------------------------------------
// Tokenization

struct TextSpan {
  std::size_t begin = 0;  // byte offsets, half-open
  std::size_t end = 0;

  bool operator==(const TextSpan&) const = default;
};

struct WordToken {
  std::string text;
  TextSpan span;
};

// Whitespace split, then every punctuation character becomes its own token.
std::vector<WordToken> tokenize_words(std::string_view text);

// Sentence boundaries as byte spans (leading/trailing whitespace trimmed).
std::vector<TextSpan> split_sentence_spans(std::string_view text);
std::vector<TextSpan> split_sentence_spans(std::string_view text,
                                           const std::vector<std::string>& abbreviations);
std::vector<std::string> split_sentences(std::string_view note_text);

// Lower-cased abbreviations that never end a sentence (shipped data file).
const std::vector<std::string>& default_abbreviations();
std::vector<std::string> parse_abbreviation_list(std::string_view text);

// ---------------------------------------------------------------------------
// Standoff XML

struct StandoffAnnotation {
  std::size_t start = 0;  // code point offsets into raw_text, half-open
  std::size_t end = 0;
  std::string fine_label;
};

struct StandoffDocument {
  std::string doc_id;
  std::string raw_text;
  std::vector<StandoffAnnotation> annotations;
};

StandoffDocument parse_standoff_xml(std::string_view xml);

using SentenceSplitter = std::function<std::vector<TextSpan>(std::string_view)>;
using WordTokenizer = std::function<std::vector<WordToken>(std::string_view)>;

std::vector<Sentence> convert_standoff_xml(const StandoffDocument& doc,
                                           const LabelSet& label_set = LabelSet{},
                                           const SentenceSplitter& splitter = {},
                                           const WordTokenizer& tokenizer = {});

// ---------------------------------------------------------------------------
// Few-shot sampling

struct FewShotSpec {
  std::size_t k = 50;
  std::uint64_t seed = 0;
  bool require_all_labels = true;
};

// True when some token of the sentence carries a label of the given type.
bool sentence_has_type(const Sentence& sentence, std::size_t type);

Corpus sample_fewshot(const Corpus& corpus, const FewShotSpec& spec);

}  // namespace deid
