#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "deid/bpe.hpp"
#include "deid/corpus.hpp"
#include "deid/model.hpp"

namespace deid {

enum class DeidMode { Redact, Pseudonymize };

std::string to_string(DeidMode mode);
DeidMode parse_deid_mode(std::string_view name);

// One predicted entity in note coordinates (byte offsets, half-open).
struct CharSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  std::size_t type = 0;

  bool operator==(const CharSpan&) const = default;
};

// Merges the predicted entities of one sentence into character spans. Each
// entity covers its first word's start through its last word's end, so
// separators inside the entity are included. Throws Error("offset_error")
// when the offsets do not line up with the words (and with `text`, if given).
std::vector<CharSpan> merge_to_char_spans(const std::vector<std::string>& words,
                                          const std::vector<LabelId>& labels,
                                          const std::vector<TextSpan>& offsets,
                                          std::string_view text = {});

// Surrogate values per PHI type. Lines starting with '#' and blank lines are
// skipped when loading.
class SurrogateTable {
 public:
  static SurrogateTable builtin();
  static std::vector<std::string> parse_list(std::string_view text);

  void set(const std::string& phi_type, std::vector<std::string> values);
  void load_file(const std::string& phi_type, const std::string& path);
  // nullptr when the type has no entries.
  const std::vector<std::string>* find(std::string_view phi_type) const;
  std::vector<std::string> types() const;

 private:
  std::map<std::string, std::vector<std::string>, std::less<>> values_;
};

struct Replacement {
  std::size_t start = 0;  // byte offsets into the original note
  std::size_t end = 0;
  std::string phi_type;
  std::string original;
  std::string replacement;
};

struct DeidResult {
  std::string original;
  std::vector<Replacement> replacements;  // sorted, non-overlapping
  std::string masked;
  std::size_t sentences = 0;
  // Replaced strings that also occur verbatim in preserved (non-span) text.
  std::vector<std::string> collisions;

  nlohmann::json to_json() const;  // replacements and counts, no note text
};

struct DeidOptions {
  DeidMode mode = DeidMode::Redact;
  std::uint64_t seed = 0;
  const SurrogateTable* surrogates = nullptr;  // builtin table when null
};

// Predicted entities of a whole note, sorted. Sentences longer than the
// model's max_len are tagged in consecutive word windows.
std::vector<CharSpan> predict_char_spans(std::string_view note, const Model& model,
                                         const Vocab& vocab, std::size_t* sentence_count = nullptr);

// Replaces the given spans. Redact writes "[TYPE]"; pseudonymize writes a
// surrogate of the same type chosen from (seed, note text, type, original),
// so equal strings get equal surrogates within a note. Numeric dates
// (d/m/y with / . or -, and ISO y-m-d) are shifted by a per-note day offset
// instead. A surrogate never contains any original of the note; when every
// entry does, or when it would complete one with the text around it, a filler
// of the original's length is written. Throws Error("surrogate_error") when a
// needed type has no entries.
DeidResult apply_replacements(std::string_view note, const std::vector<CharSpan>& spans,
                              const LabelSet& label_set, const DeidOptions& options);

DeidResult deidentify(std::string_view note, const Model& model, const Vocab& vocab,
                      const DeidOptions& options);

// Shifts a numeric date string by `days`, keeping its layout. nullopt when the
// string is not a valid numeric date.
std::optional<std::string> shift_numeric_date(std::string_view text, int days);

// Occurrences of replaced strings in the masked text that overlap a written
// replacement (a surrogate that leaks the original). Empty for sound output.
std::vector<std::string> surviving_originals(const DeidResult& result);

// ---------------------------------------------------------------------------
// Directory mode

struct NoteRecord {
  std::string file;
  std::size_t sentences = 0;
  std::map<std::string, std::size_t> spans_per_type;
  std::size_t collisions = 0;
};

struct FileError {
  std::string file;
  std::string kind;
  std::string message;
};

struct BatchSummary {
  std::size_t notes = 0;
  std::size_t sentences = 0;
  std::map<std::string, std::size_t> spans_per_type;
  std::vector<NoteRecord> records;  // sorted by file name
  std::vector<FileError> errors;

  std::size_t total_spans() const;
  nlohmann::json to_json() const;
};

// De-identifies every regular file in input_dir (sorted by name) into a file
// of the same name in output_dir, plus `review.jsonl` with one line of
// replacements per note. A file that cannot be read or processed becomes an
// error record; the run continues. Output is independent of `jobs`.
BatchSummary batch_deidentify(const std::string& input_dir, const std::string& output_dir,
                              const Model& model, const Vocab& vocab, const DeidOptions& options,
                              std::size_t jobs = 1);

}  // namespace deid
