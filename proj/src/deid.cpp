#include "deid/deid.hpp"

#include <algorithm>
#include <chrono>
#include <charconv>
#include <filesystem>
#include <regex>
#include <set>

#include "deid/error.hpp"
#include "deid/hash.hpp"
#include "deid/metrics.hpp"
#include "deid/rng.hpp"
#include "embedded_data.hpp"
#include "parallel.hpp"

namespace deid {

namespace fs = std::filesystem;

std::string to_string(DeidMode mode) {
  return mode == DeidMode::Redact ? "redact" : "pseudonymize";
}

DeidMode parse_deid_mode(std::string_view name) {
  if (name == "redact") return DeidMode::Redact;
  if (name == "pseudonymize") return DeidMode::Pseudonymize;
  throw ConfigError("unknown mode '" + std::string(name) + "' (expected redact or pseudonymize)");
}

std::vector<CharSpan> merge_to_char_spans(const std::vector<std::string>& words,
                                          const std::vector<LabelId>& labels,
                                          const std::vector<TextSpan>& offsets,
                                          std::string_view text) {
  if (words.size() != labels.size() || words.size() != offsets.size()) {
    throw Error("offset_error", "merge: " + std::to_string(words.size()) + " words, " +
                                    std::to_string(labels.size()) + " labels, " +
                                    std::to_string(offsets.size()) + " offsets");
  }
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    const auto& o = offsets[i];
    const bool ordered = o.begin <= o.end && (i == 0 || offsets[i - 1].end <= o.begin);
    const bool width_ok = o.end - o.begin == words[i].size();
    const bool text_ok = text.empty() ||
                         (o.end <= text.size() && text.substr(o.begin, o.end - o.begin) == words[i]);
    if (!ordered || !width_ok || !text_ok) {
      throw Error("offset_error", "merge: word " + std::to_string(i) + " '" + words[i] +
                                      "' does not match its offsets");
    }
  }
  std::vector<CharSpan> out;
  for (const Span& s : extract_spans(repair_bio(labels))) {
    out.push_back({offsets[s.start].begin, offsets[s.end].end, s.type});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Surrogates

std::vector<std::string> SurrogateTable::parse_list(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(start, nl - start);
    start = nl + 1;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) {
      line.remove_suffix(1);
    }
    while (!line.empty() && (line.front() == ' ' || line.front() == '\t')) line.remove_prefix(1);
    if (line.empty() || line.front() == '#') continue;
    out.emplace_back(line);
  }
  return out;
}

SurrogateTable SurrogateTable::builtin() {
  SurrogateTable t;
  const LabelSet label_set;
  for (const auto& type : label_set.phi_types()) {
    auto values = parse_list(embedded::surrogates(type));
    if (!values.empty()) t.set(type, std::move(values));
  }
  return t;
}

void SurrogateTable::set(const std::string& phi_type, std::vector<std::string> values) {
  values_[phi_type] = std::move(values);
}

void SurrogateTable::load_file(const std::string& phi_type, const std::string& path) {
  auto values = parse_list(read_text_file(path));
  if (values.empty()) throw Error("surrogate_error", "surrogate file '" + path + "' has no entries");
  set(phi_type, std::move(values));
}

const std::vector<std::string>* SurrogateTable::find(std::string_view phi_type) const {
  auto it = values_.find(phi_type);
  return it == values_.end() || it->second.empty() ? nullptr : &it->second;
}

std::vector<std::string> SurrogateTable::types() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_) out.push_back(k);
  return out;
}

// ---------------------------------------------------------------------------
// Dates

namespace {

int to_int(std::string_view s) {
  int v = 0;
  std::from_chars(s.data(), s.data() + s.size(), v);
  return v;
}

std::string pad(unsigned v, std::size_t width) {
  std::string s = std::to_string(v);
  if (s.size() < width) s.insert(0, width - s.size(), '0');
  return s;
}

}  // namespace

std::optional<std::string> shift_numeric_date(std::string_view text, int days) {
  using namespace std::chrono;
  static const std::regex dmy(R"(^(\d{1,2})([/.\-])(\d{1,2})\2(\d{2}|\d{4})$)");
  static const std::regex iso(R"(^(\d{4})-(\d{1,2})-(\d{1,2})$)");
  const std::string s(text);
  std::smatch m;
  std::string d_str, m_str, y_str, sep;
  bool iso_order = false;
  if (std::regex_match(s, m, dmy)) {
    d_str = m[1];
    sep = m[2];
    m_str = m[3];
    y_str = m[4];
  } else if (std::regex_match(s, m, iso)) {
    y_str = m[1];
    m_str = m[2];
    d_str = m[3];
    sep = "-";
    iso_order = true;
  } else {
    return std::nullopt;
  }
  int y = to_int(y_str);
  if (y_str.size() == 2) y += y < 70 ? 2000 : 1900;
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(to_int(m_str))},
                           day{static_cast<unsigned>(to_int(d_str))}};
  if (!ymd.ok()) return std::nullopt;
  const year_month_day shifted{sys_days{ymd} + std::chrono::days{days}};
  const int out_y = static_cast<int>(shifted.year());
  if (out_y < 0 || out_y > 9999) return std::nullopt;
  const std::string yy = y_str.size() == 2 ? pad(static_cast<unsigned>(out_y % 100), 2)
                                           : pad(static_cast<unsigned>(out_y), 4);
  const std::string mm = pad(static_cast<unsigned>(shifted.month()), m_str.size());
  const std::string dd = pad(static_cast<unsigned>(shifted.day()), d_str.size());
  return iso_order ? yy + sep + mm + sep + dd : dd + sep + mm + sep + yy;
}

// ---------------------------------------------------------------------------
// Single note

nlohmann::json DeidResult::to_json() const {
  nlohmann::json reps = nlohmann::json::array();
  for (const auto& r : replacements) {
    reps.push_back({{"start", r.start}, {"end", r.end}, {"type", r.phi_type},
                    {"original", r.original}, {"replacement", r.replacement}});
  }
  return {{"sentences", sentences}, {"replacements", reps}, {"collisions", collisions}};
}

std::vector<CharSpan> predict_char_spans(std::string_view note, const Model& model,
                                         const Vocab& vocab, std::size_t* sentence_count) {
  struct Window {
    std::size_t sentence;
    std::size_t first_word;
  };
  const auto sentence_spans = split_sentence_spans(note);
  std::vector<std::vector<WordToken>> words(sentence_spans.size());
  Corpus windows;
  std::vector<Window> where;
  for (std::size_t s = 0; s < sentence_spans.size(); ++s) {
    const auto& span = sentence_spans[s];
    words[s] = tokenize_words(note.substr(span.begin, span.end - span.begin));
    std::size_t pieces = 0;
    for (std::size_t w = 0; w < words[s].size(); ++w) {
      words[s][w].span.begin += span.begin;
      words[s][w].span.end += span.begin;
      const std::size_t n = std::max<std::size_t>(1, vocab.encode_word(words[s][w].text).size());
      if (w == 0 || pieces + n > model.config.max_len) {
        windows.sentences.emplace_back();
        where.push_back({s, w});
        pieces = 0;
      }
      windows.sentences.back().tokens.push_back({words[s][w].text, kOutside});
      pieces += n;
    }
  }
  const Corpus predicted = predict_corpus(model.config, model.params, windows, vocab);

  std::vector<std::vector<LabelId>> labels(sentence_spans.size());
  for (std::size_t s = 0; s < sentence_spans.size(); ++s) labels[s].reserve(words[s].size());
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    for (const auto& t : predicted.sentences[i].tokens) labels[where[i].sentence].push_back(t.label);
  }
  std::vector<CharSpan> out;
  for (std::size_t s = 0; s < sentence_spans.size(); ++s) {
    std::vector<std::string> text;
    std::vector<TextSpan> offsets;
    for (const auto& w : words[s]) {
      text.push_back(w.text);
      offsets.push_back(w.span);
    }
    auto spans = merge_to_char_spans(text, labels[s], offsets, note);
    out.insert(out.end(), spans.begin(), spans.end());
  }
  if (sentence_count != nullptr) *sentence_count = sentence_spans.size();
  return out;
}

namespace {

struct Segment {
  std::size_t begin = 0;  // in masked text
  std::size_t end = 0;
  bool replaced = false;
};

std::vector<Segment> masked_segments(const DeidResult& r) {
  std::vector<Segment> out;
  std::size_t orig = 0;
  std::size_t pos = 0;
  for (const auto& rep : r.replacements) {
    out.push_back({pos, pos + (rep.start - orig), false});
    pos += rep.start - orig;
    out.push_back({pos, pos + rep.replacement.size(), true});
    pos += rep.replacement.size();
    orig = rep.end;
  }
  out.push_back({pos, pos + (r.original.size() - orig), false});
  return out;
}

// Splits occurrences of each replaced string into those overlapping written
// replacements and those inside preserved text.
void find_occurrences(const DeidResult& r, std::vector<std::string>* surviving,
                      std::vector<std::string>* natural) {
  const auto segments = masked_segments(r);
  std::vector<std::string> originals;
  for (const auto& rep : r.replacements) originals.push_back(rep.original);
  std::sort(originals.begin(), originals.end());
  originals.erase(std::unique(originals.begin(), originals.end()), originals.end());
  for (const auto& o : originals) {
    if (o.empty()) continue;
    bool leaked = false;
    bool repeated = false;
    for (std::size_t p = r.masked.find(o); p != std::string::npos; p = r.masked.find(o, p + 1)) {
      const std::size_t e = p + o.size();
      bool overlaps = false;
      for (const auto& seg : segments) {
        if (seg.replaced && seg.begin < e && p < seg.end) overlaps = true;
      }
      (overlaps ? leaked : repeated) = true;
    }
    if (leaked && surviving != nullptr) surviving->push_back(o);
    if (repeated && natural != nullptr) natural->push_back(o);
  }
}

}  // namespace

std::vector<std::string> surviving_originals(const DeidResult& result) {
  std::vector<std::string> out;
  find_occurrences(result, &out, nullptr);
  return out;
}

DeidResult apply_replacements(std::string_view note, const std::vector<CharSpan>& input_spans,
                              const LabelSet& label_set, const DeidOptions& options) {
  std::vector<CharSpan> spans = input_spans;
  std::sort(spans.begin(), spans.end(),
            [](const CharSpan& a, const CharSpan& b) { return a.start < b.start; });
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const auto& s = spans[i];
    if (s.start >= s.end || s.end > note.size() || (i > 0 && spans[i - 1].end > s.start) ||
        s.type >= label_set.num_types()) {
      throw Error("offset_error", "span [" + std::to_string(s.start) + ", " + std::to_string(s.end) +
                                      ") is empty, overlapping or out of range");
    }
  }

  const SurrogateTable builtin = options.surrogates == nullptr && options.mode == DeidMode::Pseudonymize
                                     ? SurrogateTable::builtin()
                                     : SurrogateTable{};
  const SurrogateTable& table = options.surrogates != nullptr ? *options.surrogates : builtin;
  const std::uint64_t note_seed = derive_seed(options.seed, Fnv1a{}.update(note).value());
  Rng shift_rng(derive_seed(note_seed, 0xDA7E));
  const int magnitude = 30 + static_cast<int>(shift_rng.index(336));
  const int day_shift = shift_rng.bernoulli(0.5) ? magnitude : -magnitude;

  // Every string about to be replaced; no written surrogate may contain one.
  std::vector<std::string> originals;
  for (const auto& s : spans) originals.emplace_back(note.substr(s.start, s.end - s.start));
  auto leaks = [&](std::string_view candidate) {
    return std::any_of(originals.begin(), originals.end(),
                       [&](const std::string& o) { return candidate.find(o) != std::string_view::npos; });
  };
  // A filler character absent from every original cannot be part of any occurrence.
  char filler = 0;
  for (const char c : std::string_view("XQZ*#_")) {
    if (!filler && std::none_of(originals.begin(), originals.end(),
                                [&](const std::string& o) { return o.find(c) != std::string::npos; })) {
      filler = c;
    }
  }

  std::map<std::pair<std::size_t, std::string>, std::string> chosen;
  auto fill = [&](const std::string& type_name, const std::string& original) {
    if (!filler) throw Error("surrogate_error", "no filler character for " + type_name + " '" + original + "'");
    return std::string(original.size(), filler);
  };
  auto surrogate = [&](std::size_t type, const std::string& original) -> std::string {
    auto key = std::make_pair(type, original);
    if (auto it = chosen.find(key); it != chosen.end()) return it->second;
    const std::string& type_name = label_set.phi_types()[type];
    std::optional<std::string> value;
    if (type_name == "DATE") {
      value = shift_numeric_date(original, day_shift);
      if (value && leaks(*value)) value.reset();
    }
    if (!value) {
      const auto* list = table.find(type_name);
      if (list == nullptr) throw Error("surrogate_error", "no surrogates for type " + type_name);
      const std::uint64_t h = Fnv1a{}.update(type_name).update("\x1f").update(original).value();
      const std::size_t first = derive_seed(note_seed, h) % list->size();
      for (std::size_t i = 0; i < list->size() && !value; ++i) {
        const std::string& candidate = (*list)[(first + i) % list->size()];
        if (!leaks(candidate)) value = candidate;
      }
      // Short originals (a stray "a" or "1") can sit inside every list entry.
      if (!value) value = fill(type_name, original);
    }
    chosen.emplace(std::move(key), *value);
    return *value;
  };

  DeidResult r;
  r.original = std::string(note);
  for (const auto& s : spans) {
    Replacement rep;
    rep.start = s.start;
    rep.end = s.end;
    rep.phi_type = label_set.phi_types()[s.type];
    rep.original = std::string(note.substr(s.start, s.end - s.start));
    rep.replacement = options.mode == DeidMode::Redact ? "[" + rep.phi_type + "]"
                                                       : surrogate(s.type, rep.original);
    r.replacements.push_back(std::move(rep));
  }
  std::vector<std::pair<std::size_t, std::size_t>> written;  // replacement ranges in masked
  auto assemble = [&] {
    r.masked.clear();
    written.clear();
    std::size_t pos = 0;
    for (const auto& rep : r.replacements) {
      r.masked.append(note.substr(pos, rep.start - pos));
      written.emplace_back(r.masked.size(), r.masked.size() + rep.replacement.size());
      r.masked += rep.replacement;
      pos = rep.end;
    }
    r.masked.append(note.substr(pos));
  };
  assemble();
  // A surrogate next to other text can still complete an original across the
  // boundary; such surrogates become fillers until nothing leaks.
  while (options.mode == DeidMode::Pseudonymize) {
    std::set<std::size_t> hit;
    for (const auto& o : originals) {
      for (std::size_t p = r.masked.find(o); p != std::string::npos; p = r.masked.find(o, p + 1)) {
        for (std::size_t i = 0; i < written.size(); ++i) {
          if (written[i].first < p + o.size() && p < written[i].second) hit.insert(i);
        }
      }
    }
    bool changed = false;
    for (const std::size_t i : hit) {
      auto& rep = r.replacements[i];
      const std::string f = fill(rep.phi_type, rep.original);
      if (rep.replacement == f) continue;
      chosen[{*label_set.type_index(rep.phi_type), rep.original}] = f;
      changed = true;
    }
    if (!changed) break;
    for (std::size_t i = 0; i < spans.size(); ++i) {
      r.replacements[i].replacement = chosen.at({spans[i].type, r.replacements[i].original});
    }
    assemble();
  }
  find_occurrences(r, nullptr, &r.collisions);
  return r;
}

DeidResult deidentify(std::string_view note, const Model& model, const Vocab& vocab,
                      const DeidOptions& options) {
  const LabelSet label_set;
  model.config.validate(label_set);
  std::size_t sentences = 0;
  const auto spans = predict_char_spans(note, model, vocab, &sentences);
  DeidResult r = apply_replacements(note, spans, label_set, options);
  r.sentences = sentences;
  return r;
}

// ---------------------------------------------------------------------------
// Directory mode

std::size_t BatchSummary::total_spans() const {
  std::size_t n = 0;
  for (const auto& [type, count] : spans_per_type) n += count;
  return n;
}

nlohmann::json BatchSummary::to_json() const {
  nlohmann::json notes_json = nlohmann::json::array();
  for (const auto& r : records) {
    notes_json.push_back({{"file", r.file},
                          {"sentences", r.sentences},
                          {"spans_per_type", r.spans_per_type},
                          {"collisions", r.collisions}});
  }
  nlohmann::json errors_json = nlohmann::json::array();
  for (const auto& e : errors) {
    errors_json.push_back({{"file", e.file}, {"kind", e.kind}, {"message", e.message}});
  }
  return {{"notes", notes},
          {"sentences", sentences},
          {"spans", total_spans()},
          {"spans_per_type", spans_per_type},
          {"per_note", notes_json},
          {"errors", errors_json}};
}

BatchSummary batch_deidentify(const std::string& input_dir, const std::string& output_dir,
                              const Model& model, const Vocab& vocab, const DeidOptions& options,
                              std::size_t jobs) {
  const LabelSet label_set;
  model.config.validate(label_set);
  std::error_code ec;
  if (!fs::is_directory(input_dir, ec)) throw IoError("not a directory: " + input_dir);
  if (fs::equivalent(input_dir, output_dir, ec)) {
    throw ConfigError("output directory must differ from the input directory");
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(input_dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
  fs::create_directories(output_dir, ec);
  if (ec) throw IoError("cannot create " + output_dir + ": " + ec.message());

  // Built once so every worker shares it.
  const SurrogateTable builtin = options.surrogates == nullptr ? SurrogateTable::builtin()
                                                               : SurrogateTable{};
  DeidOptions opts = options;
  if (opts.surrogates == nullptr) opts.surrogates = &builtin;

  struct Outcome {
    std::optional<DeidResult> result;
    std::optional<FileError> error;
  };
  std::vector<Outcome> outcomes(files.size());
  parallel_for(files.size(), jobs, [&](std::size_t i) {
    const std::string name = files[i].filename().string();
    std::string text;
    try {
      text = read_text_file(files[i].string());
      outcomes[i].result = deidentify(text, model, vocab, opts);
    } catch (const Error& e) {
      outcomes[i].error = FileError{name, e.kind(), e.what()};
      return;
    }
    write_text_file((fs::path(output_dir) / name).string(), outcomes[i].result->masked);
  });

  BatchSummary summary;
  for (const auto& type : label_set.phi_types()) summary.spans_per_type[type] = 0;
  std::string review;
  for (std::size_t i = 0; i < files.size(); ++i) {
    const std::string name = files[i].filename().string();
    if (outcomes[i].error) {
      summary.errors.push_back(*outcomes[i].error);
      continue;
    }
    const DeidResult& r = *outcomes[i].result;
    NoteRecord rec;
    rec.file = name;
    rec.sentences = r.sentences;
    rec.collisions = r.collisions.size();
    for (const auto& type : label_set.phi_types()) rec.spans_per_type[type] = 0;
    for (const auto& rep : r.replacements) {
      ++rec.spans_per_type[rep.phi_type];
      ++summary.spans_per_type[rep.phi_type];
    }
    ++summary.notes;
    summary.sentences += r.sentences;
    summary.records.push_back(std::move(rec));
    nlohmann::json line = r.to_json();
    line["file"] = name;
    review += line.dump() + "\n";
  }
  write_text_file((fs::path(output_dir) / "review.jsonl").string(), review);
  return summary;
}

}  // namespace deid
