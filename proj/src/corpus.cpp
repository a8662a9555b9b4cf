#include "deid/corpus.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

#include "deid/error.hpp"
#include "deid/hash.hpp"
#include "deid/rng.hpp"
#include "embedded_data.hpp"
#include "utf8.hpp"

namespace deid {

// ---------------------------------------------------------------------------
// LabelSet

LabelSet::LabelSet()
    : LabelSet({"DATE", "AGE", "LOCATION", "NAME", "CONTACT", "PROFESSION", "ID"}) {}

LabelSet::LabelSet(std::vector<std::string> phi_types) : phi_types_(std::move(phi_types)) {
  std::set<std::string> seen;
  bio_labels_.push_back("O");
  for (const auto& t : phi_types_) {
    if (t.empty() || t == "O" || !seen.insert(t).second) {
      throw LabelError("invalid or duplicate PHI type '" + t + "'");
    }
    bio_labels_.push_back("B-" + t);
    bio_labels_.push_back("I-" + t);
  }
}

std::optional<LabelId> LabelSet::find(std::string_view bio_label) const {
  for (std::size_t i = 0; i < bio_labels_.size(); ++i) {
    if (bio_labels_[i] == bio_label) return static_cast<LabelId>(i);
  }
  return std::nullopt;
}

LabelId LabelSet::id(std::string_view bio_label) const {
  if (auto found = find(bio_label)) return *found;
  throw LabelError("unknown label '" + std::string(bio_label) + "'");
}

const std::string& LabelSet::name(LabelId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= bio_labels_.size()) {
    throw LabelError("label id " + std::to_string(id) + " out of range");
  }
  return bio_labels_[static_cast<std::size_t>(id)];
}

std::optional<std::size_t> LabelSet::type_index(std::string_view phi_type) const {
  for (std::size_t i = 0; i < phi_types_.size(); ++i) {
    if (phi_types_[i] == phi_type) return i;
  }
  return std::nullopt;
}

std::vector<LabelId> Sentence::labels() const {
  std::vector<LabelId> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(t.label);
  return out;
}

std::vector<std::string> Sentence::words() const {
  std::vector<std::string> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(t.text);
  return out;
}

std::string corpus_hash(const Corpus& corpus) {
  Fnv1a h;
  for (const auto& t : corpus.label_set.phi_types()) h.update(t).update("\x1f");
  h.update("\x1e");
  for (const auto& s : corpus.sentences) {
    for (const auto& t : s.tokens) {
      h.update(t.text).update("\t").update(std::to_string(t.label)).update("\n");
    }
    h.update("\n");
  }
  return h.hex();
}

// ---------------------------------------------------------------------------
// CoNLL

namespace {

bool has_whitespace(std::string_view s) {
  return std::any_of(s.begin(), s.end(), [](char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
  });
}

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(start, nl - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    start = nl + 1;
  }
  return lines;
}

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> cols;
  std::size_t start = 0;
  for (;;) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      cols.push_back(line.substr(start));
      return cols;
    }
    cols.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

// Returns true and fills the sentence metadata when the line is a comment.
bool parse_metadata(std::string_view line, std::size_t line_no, Sentence& pending) {
  if (line.size() < 2 || line[0] != '#' || line[1] != ' ' ||
      line.find('\t') != std::string_view::npos) {
    return false;
  }
  const std::string_view body = line.substr(2);
  const std::size_t eq = body.find(" = ");
  if (eq == std::string_view::npos) return true;  // free comment, ignored
  const std::string_view key = body.substr(0, eq);
  const std::string_view value = body.substr(eq + 3);
  if (key == "doc_id") {
    pending.doc_id = std::string(value);
  } else if (key == "sent_index") {
    std::int64_t v = 0;
    auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc{} || ptr != value.data() + value.size()) {
      throw ParseError(line_no, "bad sent_index '" + std::string(value) + "'");
    }
    pending.sent_index = v;
  }
  return true;
}

void write_metadata(std::ostringstream& out, const Sentence& s) {
  if (s.doc_id) out << "# doc_id = " << *s.doc_id << '\n';
  if (s.sent_index) out << "# sent_index = " << *s.sent_index << '\n';
}

template <typename OnColumns>
void scan_conll(std::string_view text, std::size_t expected_columns, OnColumns on_columns,
                std::function<void(Sentence&&)> on_sentence) {
  Sentence pending;
  bool have_tokens = false;
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::size_t line_no = i + 1;
    const std::string_view line = lines[i];
    if (line.empty()) {
      if (have_tokens) {
        on_sentence(std::move(pending));
        pending = Sentence{};
        have_tokens = false;
      }
      continue;
    }
    if (!have_tokens && parse_metadata(line, line_no, pending)) continue;
    const auto cols = split_tabs(line);
    if (cols.size() != expected_columns) {
      throw ParseError(line_no, "expected " + std::to_string(expected_columns) +
                                    " TAB-separated columns, got " + std::to_string(cols.size()));
    }
    if (cols[0].empty() || has_whitespace(cols[0])) {
      throw ParseError(line_no, "token must be non-empty and contain no whitespace");
    }
    on_columns(pending, cols, line_no);
    have_tokens = true;
  }
  if (have_tokens) on_sentence(std::move(pending));
}

}  // namespace

Corpus parse_conll(std::string_view text, const LabelSet& label_set, std::string name) {
  Corpus corpus{{}, label_set, std::move(name)};
  scan_conll(
      text, 2,
      [&](Sentence& s, const std::vector<std::string_view>& cols, std::size_t) {
        s.tokens.push_back(Token{std::string(cols[0]), label_set.id(cols[1])});
      },
      [&](Sentence&& s) { corpus.sentences.push_back(std::move(s)); });
  return corpus;
}

std::string write_conll(const Corpus& corpus) {
  std::ostringstream out;
  for (const auto& s : corpus.sentences) {
    write_metadata(out, s);
    for (const auto& t : s.tokens) {
      out << t.text << '\t' << corpus.label_set.name(t.label) << '\n';
    }
    out << '\n';
  }
  return out.str();
}

GoldPred parse_conll_predictions(std::string_view text, const LabelSet& label_set) {
  GoldPred result{{{}, label_set, "gold"}, {{}, label_set, "pred"}};
  Sentence pred_pending;
  scan_conll(
      text, 3,
      [&](Sentence& s, const std::vector<std::string_view>& cols, std::size_t) {
        s.tokens.push_back(Token{std::string(cols[0]), label_set.id(cols[1])});
        pred_pending.tokens.push_back(Token{std::string(cols[0]), label_set.id(cols[2])});
      },
      [&](Sentence&& s) {
        pred_pending.doc_id = s.doc_id;
        pred_pending.sent_index = s.sent_index;
        result.gold.sentences.push_back(std::move(s));
        result.pred.sentences.push_back(std::move(pred_pending));
        pred_pending = Sentence{};
      });
  return result;
}

std::string write_conll_predictions(const Corpus& gold, const Corpus& pred) {
  if (gold.size() != pred.size()) {
    throw Error("alignment_error", "gold and prediction sentence counts differ");
  }
  std::ostringstream out;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const auto& g = gold.sentences[i];
    const auto& p = pred.sentences[i];
    if (g.tokens.size() != p.tokens.size()) {
      throw Error("alignment_error", "token count mismatch in sentence " + std::to_string(i));
    }
    write_metadata(out, g);
    for (std::size_t j = 0; j < g.tokens.size(); ++j) {
      out << g.tokens[j].text << '\t' << gold.label_set.name(g.tokens[j].label) << '\t'
          << pred.label_set.name(p.tokens[j].label) << '\n';
    }
    out << '\n';
  }
  return out.str();
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

Corpus read_conll_file(const std::string& path, const LabelSet& label_set) {
  return parse_conll(read_text_file(path), label_set, path);
}

// ---------------------------------------------------------------------------
// Normalization

namespace {

struct FineMapping {
  const char* fine;
  const char* coarse;
};

constexpr std::array<FineMapping, 29> kFineToCoarse{{
    {"EDAD_SUJETO_ASISTENCIA", "AGE"},
    {"NUMERO_TELEFONO", "CONTACT"},
    {"NUMERO_FAX", "CONTACT"},
    {"CORREO_ELECTRONICO", "CONTACT"},
    {"URL_WEB", "CONTACT"},
    {"FECHAS", "DATE"},
    {"ID_ASEGURAMIENTO", "ID"},
    {"ID_CONTACTO_ASISTENCIAL", "ID"},
    {"NUMERO_BENEF_PLAN_SALUD", "ID"},
    {"IDENTIF_VEHICULOS_NRSERIE_PLACAS", "ID"},
    {"IDENTIF_DISPOSITIVOS_NRSERIE", "ID"},
    {"IDENTIF_BIOMETRICOS", "ID"},
    {"ID_SUJETO_ASISTENCIA", "ID"},
    {"ID_TITULACION_PERSONAL_SANITARIO", "ID"},
    {"ID_EMPLEO_PERSONAL_SANITARIO", "ID"},
    {"OTRO_NUMERO_IDENTIF", "ID"},
    {"HOSPITAL", "LOCATION"},
    {"INSTITUCION", "LOCATION"},
    {"CALLE", "LOCATION"},
    {"TERRITORIO", "LOCATION"},
    {"PAIS", "LOCATION"},
    {"CENTRO_SALUD", "LOCATION"},
    {"NOMBRE_SUJETO_ASISTENCIA", "NAME"},
    {"NOMBRE_PERSONAL_SANITARIO", "NAME"},
    {"PROFESION", "PROFESSION"},
    {"SEXO_SUJETO_ASISTENCIA", "O"},
    {"FAMILIARES_SUJETO_ASISTENCIA", "O"},
    {"OTROS_SUJETO_ASISTENCIA", "O"},
    {"DIREC_PROT_INTERNET", "O"},
}};

}  // namespace

const std::vector<std::string>& fine_grained_labels() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& m : kFineToCoarse) v.emplace_back(m.fine);
    return v;
  }();
  return names;
}

std::string normalize_labels(std::string_view fine_label) {
  for (const auto& m : kFineToCoarse) {
    if (fine_label == m.fine) return m.coarse;
  }
  std::string valid;
  for (const auto& m : kFineToCoarse) {
    if (!valid.empty()) valid += ", ";
    valid += m.fine;
  }
  throw LabelError("unknown fine-grained label '" + std::string(fine_label) +
                   "'; valid names: " + valid);
}

// ---------------------------------------------------------------------------
// Tokenization

namespace {

bool is_space_at(std::string_view s, std::size_t i, std::size_t& len) {
  const auto c = static_cast<unsigned char>(s[i]);
  len = 1;
  if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') return true;
  std::size_t l = 0;
  if (c >= 0x80) {
    const char32_t cp = utf8::decode(s, i, l);
    if (cp == 0x00A0 || cp == 0x2009 || cp == 0x202F) {
      len = l;
      return true;
    }
  }
  return false;
}

bool is_punct_at(std::string_view s, std::size_t i, std::size_t& len) {
  const auto c = static_cast<unsigned char>(s[i]);
  len = 1;
  if (c < 0x80) return std::ispunct(c) != 0;
  const char32_t cp = utf8::decode(s, i, len);
  switch (cp) {
    case 0x00AB:  // «
    case 0x00BB:  // »
    case 0x00BF:  // ¿
    case 0x00A1:  // ¡
    case 0x201C:
    case 0x201D:
    case 0x2018:
    case 0x2019:
    case 0x2026:  // …
    case 0x2013:
    case 0x2014:
    case 0x00B0:  // °
      return true;
    default:
      return false;
  }
}

std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

}  // namespace

std::vector<WordToken> tokenize_words(std::string_view text) {
  std::vector<WordToken> out;
  std::size_t word_start = std::string_view::npos;
  auto flush = [&](std::size_t end) {
    if (word_start != std::string_view::npos && end > word_start) {
      out.push_back({std::string(text.substr(word_start, end - word_start)), {word_start, end}});
    }
    word_start = std::string_view::npos;
  };
  for (std::size_t i = 0; i < text.size();) {
    std::size_t len = 1;
    if (is_space_at(text, i, len)) {
      flush(i);
    } else if (is_punct_at(text, i, len)) {
      flush(i);
      out.push_back({std::string(text.substr(i, len)), {i, i + len}});
    } else {
      if (word_start == std::string_view::npos) word_start = i;
      len = utf8::sequence_length(static_cast<unsigned char>(text[i]));
      if (i + len > text.size()) len = 1;
    }
    i += len;
  }
  flush(text.size());
  return out;
}

std::vector<std::string> parse_abbreviation_list(std::string_view text) {
  std::vector<std::string> out;
  for (auto line : split_lines(text)) {
    while (!line.empty() && (line.back() == ' ' || line.back() == '\t')) line.remove_suffix(1);
    while (!line.empty() && (line.front() == ' ' || line.front() == '\t')) line.remove_prefix(1);
    if (line.empty() || line.front() == '#') continue;
    std::string word = ascii_lower(line);
    if (!word.empty() && word.back() == '.') word.pop_back();
    out.push_back(std::move(word));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

const std::vector<std::string>& default_abbreviations() {
  static const std::vector<std::string> list = parse_abbreviation_list(embedded::abbreviations());
  return list;
}

namespace {

bool is_closing(char c) { return c == '"' || c == '\'' || c == ')' || c == ']'; }

}  // namespace

std::vector<TextSpan> split_sentence_spans(std::string_view text,
                                           const std::vector<std::string>& abbreviations) {
  std::vector<std::size_t> cuts;  // byte offsets where a new sentence may start
  for (std::size_t i = 0; i < text.size();) {
    const char c = text[i];
    if (c == '\n') {
      cuts.push_back(i + 1);
      ++i;
      continue;
    }
    const bool ellipsis = text.substr(i, 3) == "\xE2\x80\xA6";
    if (c != '.' && c != '!' && c != '?' && !ellipsis) {
      ++i;
      continue;
    }
    std::size_t j = i;
    std::size_t terminators = 0;
    while (j < text.size()) {
      if (text[j] == '.' || text[j] == '!' || text[j] == '?') {
        ++j;
        ++terminators;
      } else if (text.substr(j, 3) == "\xE2\x80\xA6") {
        j += 3;
        ++terminators;
      } else {
        break;
      }
    }
    while (j < text.size() && is_closing(text[j])) ++j;
    std::size_t sp_len = 0;
    const bool at_boundary = j == text.size() || is_space_at(text, j, sp_len);
    if (at_boundary && c == '.' && terminators == 1) {
      // Abbreviation guard: look at the word directly before the period.
      std::size_t k = i;
      while (k > 0) {
        std::size_t l = 0;
        const std::size_t prev = k - 1;
        if (is_space_at(text, prev, l) || (static_cast<unsigned char>(text[prev]) < 0x80 &&
                                           std::ispunct(static_cast<unsigned char>(text[prev])))) {
          break;
        }
        --k;
      }
      const std::string word = ascii_lower(text.substr(k, i - k));
      const bool single_initial =
          word.size() == 1 && std::isalpha(static_cast<unsigned char>(text[k])) &&
          std::isupper(static_cast<unsigned char>(text[k]));
      if (single_initial || std::binary_search(abbreviations.begin(), abbreviations.end(), word)) {
        i = j;
        continue;
      }
    }
    if (at_boundary) cuts.push_back(j);
    i = j;
  }
  cuts.push_back(text.size());

  std::vector<TextSpan> spans;
  std::size_t begin = 0;
  for (std::size_t cut : cuts) {
    std::size_t b = begin;
    std::size_t e = cut;
    std::size_t l = 0;
    while (b < e && is_space_at(text, b, l)) b += l;
    while (e > b) {
      // Trailing ASCII whitespace only; multi-byte spaces stay inside.
      const char ch = text[e - 1];
      if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '\f' || ch == '\v') {
        --e;
      } else {
        break;
      }
    }
    if (e > b) spans.push_back({b, e});
    begin = cut;
  }
  return spans;
}

std::vector<TextSpan> split_sentence_spans(std::string_view text) {
  return split_sentence_spans(text, default_abbreviations());
}

std::vector<std::string> split_sentences(std::string_view note_text) {
  std::vector<std::string> out;
  for (const auto& span : split_sentence_spans(note_text)) {
    out.emplace_back(note_text.substr(span.begin, span.end - span.begin));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Standoff XML

StandoffDocument parse_standoff_xml(std::string_view xml) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream in{std::string(xml)};
    pt::read_xml(in, tree);
  } catch (const pt::xml_parser_error& e) {
    throw ParseError(e.line(), "standoff XML: " + e.message());
  }
  if (tree.empty()) throw Error("parse_error", "standoff XML: no root element");
  const auto& [root_name, root] = *tree.begin();
  StandoffDocument doc;
  doc.doc_id = root.get<std::string>("<xmlattr>.id", "");
  const auto text = root.get_child_optional("TEXT");
  if (!text) throw Error("parse_error", "standoff XML: <" + root_name + "> lacks a TEXT element");
  doc.raw_text = text->data();
  if (const auto tags = root.get_child_optional("TAGS")) {
    for (const auto& [tag_name, tag] : *tags) {
      if (tag_name == "<xmlattr>" || tag_name == "<xmlcomment>") continue;
      const auto start = tag.get_optional<std::size_t>("<xmlattr>.start");
      const auto end = tag.get_optional<std::size_t>("<xmlattr>.end");
      const auto type = tag.get_optional<std::string>("<xmlattr>.TYPE");
      if (!start || !end || !type) {
        throw Error("parse_error",
                    "standoff XML: <" + tag_name + "> needs start, end and TYPE attributes");
      }
      doc.annotations.push_back({*start, *end, *type});
    }
  }
  return doc;
}

std::vector<Sentence> convert_standoff_xml(const StandoffDocument& doc, const LabelSet& label_set,
                                           const SentenceSplitter& splitter,
                                           const WordTokenizer& tokenizer) {
  const auto cp_offsets = utf8::code_point_offsets(doc.raw_text);
  const std::size_t n_code_points = cp_offsets.size() - 1;

  struct ByteSpan {
    std::size_t begin, end, type;
  };
  std::vector<ByteSpan> spans;
  for (const auto& a : doc.annotations) {
    if (!(a.start < a.end && a.end <= n_code_points)) {
      throw Error("span_error", "annotation [" + std::to_string(a.start) + "," +
                                    std::to_string(a.end) + ") outside text of " +
                                    std::to_string(n_code_points) + " characters");
    }
    const std::string coarse = normalize_labels(a.fine_label);
    if (coarse == "O") continue;
    const auto type = label_set.type_index(coarse);
    if (!type) throw LabelError("PHI type '" + coarse + "' not in label set");
    spans.push_back({cp_offsets[a.start], cp_offsets[a.end], *type});
  }
  std::sort(spans.begin(), spans.end(),
            [](const ByteSpan& x, const ByteSpan& y) { return x.begin < y.begin; });
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i].begin < spans[i - 1].end) {
      throw Error("span_error", "overlapping annotation spans at byte offsets " +
                                    std::to_string(spans[i - 1].begin) + " and " +
                                    std::to_string(spans[i].begin));
    }
  }

  const auto sentence_spans =
      splitter ? splitter(doc.raw_text) : split_sentence_spans(doc.raw_text);
  std::vector<Sentence> out;
  for (const auto& ss : sentence_spans) {
    const std::string_view sentence_text =
        std::string_view(doc.raw_text).substr(ss.begin, ss.end - ss.begin);
    auto words = tokenizer ? tokenizer(sentence_text) : tokenize_words(sentence_text);
    if (words.empty()) continue;
    Sentence sentence;
    if (!doc.doc_id.empty()) sentence.doc_id = doc.doc_id;
    sentence.sent_index = static_cast<std::int64_t>(out.size());
    std::optional<std::size_t> previous_span;
    for (const auto& w : words) {
      const std::size_t wb = ss.begin + w.span.begin;
      const std::size_t we = ss.begin + w.span.end;
      LabelId label = kOutside;
      std::optional<std::size_t> hit;
      for (std::size_t k = 0; k < spans.size(); ++k) {
        if (spans[k].begin >= we) break;
        if (wb < spans[k].end && spans[k].begin < we) {
          hit = k;
          break;
        }
      }
      if (hit) {
        label = previous_span == hit ? label_set.inside_id(spans[*hit].type)
                                     : label_set.begin_id(spans[*hit].type);
      }
      previous_span = hit;
      sentence.tokens.push_back(Token{w.text, label});
    }
    out.push_back(std::move(sentence));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Few-shot sampling

bool sentence_has_type(const Sentence& sentence, std::size_t type) {
  return std::any_of(sentence.tokens.begin(), sentence.tokens.end(), [&](const Token& t) {
    return LabelSet::type_of(t.label) == type;
  });
}

Corpus sample_fewshot(const Corpus& corpus, const FewShotSpec& spec) {
  const auto& labels = corpus.label_set;
  if (spec.k > corpus.size()) {
    throw ConfigError("few-shot K=" + std::to_string(spec.k) + " exceeds corpus size " +
                      std::to_string(corpus.size()));
  }
  if (spec.require_all_labels && spec.k < labels.num_types()) {
    throw ConfigError("few-shot K=" + std::to_string(spec.k) + " is smaller than the " +
                      std::to_string(labels.num_types()) + " PHI types to cover");
  }

  std::vector<std::vector<std::size_t>> by_type(labels.num_types());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    for (std::size_t t = 0; t < labels.num_types(); ++t) {
      if (sentence_has_type(corpus.sentences[i], t)) by_type[t].push_back(i);
    }
  }

  Rng rng(derive_seed(spec.seed, 0xF5));
  std::vector<bool> taken(corpus.size(), false);
  std::vector<std::size_t> chosen;

  if (spec.require_all_labels) {
    std::string missing;
    for (std::size_t t = 0; t < labels.num_types(); ++t) {
      if (by_type[t].empty()) missing += (missing.empty() ? "" : ", ") + labels.phi_types()[t];
    }
    if (!missing.empty()) {
      throw Error("coverage_error", "cannot cover PHI types: " + missing);
    }
    std::vector<std::size_t> order(labels.num_types());
    for (std::size_t t = 0; t < order.size(); ++t) order[t] = t;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return by_type[a].size() < by_type[b].size();
    });
    std::vector<bool> covered(labels.num_types(), false);
    for (std::size_t t : order) {
      if (covered[t]) continue;
      std::vector<std::size_t> candidates;
      for (std::size_t i : by_type[t]) {
        if (!taken[i]) candidates.push_back(i);
      }
      if (candidates.empty()) {
        throw Error("coverage_error", "cannot cover PHI types: " + labels.phi_types()[t]);
      }
      const std::size_t pick = candidates[rng.index(candidates.size())];
      taken[pick] = true;
      chosen.push_back(pick);
      for (std::size_t u = 0; u < labels.num_types(); ++u) {
        if (sentence_has_type(corpus.sentences[pick], u)) covered[u] = true;
      }
    }
    if (chosen.size() > spec.k) {
      throw Error("coverage_error", "covering all PHI types needs more than K=" +
                                        std::to_string(spec.k) + " sentences");
    }
  }

  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (!taken[i]) rest.push_back(i);
  }
  rng.shuffle(rest);
  for (std::size_t i = 0; chosen.size() < spec.k; ++i) chosen.push_back(rest[i]);

  std::sort(chosen.begin(), chosen.end());
  Corpus out{{}, labels, corpus.name + ".fewshot-k" + std::to_string(spec.k)};
  out.sentences.reserve(chosen.size());
  for (std::size_t i : chosen) out.sentences.push_back(corpus.sentences[i]);
  return out;
}

}  // namespace deid
