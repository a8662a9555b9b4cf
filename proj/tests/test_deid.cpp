#include <filesystem>
#include <fstream>

#include "doctest.h"

#include "deid/deid.hpp"
#include "deid/error.hpp"
#include "test_util.hpp"

using namespace deid;
namespace fs = std::filesystem;

namespace {

std::vector<CharSpan> spans_for(std::string_view text, std::initializer_list<const char*> labels) {
  const auto words = tokenize_words(text);
  std::vector<std::string> w;
  std::vector<TextSpan> offsets;
  for (const auto& t : words) {
    w.push_back(t.text);
    offsets.push_back(t.span);
  }
  return merge_to_char_spans(w, deid::test::ids(labels), offsets, text);
}

// Text outside the replacements, read from both sides.
std::pair<std::string, std::string> preserved(const DeidResult& r) {
  std::string a, b;
  std::size_t orig = 0, pos = 0;
  for (const auto& rep : r.replacements) {
    a += r.original.substr(orig, rep.start - orig);
    b += r.masked.substr(pos, rep.start - orig);
    pos += rep.start - orig + rep.replacement.size();
    orig = rep.end;
  }
  a += r.original.substr(orig);
  b += r.masked.substr(pos);
  return {a, b};
}

// Tagger that labels every word B-NAME.
Model all_names_model(const Vocab& vocab) {
  ModelConfig mc;
  mc.layers = 1;
  mc.heads = 2;
  mc.hidden_dim = 16;
  mc.ffn_dim = 32;
  mc.vocab_size = vocab.size();
  mc.dropout_p = 0.0;
  auto params = init_parameters(mc, 1);
  for (double& x : params.at("cls.w").mutable_values()) x = 0.0;
  auto b = params.at("cls.b").mutable_values();
  b[LabelSet{}.id("B-NAME")] = 5.0;
  return {mc, std::move(params)};
}

const Vocab& small_vocab() {
  static const Vocab v = train_bpe({"Ana Puig vino el 5/3/2020. Tel 600 100 200.", "abcdefghijklmnopqrstuvwxyz"}, 80);
  return v;
}

}  // namespace

TEST_SUITE("deid_pipeline") {

TEST_CASE("merge_to_char_spans") {
  const std::string text = "Ana Puig vino el 5/3/2020.";
  const auto spans = spans_for(text, {"B-NAME", "I-NAME", "O", "O", "B-DATE", "I-DATE", "I-DATE", "I-DATE", "I-DATE", "O"});
  REQUIRE(spans.size() == 2);
  CHECK(spans[0] == CharSpan{0, 8, 3});
  CHECK(text.substr(spans[1].start, spans[1].end - spans[1].start) == "5/3/2020");
  CHECK(spans[1].type == 0);

  // A stray I- opens a span.
  const auto stray = spans_for("Ana Puig", {"O", "I-NAME"});
  CHECK(stray == std::vector<CharSpan>{{4, 8, 3}});

  try {
    merge_to_char_spans({"Ana"}, {0}, {{1, 4}}, "Ana");
    FAIL("expected offset error");
  } catch (const Error& e) {
    CHECK(e.kind() == "offset_error");
  }
  CHECK_THROWS(merge_to_char_spans({"Ana", "x"}, {0}, {{0, 3}}));
}

TEST_CASE("redaction writes placeholders at the spans only") {
  const std::string note = "Ana Puig vino.\nTel 600 100 200, ver a Ana Puig.";
  const auto a = note.find("Ana Puig");
  const auto t = note.find("600 100 200");
  const auto a2 = note.rfind("Ana Puig");
  const LabelSet ls;
  const std::vector<CharSpan> spans{{a, a + 8, 3}, {a2, a2 + 8, 3}, {t, t + 11, 4}};
  const DeidResult r = apply_replacements(note, spans, ls, {});
  CHECK(r.masked == "[NAME] vino.\nTel [CONTACT], ver a [NAME].");
  REQUIRE(r.replacements.size() == 3);
  CHECK(r.replacements[1].phi_type == "CONTACT");
  CHECK(r.replacements[1].original == "600 100 200");
  const auto [x, y] = preserved(r);
  CHECK(x == y);
  CHECK(surviving_originals(r).empty());
  CHECK(r.to_json()["replacements"].size() == 3);
}

TEST_CASE("pseudonymization is consistent and reproducible") {
  const std::string note = "Ana Puig vino el 12/02/2019. Ana Puig vuelve.";
  const auto a = note.find("Ana Puig");
  const auto a2 = note.rfind("Ana Puig");
  const auto d = note.find("12/02/2019");
  const LabelSet ls;
  const std::vector<CharSpan> spans{{a, a + 8, 3}, {d, d + 10, 0}, {a2, a2 + 8, 3}};
  const DeidOptions opts{DeidMode::Pseudonymize, 42, nullptr};
  const DeidResult r = apply_replacements(note, spans, ls, opts);
  REQUIRE(r.replacements.size() == 3);
  CHECK(r.replacements[0].replacement == r.replacements[2].replacement);
  CHECK(r.replacements[0].replacement.find("Ana Puig") == std::string::npos);
  CHECK(r.masked.find("Ana Puig") == std::string::npos);
  CHECK(r.masked.find("12/02/2019") == std::string::npos);

  // The date keeps its layout and moves by 30 to 365 days.
  const std::string shifted = r.replacements[1].replacement;
  CHECK(shifted.size() == 10);
  int offset = 0;
  for (int days = -365; days <= 365; ++days) {
    if (shift_numeric_date("12/02/2019", days) == shifted) offset = days;
  }
  CHECK(std::abs(offset) >= 30);
  CHECK(std::abs(offset) <= 365);

  const auto [x, y] = preserved(r);
  CHECK(x == y);
  CHECK(surviving_originals(r).empty());
  CHECK(apply_replacements(note, spans, ls, opts).masked == r.masked);
}

TEST_CASE("surrogate table and errors") {
  const auto list = SurrogateTable::parse_list("# comment\nuno\n\n  \ndos \r\n");
  CHECK(list == std::vector<std::string>{"uno", "dos"});
  const SurrogateTable builtin = SurrogateTable::builtin();
  const LabelSet ls;
  for (const auto& type : ls.phi_types()) {
    CAPTURE(type);
    REQUIRE(builtin.find(type) != nullptr);
    CHECK_FALSE(builtin.find(type)->empty());
  }

  SurrogateTable only_dates;
  only_dates.set("DATE", {"1 de enero"});
  const DeidOptions opts{DeidMode::Pseudonymize, 1, &only_dates};
  try {
    apply_replacements("Ana", {{0, 3, 3}}, ls, opts);
    FAIL("expected surrogate error");
  } catch (const Error& e) {
    CHECK(e.kind() == "surrogate_error");
  }
  // Non-numeric dates fall back to the list; a surrogate may not contain the original.
  CHECK(apply_replacements("ayer", {{0, 4, 0}}, ls, opts).masked == "1 de enero");
  CHECK(apply_replacements("enero", {{0, 5, 0}}, ls, opts).masked == "XXXXX");
  only_dates.set("DATE", {"XX", "aXb"});
  CHECK(apply_replacements("X", {{0, 1, 0}}, ls, opts).masked == "Q");

  // No surrogate may contain another original of the same note.
  SurrogateTable names;
  names.set("NAME", {"Marc Puig", "Laia"});
  const DeidOptions name_opts{DeidMode::Pseudonymize, 3, &names};
  const DeidResult both = apply_replacements("Puig vio a Marc.", {{0, 4, 3}, {11, 15, 3}}, ls, name_opts);
  CHECK(both.masked == "Laia vio a Laia.");
  // "a" next to "b" would rebuild the original "ab": that one becomes a filler.
  names.set("NAME", {"a"});
  const DeidResult edge = apply_replacements("Qb ab", {{0, 1, 3}, {3, 5, 3}}, ls, name_opts);
  CHECK(edge.masked == "Xb a");
  CHECK(surviving_originals(edge).empty());

  CHECK_THROWS(apply_replacements("abcdef", {{0, 3, 3}, {2, 5, 3}}, ls, {}));
  CHECK_THROWS(apply_replacements("abc", {{0, 4, 3}}, ls, {}));
  CHECK_THROWS(apply_replacements("abc", {{1, 1, 3}}, ls, {}));
}

TEST_CASE("shift_numeric_date") {
  CHECK(shift_numeric_date("28/02/2020", 1) == "29/02/2020");
  CHECK(shift_numeric_date("31/12/1999", 1) == "01/01/2000");
  CHECK(shift_numeric_date("2020-03-01", -1) == "2020-02-29");
  CHECK(shift_numeric_date("5/3/2020", 1) == "6/3/2020");
  CHECK(shift_numeric_date("5.3.21", 1) == "6.3.21");
  CHECK(shift_numeric_date("5-3-2020", 30) == "4-4-2020");
  CHECK_FALSE(shift_numeric_date("31/02/2020", 1).has_value());
  CHECK_FALSE(shift_numeric_date("5/3-2020", 1).has_value());
  CHECK_FALSE(shift_numeric_date("hola", 1).has_value());
}

TEST_CASE("surviving_originals finds leaked strings") {
  DeidResult r;
  r.original = "Ana vino";
  r.replacements.push_back({0, 3, "NAME", "Ana", "Anabel"});
  r.masked = "Anabel vino";
  CHECK(surviving_originals(r) == std::vector<std::string>{"Ana"});
  // A copy in preserved text is a collision, not a leak.
  r.original = "Ana vino con Ana";
  r.masked = "Luisa vino con Ana";
  r.replacements[0].replacement = "Luisa";
  CHECK(surviving_originals(r).empty());
}

TEST_CASE("predicted spans cover whole words") {
  const Model m = all_names_model(small_vocab());
  const std::string note = "Ana vino.\n\nTel 600.";
  std::size_t sentences = 0;
  const auto spans = predict_char_spans(note, m, small_vocab(), &sentences);
  CHECK(sentences == 2);
  CHECK(spans.size() == tokenize_words(note).size());
  const DeidResult r = deidentify(note, m, small_vocab(), {});
  CHECK(r.masked == "[NAME] [NAME][NAME]\n\n[NAME] [NAME][NAME]");
  CHECK(r.sentences == 2);
}

TEST_CASE("long sentences are tagged in windows") {
  Model m = all_names_model(small_vocab());
  m.config.max_len = 8;
  std::string note;
  for (int i = 0; i < 40; ++i) note += "abc ";
  note += "abc.";
  const auto spans = predict_char_spans(note, m, small_vocab());
  CHECK(spans.size() == tokenize_words(note).size());
}

TEST_CASE("batch mode") {
  deid::test::TempDir in("deid_in"), out("deid_out");
  const std::string a = "Ana Puig vino el 5/3/2020. Tel 600 100 200.";
  std::ofstream(in.file("a.txt")) << a;
  std::ofstream(in.file("b.txt")) << "";
  fs::create_directories(in.path() / "sub");
  const Model m = all_names_model(small_vocab());

  const BatchSummary s = batch_deidentify(in.path().string(), out.path().string(), m, small_vocab(), {});
  CHECK(s.notes == 2);
  CHECK(s.errors.empty());
  REQUIRE(s.records.size() == 2);
  CHECK(s.records[0].file == "a.txt");
  CHECK(s.records[1].file == "b.txt");
  CHECK(s.spans_per_type.at("NAME") == tokenize_words(a).size());
  CHECK(s.spans_per_type.at("DATE") == 0);
  CHECK(s.total_spans() == tokenize_words(a).size());
  CHECK(s.sentences == s.records[0].sentences);
  CHECK(read_text_file(out.file("b.txt")).empty());
  CHECK(fs::exists(out.file("a.txt")));
  CHECK_FALSE(fs::exists(out.path() / "sub"));
  const std::string review = read_text_file(out.file("review.jsonl"));
  CHECK(std::count(review.begin(), review.end(), '\n') == 2);
  CHECK(nlohmann::json::parse(review.substr(0, review.find('\n')))["file"] == "a.txt");
  CHECK(s.to_json()["spans"] == s.total_spans());

  // Same bytes with more workers.
  deid::test::TempDir out2("deid_out2");
  batch_deidentify(in.path().string(), out2.path().string(), m, small_vocab(), {}, 3);
  CHECK(read_text_file(out2.file("a.txt")) == read_text_file(out.file("a.txt")));
  CHECK(read_text_file(out2.file("review.jsonl")) == review);

  // A note that cannot be processed becomes an error record.
  SurrogateTable only_dates;
  only_dates.set("DATE", {"ayer"});
  deid::test::TempDir out3("deid_out3");
  const BatchSummary e = batch_deidentify(in.path().string(), out3.path().string(), m, small_vocab(),
                                          {DeidMode::Pseudonymize, 1, &only_dates});
  CHECK(e.notes == 1);
  REQUIRE(e.errors.size() == 1);
  CHECK(e.errors[0].file == "a.txt");
  CHECK(e.errors[0].kind == "surrogate_error");
  CHECK_FALSE(fs::exists(out3.file("a.txt")));

  CHECK_THROWS_AS(batch_deidentify(in.path().string(), in.path().string(), m, small_vocab(), {}), ConfigError);
  CHECK_THROWS_AS(batch_deidentify(in.file("missing"), out.path().string(), m, small_vocab(), {}), IoError);
}

TEST_CASE("empty input directory") {
  deid::test::TempDir in("deid_empty"), out("deid_empty_out");
  const Model m = all_names_model(small_vocab());
  const BatchSummary s = batch_deidentify(in.path().string(), out.path().string(), m, small_vocab(), {});
  CHECK(s.notes == 0);
  CHECK(s.total_spans() == 0);
  CHECK(read_text_file(out.file("review.jsonl")).empty());
}

TEST_CASE("mode names") {
  CHECK(parse_deid_mode("redact") == DeidMode::Redact);
  CHECK(parse_deid_mode(to_string(DeidMode::Pseudonymize)) == DeidMode::Pseudonymize);
  CHECK_THROWS(parse_deid_mode("blur"));
}

}  // TEST_SUITE
