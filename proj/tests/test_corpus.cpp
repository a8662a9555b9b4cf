#include <algorithm>
#include <map>
#include <set>

#include "doctest.h"

#include "deid/corpus.hpp"
#include "deid/error.hpp"
#include "deid/synthetic.hpp"
#include "fixtures.hpp"
#include "test_util.hpp"

using namespace deid;
using deid::test::ids;

TEST_SUITE("corpus_io") {

TEST_CASE("label set layout") {
  const LabelSet ls;
  CHECK(ls.size() == 15);
  CHECK(ls.num_types() == 7);
  CHECK(ls.phi_types() ==
        std::vector<std::string>{"DATE", "AGE", "LOCATION", "NAME", "CONTACT", "PROFESSION", "ID"});
  CHECK(ls.id("O") == 0);
  CHECK(ls.id("B-DATE") == 1);
  CHECK(ls.id("I-DATE") == 2);
  CHECK(ls.id("I-ID") == 14);
  CHECK_FALSE(ls.find("B-FOO").has_value());
}

TEST_CASE("parse_conll basics") {
  const Corpus c = parse_conll("Juan\tB-NAME\n.\tO\n");
  REQUIRE(c.size() == 1);
  CHECK(c.sentences[0].labels() == ids({"B-NAME", "O"}));
  CHECK(c.sentences[0].words() == std::vector<std::string>{"Juan", "."});
  CHECK(parse_conll("").empty());
}

TEST_CASE("parse_conll errors") {
  try {
    parse_conll("x\tB-FOO\n");
    FAIL("expected a label error");
  } catch (const Error& e) {
    CHECK(e.kind() == "label_error");
    CHECK(std::string(e.what()).find("B-FOO") != std::string::npos);
  }
  try {
    parse_conll("a\tO\nb\tO\textra\n");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
}

TEST_CASE("write_conll") {
  CHECK(write_conll(deid::test::corpus_of({deid::test::sentence({"a"}, {"O"})})) == "a\tO\n\n");
  CHECK(write_conll(Corpus{}) == "");
}

TEST_CASE("round trip on random corpora") {
  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    const Corpus c = deid::test::random_corpus(rng);
    CHECK(parse_conll(write_conll(c)) == c);
  }
  Corpus big;
  Rng rng2(5);
  while (big.size() < 100) {
    for (auto& s : deid::test::random_corpus(rng2).sentences) big.sentences.push_back(s);
  }
  big.sentences.resize(100);
  CHECK(parse_conll(write_conll(big)) == big);
}

TEST_CASE("metadata comments survive") {
  const std::string text = "# doc_id = n1\n# sent_index = 3\nHola\tO\n\n";
  const Corpus c = parse_conll(text);
  REQUIRE(c.size() == 1);
  CHECK(c.sentences[0].doc_id == "n1");
  CHECK(c.sentences[0].sent_index == 3);
  CHECK(write_conll(c) == text);
}

TEST_CASE("predictions file") {
  const Corpus gold = deid::test::corpus_of({deid::test::sentence({"Ana", "vino"}, {"B-NAME", "O"})});
  const Corpus pred = deid::test::corpus_of({deid::test::sentence({"Ana", "vino"}, {"O", "O"})});
  const auto gp = parse_conll_predictions(write_conll_predictions(gold, pred));
  CHECK(gp.gold == gold);
  CHECK(gp.pred == pred);
}

TEST_CASE("normalization table") {
  const auto& table = deid::test::normalization_table();
  std::set<std::string> all;
  for (const auto& [coarse, fine] : table) {
    for (const auto& f : fine) {
      CAPTURE(f);
      CHECK(normalize_labels(f) == coarse);
      all.insert(f);
    }
  }
  CHECK(all.size() == 29);
  CHECK(table.at("O").size() == 4);
  CHECK(std::set<std::string>(fine_grained_labels().begin(), fine_grained_labels().end()) == all);
  CHECK_THROWS_AS(normalize_labels("NOPE"), LabelError);
}

TEST_CASE("tokenize_words keeps byte offsets") {
  const std::string text = "Dr. Puig, 5/3.";
  const auto words = tokenize_words(text);
  std::vector<std::string> got;
  for (const auto& w : words) {
    got.push_back(w.text);
    CHECK(text.substr(w.span.begin, w.span.end - w.span.begin) == w.text);
  }
  CHECK(got == std::vector<std::string>{"Dr", ".", "Puig", ",", "5", "/", "3", "."});
}

TEST_CASE("split_sentences") {
  CHECK(split_sentences("Hola. Adiós.") == std::vector<std::string>{"Hola.", "Adiós."});
  CHECK(split_sentences("Dr. X llegó.") == std::vector<std::string>{"Dr. X llegó."});
  CHECK(split_sentences("").empty());
  // Non-whitespace content is preserved in order.
  const std::string note = "Pac. de 45 años.  Ingresa el 3/4/2020! ¿Dolor? Sí\n\nAlta.";
  std::string joined, original;
  for (const auto& s : split_sentences(note)) joined += s;
  for (char ch : note) {
    if (!std::isspace(static_cast<unsigned char>(ch))) original += ch;
  }
  joined.erase(std::remove_if(joined.begin(), joined.end(), [](char ch) { return std::isspace(static_cast<unsigned char>(ch)); }),
               joined.end());
  CHECK(joined == original);
}

TEST_CASE("standoff projection") {
  StandoffDocument doc;
  doc.doc_id = "d1";
  doc.raw_text = "visto el 5 de mayo";
  doc.annotations = {{9, 18, "FECHAS"}};
  const auto sentences = convert_standoff_xml(doc);
  REQUIRE(sentences.size() == 1);
  CHECK(sentences[0].labels() == ids({"O", "O", "B-DATE", "I-DATE", "I-DATE"}));
  CHECK(sentences[0].doc_id == "d1");

  doc.annotations.clear();
  for (auto l : convert_standoff_xml(doc)[0].labels()) CHECK(l == kOutside);

  doc.annotations = {{0, 5, "NOMBRE_SUJETO_ASISTENCIA"}, {3, 8, "FECHAS"}};
  CHECK_THROWS(convert_standoff_xml(doc));
}

TEST_CASE("standoff: OTHER dropped, code point offsets, sentence-crossing span") {
  StandoffDocument doc;
  doc.raw_text = "Niña de Lleida. Vive en Reus.";
  // "Niña" is 4 code points (5 bytes). The LOCATION span runs across the boundary.
  doc.annotations = {{0, 4, "SEXO_SUJETO_ASISTENCIA"}, {8, 28, "TERRITORIO"}};
  const auto s = convert_standoff_xml(doc);
  REQUIRE(s.size() == 2);
  CHECK(s[0].labels() == ids({"O", "O", "B-LOCATION", "I-LOCATION"}));
  CHECK(s[1].labels() == ids({"B-LOCATION", "I-LOCATION", "I-LOCATION", "O"}));
}

TEST_CASE("standoff XML parsing") {
  const std::string xml = R"(<?xml version="1.0" encoding="UTF-8"?>
<MEDDOCAN id="n7">
  <TEXT><![CDATA[Ana vino el 3/4.]]></TEXT>
  <TAGS>
    <TAG id="T1" start="0" end="3" TYPE="NOMBRE_SUJETO_ASISTENCIA" text="Ana"/>
    <TAG id="T2" start="12" end="15" TYPE="FECHAS" text="3/4"/>
  </TAGS>
</MEDDOCAN>)";
  const StandoffDocument doc = parse_standoff_xml(xml);
  CHECK(doc.doc_id == "n7");
  CHECK(doc.raw_text == "Ana vino el 3/4.");
  REQUIRE(doc.annotations.size() == 2);
  const auto s = convert_standoff_xml(doc);
  REQUIRE(s.size() == 1);
  CHECK(s[0].labels() == ids({"B-NAME", "O", "O", "B-DATE", "I-DATE", "I-DATE", "O"}));
}

TEST_CASE("B count equals clipped span count") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    StandoffDocument doc;
    std::vector<std::size_t> word_starts;
    for (int w = 0; w < 30; ++w) {
      if (w > 0) doc.raw_text += rng.bernoulli(0.15) ? ". " : " ";
      word_starts.push_back(doc.raw_text.size());
      doc.raw_text += "w" + std::to_string(w);
    }
    std::size_t expected = 0;
    std::size_t w = 0;
    while (w < 30) {
      const std::size_t len = 1 + rng.index(3);
      if (rng.bernoulli(0.3) && w + len <= 30) {
        const std::size_t end_word = w + len - 1;
        const std::size_t end = word_starts[end_word] + 1 + std::to_string(end_word).size();
        doc.annotations.push_back({word_starts[w], end, "FECHAS"});
        // Each sentence the span touches contributes one B-.
        const std::string covered = doc.raw_text.substr(word_starts[w], end - word_starts[w]);
        expected += 1 + static_cast<std::size_t>(std::count(covered.begin(), covered.end(), '.'));
      }
      w += len;
    }
    std::size_t b = 0;
    for (const auto& s : convert_standoff_xml(doc)) {
      for (auto l : s.labels()) b += LabelSet::is_begin(l);
    }
    CHECK(b == expected);
  }
}

TEST_CASE("sample_fewshot") {
  SyntheticConfig sc;
  sc.source_sentences = 300;
  sc.target_train_sentences = 300;
  sc.target_dev_sentences = 10;
  sc.raw_target_sentences = 10;
  const auto bench = generate_synthetic_bilingual(sc, 4);
  const LabelSet ls;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const Corpus fs = sample_fewshot(bench.target, {50, seed, true});
    CHECK(fs.size() == 50);
    for (std::size_t t = 0; t < ls.num_types(); ++t) {
      CHECK(std::any_of(fs.sentences.begin(), fs.sentences.end(),
                        [&](const Sentence& s) { return sentence_has_type(s, t); }));
    }
    std::set<std::string> unique;
    for (const auto& s : fs.sentences) unique.insert(write_conll(deid::test::corpus_of({s})));
    CHECK(unique.size() == 50);
    CHECK(sample_fewshot(bench.target, {50, seed, true}) == fs);
  }
  CHECK_THROWS(sample_fewshot(bench.target, {301, 1, true}));
}

TEST_CASE("sample_fewshot forced selection and missing types") {
  std::vector<Sentence> pool;
  for (int i = 0; i < 20; ++i) pool.push_back(deid::test::sentence({"nada"}, {"O"}));
  const char* types[] = {"B-DATE", "B-AGE", "B-LOCATION", "B-NAME", "B-CONTACT", "B-PROFESSION", "B-ID"};
  for (const char* t : types) pool.push_back(deid::test::sentence({"x"}, {t}));
  const Corpus c = deid::test::corpus_of(pool);
  const Corpus fs = sample_fewshot(c, {7, 9, true});
  REQUIRE(fs.size() == 7);
  std::set<LabelId> got;
  for (const auto& s : fs.sentences) got.insert(s.tokens[0].label);
  CHECK(got.size() == 7);

  Corpus no_id = c;
  no_id.sentences.pop_back();
  try {
    sample_fewshot(no_id, {10, 1, true});
    FAIL("expected coverage error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("ID") != std::string::npos);
  }
  CHECK(sample_fewshot(no_id, {10, 1, false}).size() == 10);
}

}  // TEST_SUITE
