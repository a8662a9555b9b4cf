#include <algorithm>
#include <cctype>
#include <set>

#include "doctest.h"

#include "deid/bpe.hpp"
#include "deid/metrics.hpp"
#include "deid/synthetic.hpp"
#include "test_util.hpp"

using namespace deid;

namespace {

std::set<std::string> alphabetic_types(const Corpus& c) {
  std::set<std::string> out;
  for (const auto& s : c.sentences) {
    for (const auto& t : s.tokens) {
      if (is_alphabetic_word(t.text)) out.insert(t.text);
    }
  }
  return out;
}

SyntheticConfig small_config(double overlap) {
  SyntheticConfig sc;
  sc.source_sentences = 400;
  sc.target_train_sentences = 200;
  sc.target_dev_sentences = 100;
  sc.raw_target_sentences = 100;
  sc.overlap = overlap;
  return sc;
}

std::vector<std::string> texts_of(const Corpus& c) {
  std::vector<std::string> out;
  for (const auto& s : c.sentences) out.push_back(detokenize(s.words()));
  return out;
}

}  // namespace

TEST_SUITE("synthetic") {

TEST_CASE("overlap extremes") {
  const auto& lexicon = LexicalShift::source_lexicon();
  const std::set<std::string> lex(lexicon.begin(), lexicon.end());
  const LexicalShift keep(1.0);
  for (const auto& w : lexicon) CHECK_FALSE(keep.is_shifted(w));

  SyntheticConfig same = small_config(1.0);
  same.target_novel_rate = 0.0;
  const auto a = generate_synthetic_bilingual(same, 2);
  for (const auto& w : alphabetic_types(a.target)) CHECK(lex.count(w) == 1);

  const auto& abbreviations = default_abbreviations();
  auto is_abbreviation = [&](std::string w) {
    for (auto& ch : w) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return std::binary_search(abbreviations.begin(), abbreviations.end(), w);
  };
  const auto b = generate_synthetic_bilingual(small_config(0.0), 2);
  const auto src_b = alphabetic_types(b.source);
  std::size_t shared = 0;
  for (const auto& w : alphabetic_types(b.target)) {
    if (!is_abbreviation(w)) shared += src_b.count(w);
  }
  CHECK(shared == 0);
}

TEST_CASE("densities within 20 percent at default config") {
  const SyntheticConfig sc;
  const auto bench = generate_synthetic_bilingual(sc, 1);
  const LabelSet ls;
  for (const Corpus* c : {&bench.source, &bench.target, &bench.target_dev}) {
    std::vector<double> count(ls.num_types(), 0.0);
    for (std::size_t i = 0; i < c->size(); ++i) {
      for (const auto& span : extract_spans(c->sentences[i].labels())) count[span.type] += 1;
    }
    for (std::size_t t = 0; t < ls.num_types(); ++t) {
      const double expected = sc.densities.at(ls.phi_types()[t]);
      const double got = count[t] / static_cast<double>(c->size());
      CAPTURE(ls.phi_types()[t]);
      CHECK(got >= 0.8 * expected);
      CHECK(got <= 1.2 * expected);
    }
  }
}

TEST_CASE("pure function of config and seed, splits disjoint") {
  const auto sc = small_config(0.6);
  const auto a = generate_synthetic_bilingual(sc, 9);
  const auto b = generate_synthetic_bilingual(sc, 9);
  CHECK(a.source == b.source);
  CHECK(a.target == b.target);
  CHECK(a.target_dev == b.target_dev);
  CHECK(a.raw_target_text == b.raw_target_text);
  CHECK_FALSE(generate_synthetic_bilingual(sc, 10).source == a.source);

  std::set<std::string> train;
  for (const auto& t : texts_of(a.target)) train.insert(t);
  for (const auto& t : texts_of(a.target_dev)) CHECK(train.count(t) == 0);
  for (const auto& t : a.raw_target_text) CHECK(train.count(t) == 0);
}

TEST_CASE("detokenize inverts tokenize_words") {
  const auto bench = generate_synthetic_bilingual(small_config(0.6), 3);
  for (const auto& s : bench.target.sentences) {
    std::vector<std::string> again;
    for (const auto& w : tokenize_words(detokenize(s.words()))) again.push_back(w.text);
    CHECK(again == s.words());
  }
}

TEST_CASE("config validation and kv round trip") {
  SyntheticConfig bad;
  bad.overlap = 1.5;
  CHECK_THROWS(bad.validate());
  SyntheticConfig sc;
  sc.overlap = 0.25;
  sc.densities["AGE"] = 0.5;
  const SyntheticConfig again = SyntheticConfig::from_kv(KvConfig::parse(sc.to_kv()));
  CHECK(again.overlap == 0.25);
  CHECK(again.densities.at("AGE") == 0.5);
  CHECK(again.to_kv() == sc.to_kv());
}

TEST_CASE("notes carry gold sentences") {
  const auto notes = generate_synthetic_notes(SyntheticConfig{}, 1, 5);
  REQUIRE(notes.size() == 5);
  for (const auto& n : notes) {
    CHECK(n.gold.size() >= 3);
    CHECK(n.gold.size() <= 8);
    CHECK(split_sentences(n.text).size() == n.gold.size());
  }
}

}  // TEST_SUITE

TEST_SUITE("subword_vocab") {

TEST_CASE("first merge is the most frequent pair") {
  const std::vector<std::string> text{"aaab", "aaab"};
  const std::size_t alphabet = bpe_alphabet_size(text);
  CHECK(alphabet == 2);
  const Vocab v = train_bpe(text, alphabet + Vocab::kNumSpecials + 1);
  REQUIRE(v.merges().size() == 1);
  CHECK(v.merges()[0] == std::pair<std::string, std::string>{"a", "a"});

  const Vocab chars = train_bpe(text, alphabet + Vocab::kNumSpecials);
  CHECK(chars.merges().empty());
  CHECK(chars.size() == alphabet + Vocab::kNumSpecials);
  CHECK_THROWS(train_bpe(text, alphabet + Vocab::kNumSpecials - 1));
}

TEST_CASE("ties go to the lexicographically smallest pair") {
  // ab and cd both occur twice.
  const Vocab v = train_bpe({"cd ab", "ab cd"}, 4 + 4 + 1);
  REQUIRE(v.merges().size() == 1);
  CHECK(v.merges()[0] == std::pair<std::string, std::string>{"a", "b"});
}

TEST_CASE("deterministic and serializable") {
  const auto bench = generate_synthetic_bilingual(small_config(0.6), 1);
  const auto text = texts_of(bench.source);
  const Vocab a = train_bpe(text, 400);
  const Vocab b = train_bpe(text, 400);
  CHECK(a.serialize() == b.serialize());
  CHECK(a.size() == 400);
  const Vocab c = Vocab::deserialize(a.serialize());
  CHECK(c.serialize() == a.serialize());
  CHECK(c.pieces() == a.pieces());
}

TEST_CASE("encode alignment") {
  const Vocab v = train_bpe({"casa casa casa perro"}, 4 + 7 + 3);
  const auto one = encode(std::vector<std::string>{"casa"}, v);
  CHECK(one.word_index == std::vector<std::size_t>(one.size(), 0));
  CHECK(one.first_piece_mask.front());

  const auto e = encode(std::vector<std::string>{"perro", "casa"}, v);
  CHECK(e.num_words == 2);
  std::size_t firsts = 0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (i > 0) CHECK(e.word_index[i] >= e.word_index[i - 1]);
    firsts += e.first_piece_mask[i];
    CHECK(e.first_piece_mask[i] == (i == 0 || e.word_index[i] != e.word_index[i - 1]));
  }
  CHECK(firsts == 2);
  CHECK(decode(e, v) == std::vector<std::string>{"perro", "casa"});

  // "perro" has no merges beyond characters here: 5 pieces, one word.
  const auto p = encode(std::vector<std::string>{"perro"}, v);
  CHECK(p.first_piece_mask == std::vector<bool>{true, false, false, false, false});
  CHECK(p.word_index == std::vector<std::size_t>{0, 0, 0, 0, 0});
  CHECK(align_labels(p, {3}) == std::vector<int>{3, kIgnoreLabel, kIgnoreLabel, kIgnoreLabel, kIgnoreLabel});
}

TEST_CASE("unknown characters become UNK") {
  const Vocab v = train_bpe({"abc"}, 7);
  const auto e = encode(std::vector<std::string>{"aZ"}, v);
  CHECK(e.unk_count == 1);
  CHECK(decode(e, v) == std::vector<std::string>{"a<unk>"});
}

TEST_CASE("truncation drops whole words") {
  const Vocab v = train_bpe({"abcdefghij"}, 4 + 10);
  std::vector<std::string> words;
  // Word lengths 1..10 cycling: 200+ pieces total.
  std::size_t total = 0;
  for (std::size_t i = 0; total < 200; ++i) {
    const std::size_t len = 1 + i % 10;
    words.push_back(std::string("abcdefghij").substr(0, len));
    total += len;
  }
  const auto e = encode(words, v, 128);
  CHECK(e.size() <= 128);
  std::size_t expect_words = 0, used = 0;
  while (expect_words < words.size() && used + words[expect_words].size() <= 128) used += words[expect_words++].size();
  CHECK(e.num_words == expect_words);
  CHECK(e.size() == used);
  CHECK(e.total_words == words.size());
  for (std::size_t i = 0; i < e.size(); ++i) CHECK(e.word_index[i] < e.num_words);
}

TEST_CASE("align then project is the identity") {
  const auto bench = generate_synthetic_bilingual(small_config(0.6), 5);
  const Vocab v = train_bpe(texts_of(bench.source), 300);
  for (const auto& s : bench.target.sentences) {
    const auto e = encode(s, v);
    REQUIRE(e.num_words == s.tokens.size());
    const auto aligned = align_labels(e, s.labels());
    CHECK(project_to_words(e, aligned) == s.labels());
  }
  const auto e = encode(bench.target.sentences[0], v);
  CHECK_THROWS(align_labels(e, {0}));
}

TEST_CASE("shared pieces at overlap 0.6") {
  SyntheticConfig sc;
  const auto bench = generate_synthetic_bilingual(sc, 1);
  auto text = texts_of(bench.source);
  for (const auto& t : bench.raw_target_text) text.push_back(t);
  const Vocab v = train_bpe(text, 1000);
  std::vector<EncodedSentence> src, tgt;
  for (const auto& s : bench.source.sentences) src.push_back(encode(s, v));
  for (const auto& s : bench.target.sentences) tgt.push_back(encode(s, v));
  CHECK(shared_piece_fraction(src, tgt) >= 0.40);
}

}  // TEST_SUITE
