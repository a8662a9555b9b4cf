#include <cmath>
#include <map>
#include <set>
#include <tuple>

#include "doctest.h"

#include "deid/error.hpp"
#include "deid/metrics.hpp"
#include "fixtures.hpp"
#include "test_util.hpp"

using namespace deid;
using deid::test::ids;
using deid::test::sentence;
using deid::test::Counts;
using deid::test::ten_sentence_fixture;

namespace {

const LabelMetrics& row(const MetricsReport& r, const std::string& type) {
  for (const auto& m : r.per_label) {
    if (m.type == type) return m;
  }
  throw std::runtime_error("no row " + type);
}

}  // namespace

TEST_SUITE("metrics_agreement") {

TEST_CASE("repair_bio") {
  CHECK(repair_bio(ids({"O", "I-AGE"})) == ids({"O", "B-AGE"}));
  CHECK(repair_bio(ids({"B-DATE", "I-DATE"})) == ids({"B-DATE", "I-DATE"}));
  CHECK(repair_bio(ids({"B-DATE", "I-AGE", "I-AGE"})) == ids({"B-DATE", "B-AGE", "I-AGE"}));
  CHECK(repair_bio(ids({"I-NAME"})) == ids({"B-NAME"}));
  Rng rng(1);
  for (int i = 0; i < 500; ++i) {
    const auto x = deid::test::random_labels(rng, 1 + rng.index(15));
    const auto once = repair_bio(x);
    CHECK(repair_bio(once) == once);
    // Already-valid input keeps its spans.
    CHECK(extract_spans(repair_bio(once)) == extract_spans(once));
    // Only I- labels may change, and only into the matching B-.
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (once[j] != x[j]) {
        CHECK(LabelSet::is_inside(x[j]));
        CHECK(once[j] == x[j] - 1);
      }
    }
  }
}

TEST_CASE("extract_spans") {
  CHECK(extract_spans(ids({"B-DATE", "I-DATE", "O", "B-AGE"})) == std::vector<Span>{{0, 0, 1, 0}, {1, 3, 3, 0}});
  CHECK(extract_spans(ids({"O", "O"})).empty());
  CHECK(extract_spans(ids({"B-NAME", "B-NAME"})) == std::vector<Span>{{3, 0, 0, 0}, {3, 1, 1, 0}});
  Rng rng(2);
  for (int i = 0; i < 300; ++i) {
    const auto x = repair_bio(deid::test::random_labels(rng, 1 + rng.index(15)));
    std::size_t b = 0;
    for (auto l : x) b += LabelSet::is_begin(l);
    CHECK(extract_spans(x).size() == b);
  }
}

TEST_CASE("ten-sentence fixture") {
  const auto [gold, pred] = ten_sentence_fixture();
  const MetricsReport r = evaluate(gold, pred);
  CHECK(r.micro.tp == 5);
  CHECK(r.micro.fp == 5);
  CHECK(r.micro.fn == 6);
  CHECK(r.micro.precision == 0.5);
  CHECK(r.micro.recall == doctest::Approx(5.0 / 11).epsilon(1e-15));
  CHECK(r.micro.f1 == doctest::Approx(10.0 / 21).epsilon(1e-15));

  REQUIRE(r.per_label.size() == 7);
  const std::vector<std::string> order{"DATE", "AGE", "LOCATION", "NAME", "CONTACT", "PROFESSION", "ID"};
  for (std::size_t i = 0; i < 7; ++i) CHECK(r.per_label[i].type == order[i]);

  struct Expect {
    std::size_t tp, fp, fn;
    double p, r, f1;
  };
  const std::map<std::string, Expect> expect{
      {"DATE", {1, 1, 1, 0.5, 0.5, 0.5}},
      {"AGE", {0, 1, 3, 0.0, 0.0, 0.0}},
      {"LOCATION", {0, 2, 1, 0.0, 0.0, 0.0}},
      {"NAME", {2, 0, 1, 1.0, 2.0 / 3, 0.8}},
      {"CONTACT", {0, 1, 0, 0.0, 0.0, 0.0}},
      {"PROFESSION", {1, 0, 0, 1.0, 1.0, 1.0}},
      {"ID", {1, 0, 0, 1.0, 1.0, 1.0}},
  };
  for (const auto& [type, e] : expect) {
    CAPTURE(type);
    const auto& m = row(r, type);
    CHECK(m.tp == e.tp);
    CHECK(m.fp == e.fp);
    CHECK(m.fn == e.fn);
    CHECK(m.precision == doctest::Approx(e.p).epsilon(1e-15));
    CHECK(m.recall == doctest::Approx(e.r).epsilon(1e-15));
    CHECK(m.f1 == doctest::Approx(e.f1).epsilon(1e-15));
  }
  CHECK(row(r, "AGE").support() == 3);
  CHECK(row(r, "AGE").predicted() == 1);

  const auto per = per_label_report(gold, pred);
  std::size_t tp = 0;
  for (const auto& m : per) tp += m.tp;
  CHECK(tp == r.micro.tp);
}

TEST_CASE("half-right and off-by-one cases alone") {
  const auto [gold, pred] = ten_sentence_fixture();
  auto pick = [](const Corpus& c, std::size_t i) { return deid::test::corpus_of({c.sentences[i]}); };
  const MetricsReport half = evaluate(pick(gold, 4), pick(pred, 4));
  CHECK(half.micro.precision == 0.5);
  CHECK(half.micro.recall == 0.5);
  CHECK(half.micro.f1 == 0.5);

  const MetricsReport off = evaluate(pick(gold, 2), pick(pred, 2));
  CHECK(off.micro.tp == 0);
  CHECK(off.micro.fp == 1);
  CHECK(off.micro.fn == 1);
}

TEST_CASE("matches a brute-force matcher on random sequences") {
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto [gold, pred] = deid::test::random_pair(rng);
    const auto expected = deid::test::brute_counts(gold, pred);
    const MetricsReport r = evaluate(gold, pred);
    Counts total;
    for (const auto& [type, c] : expected) {
      total.tp += c.tp;
      total.fp += c.fp;
      total.fn += c.fn;
    }
    CHECK(r.micro.tp == total.tp);
    CHECK(r.micro.fp == total.fp);
    CHECK(r.micro.fn == total.fn);
    const LabelSet ls;
    for (const auto& m : r.per_label) {
      const auto t = *ls.type_index(m.type);
      const Counts c = expected.count(t) ? expected.at(t) : Counts{};
      CHECK(m.tp == c.tp);
      CHECK(m.fp == c.fp);
      CHECK(m.fn == c.fn);
    }
    CHECK(r.per_label.size() == expected.size());
  }
}

TEST_CASE("evaluate properties") {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const Corpus a = deid::test::random_corpus(rng, 6);
    Corpus b = a;
    for (auto& s : b.sentences) {
      for (auto& t : s.tokens) {
        if (rng.bernoulli(0.2)) t.label = static_cast<LabelId>(rng.index(15));
      }
    }
    const MetricsReport self = evaluate(a, a);
    if (self.micro.support() > 0) {
      CHECK(self.micro.precision == 1.0);
      CHECK(self.micro.recall == 1.0);
      CHECK(self.micro.f1 == 1.0);
    }
    const MetricsReport ab = evaluate(a, b);
    const MetricsReport ba = evaluate(b, a);
    CHECK(ab.micro.precision == ba.micro.recall);
    CHECK(ab.micro.recall == ba.micro.precision);
    CHECK(ab.micro.f1 == doctest::Approx(ba.micro.f1).epsilon(1e-15));
  }
  // No predictions: P is 0, not NaN.
  const Corpus g = deid::test::corpus_of({sentence({"Ana"}, {"B-NAME"})});
  const Corpus none = deid::test::corpus_of({sentence({"Ana"}, {"O"})});
  const MetricsReport z = evaluate(g, none);
  CHECK(z.micro.precision == 0.0);
  CHECK(z.micro.f1 == 0.0);
  // A type absent from both sides gets no row.
  for (const auto& m : z.per_label) CHECK(m.type == "NAME");
}

TEST_CASE("alignment errors name the sentence") {
  const Corpus a = deid::test::corpus_of({sentence({"a"}, {"O"}), sentence({"a", "b"}, {"O", "O"})});
  const Corpus b = deid::test::corpus_of({sentence({"a"}, {"O"}), sentence({"a"}, {"O"})});
  try {
    evaluate(a, b);
    FAIL("expected an alignment error");
  } catch (const Error& e) {
    CHECK(e.kind() == "alignment_error");
    CHECK(std::string(e.what()).find('1') != std::string::npos);
  }
}

TEST_CASE("report output") {
  const auto [gold, pred] = ten_sentence_fixture();
  const MetricsReport r = evaluate(gold, pred);
  const auto j = r.to_json();
  CHECK(j["micro"]["tp"] == 5);
  CHECK(j["per_label"].size() == 7);
  CHECK(r.to_table().find("PROFESSION") != std::string::npos);
}

TEST_CASE("kappa closed form") {
  // Both annotators use each label half the time (p_e = 0.5) and agree on 8 of 10 tokens.
  const std::vector<LabelId> a{0, 0, 0, 0, 0, 1, 1, 1, 1, 1};
  const std::vector<LabelId> b{0, 0, 0, 0, 1, 0, 1, 1, 1, 1};
  const KappaResult k = cohens_kappa_detail(a, b);
  CHECK(std::abs(k.observed - 0.8) < 1e-12);
  CHECK(std::abs(k.expected - 0.5) < 1e-12);
  CHECK(std::abs(k.kappa - 0.6) < 1e-12);
  CHECK(std::abs(cohens_kappa(a, b) - (0.8 - 0.5) / (1 - 0.5)) < 1e-12);

  // Multi-class confusion table.
  const int table[3][3] = {{20, 3, 1}, {2, 15, 4}, {0, 5, 10}};
  std::vector<LabelId> x, y;
  double n = 0, agree = 0, row_sum[3] = {}, col_sum[3] = {};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      for (int c = 0; c < table[i][j]; ++c) {
        x.push_back(i * 2);
        y.push_back(j * 2);
      }
      n += table[i][j];
      if (i == j) agree += table[i][j];
      row_sum[i] += table[i][j];
      col_sum[j] += table[i][j];
    }
  }
  double pe = 0;
  for (int i = 0; i < 3; ++i) pe += row_sum[i] * col_sum[i] / (n * n);
  const double po = agree / n;
  CHECK(std::abs(cohens_kappa(x, y) - (po - pe) / (1 - pe)) < 1e-12);
}

TEST_CASE("kappa of independent streams is near zero") {
  Rng rng(5);
  std::vector<LabelId> a(100000), b(100000);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = rng.bernoulli(0.7) ? 0 : static_cast<LabelId>(1 + rng.index(14));
    b[i] = rng.bernoulli(0.7) ? 0 : static_cast<LabelId>(1 + rng.index(14));
  }
  CHECK(std::abs(cohens_kappa(a, b)) < 0.02);
}

TEST_CASE("kappa properties") {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.index(40);
    const auto a = deid::test::random_labels(rng, n);
    auto b = a;
    for (auto& l : b) {
      if (rng.bernoulli(0.3)) l = static_cast<LabelId>(rng.index(15));
    }
    const KappaResult k = cohens_kappa_detail(a, b);
    if (k.expected < 1.0) {
      CHECK(k.kappa <= k.observed + 1e-12);
      CHECK((k.kappa == doctest::Approx(1.0)) == (k.observed == 1.0));
    }
    // Relabeling the alphabet leaves kappa unchanged.
    std::vector<LabelId> perm(15);
    for (std::size_t i = 0; i < 15; ++i) perm[i] = static_cast<LabelId>((i * 7 + 3) % 15);
    std::vector<LabelId> pa, pb;
    for (auto l : a) pa.push_back(perm[l]);
    for (auto l : b) pb.push_back(perm[l]);
    CHECK(cohens_kappa_detail(pa, pb).kappa == doctest::Approx(k.kappa).epsilon(1e-12));
  }
  const std::vector<LabelId> all_o(5, 0);
  CHECK(cohens_kappa(all_o, all_o) == 1.0);
  CHECK(cohens_kappa(ids({"O", "B-AGE"}), ids({"O", "B-AGE"})) == 1.0);
  CHECK_THROWS(cohens_kappa(all_o, std::vector<LabelId>(4, 0)));
  CHECK_THROWS(cohens_kappa({}, {}));
}

TEST_CASE("kappa excluding O") {
  const auto a = ids({"O", "O", "B-AGE", "B-DATE", "O"});
  const auto b = ids({"O", "B-AGE", "B-AGE", "B-AGE", "O"});
  const KappaResult k = cohens_kappa_detail(a, b, {true});
  CHECK(k.tokens == 3);
}

TEST_CASE("partition_agreement") {
  const Corpus a = deid::test::corpus_of({sentence({"x", "y"}, {"O", "B-AGE"}), sentence({"z"}, {"O"})});
  Corpus b = a;
  auto p = partition_agreement(a, b);
  CHECK(p.agreed.size() == 2);
  CHECK(p.disagreed.empty());
  b.sentences[0].tokens[1].label = 0;
  p = partition_agreement(a, b);
  CHECK(p.agreed.size() == 1);
  REQUIRE(p.disagreed.size() == 1);
  CHECK(p.disagreed[0].index == 0);
  CHECK(p.disagreed[0].a == a.sentences[0]);
  CHECK(p.disagreed[0].b == b.sentences[0]);

  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const Corpus x = deid::test::random_corpus(rng, 10);
    Corpus y = x;
    for (auto& s : y.sentences) {
      if (rng.bernoulli(0.4)) s.tokens[0].label = static_cast<LabelId>(rng.index(15));
    }
    const auto part = partition_agreement(x, y);
    CHECK(part.agreed.size() + part.disagreed.size() == x.size());
  }

  // Metadata matching: same ids in a different order still pair up.
  Corpus m1 = a, m2 = a;
  m1.sentences[0].doc_id = m2.sentences[0].doc_id = "d";
  m1.sentences[1].doc_id = m2.sentences[1].doc_id = "d";
  m1.sentences[0].sent_index = m2.sentences[0].sent_index = 0;
  m1.sentences[1].sent_index = m2.sentences[1].sent_index = 1;
  std::swap(m2.sentences[0], m2.sentences[1]);
  CHECK(partition_agreement(m1, m2).agreed.size() == 2);
  m2.sentences[0].sent_index = 9;
  CHECK_THROWS(partition_agreement(m1, m2));
}

}  // TEST_SUITE
