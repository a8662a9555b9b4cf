#pragma once

#include <map>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "deid/corpus.hpp"
#include "deid/rng.hpp"
#include "test_util.hpp"

// Hand-built oracles shared by the unit tests and the acceptance binary.
namespace deid::test {

// Hand-labeled gold/pred pairs. Per-type counts are worked out in the comments.
inline std::pair<Corpus, Corpus> ten_sentence_fixture() {
  std::vector<Sentence> gold, pred;
  auto add = [&](Sentence g, Sentence p) {
    gold.push_back(std::move(g));
    pred.push_back(std::move(p));
  };
  // NAME tp
  add(sentence({"Ana", "Puig", "vino"}, {"B-NAME", "I-NAME", "O"}),
      sentence({"Ana", "Puig", "vino"}, {"B-NAME", "I-NAME", "O"}));
  // DATE tp, AGE fn
  add(sentence({"hoy", "a", "45"}, {"B-DATE", "O", "B-AGE"}), sentence({"hoy", "a", "45"}, {"B-DATE", "O", "O"}));
  // LOCATION boundary off by one: fp + fn
  add(sentence({"Sant", "Boi", "centro"}, {"B-LOCATION", "I-LOCATION", "O"}),
      sentence({"Sant", "Boi", "centro"}, {"B-LOCATION", "O", "O"}));
  // CONTACT fp
  add(sentence({"llamar", "al", "600"}, {"O", "O", "O"}), sentence({"llamar", "al", "600"}, {"O", "B-CONTACT", "O"}));
  // Two gold spans, two predicted, one match: NAME tp + fn, LOCATION fp
  add(sentence({"Joan", "y", "Marc"}, {"B-NAME", "O", "B-NAME"}),
      sentence({"Joan", "y", "Marc"}, {"B-NAME", "O", "B-LOCATION"}));
  // ID tp
  add(sentence({"NHC", "12", "34"}, {"B-ID", "I-ID", "I-ID"}), sentence({"NHC", "12", "34"}, {"B-ID", "I-ID", "I-ID"}));
  // Stray I- is repaired to B-: PROFESSION tp
  add(sentence({"enfermera"}, {"B-PROFESSION"}), sentence({"enfermera"}, {"I-PROFESSION"}));
  // Repaired prediction (1,1) vs gold (0,1): DATE fp + fn
  add(sentence({"5", "mayo", "."}, {"B-DATE", "I-DATE", "O"}), sentence({"5", "mayo", "."}, {"O", "I-DATE", "O"}));
  // Gold has two adjacent AGE spans, pred merges them: AGE fp + 2 fn
  add(sentence({"45", "46"}, {"B-AGE", "B-AGE"}), sentence({"45", "46"}, {"B-AGE", "I-AGE"}));
  // Nothing
  add(sentence({"sin", "más"}, {"O", "O"}), sentence({"sin", "más"}, {"O", "O"}));
  return {deid::test::corpus_of(gold), deid::test::corpus_of(pred)};
}

using Key = std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>;  // sentence, type, start, end

// Independent span reader: a span opens at B-X, or at I-X not continuing X.
inline std::set<Key> brute_spans(const Corpus& c) {
  std::set<Key> out;
  for (std::size_t s = 0; s < c.size(); ++s) {
    const auto labels = c.sentences[s].labels();
    std::size_t i = 0;
    while (i < labels.size()) {
      if (labels[i] == 0) {
        ++i;
        continue;
      }
      const std::size_t type = static_cast<std::size_t>((labels[i] - 1) / 2);
      std::size_t j = i + 1;
      while (j < labels.size() && labels[j] == static_cast<LabelId>(2 + 2 * type)) ++j;
      out.insert({s, type, i, j - 1});
      i = j;
    }
  }
  return out;
}

struct Counts {
  std::size_t tp = 0, fp = 0, fn = 0;
};

inline std::map<std::size_t, Counts> brute_counts(const Corpus& gold, const Corpus& pred) {
  const auto g = brute_spans(gold);
  const auto p = brute_spans(pred);
  std::map<std::size_t, Counts> out;
  for (const auto& k : p) (g.count(k) ? out[std::get<1>(k)].tp : out[std::get<1>(k)].fp) += 1;
  for (const auto& k : g) {
    if (!p.count(k)) out[std::get<1>(k)].fn += 1;
  }
  return out;
}

// Random gold/pred pair; about a third of the sentences are predicted exactly.
inline std::pair<Corpus, Corpus> random_pair(Rng& rng) {
  Corpus gold, pred;
  const std::size_t n = 1 + rng.index(4);
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t len = 1 + rng.index(12);
    const auto g = random_labels(rng, len, 0.4);
    const auto p = rng.bernoulli(0.3) ? g : random_labels(rng, len, 0.4);
    Sentence gs, ps;
    for (std::size_t i = 0; i < len; ++i) {
      gs.tokens.push_back({"w", g[i]});
      ps.tokens.push_back({"w", p[i]});
    }
    gold.sentences.push_back(gs);
    pred.sentences.push_back(ps);
  }
  return {gold, pred};
}

// Fine-grained source types grouped by coarse PHI; "O" holds the OTHER group.
inline const std::map<std::string, std::vector<std::string>>& normalization_table() {
  static const std::map<std::string, std::vector<std::string>> table{
      {"AGE", {"EDAD_SUJETO_ASISTENCIA"}},
      {"CONTACT", {"NUMERO_TELEFONO", "NUMERO_FAX", "CORREO_ELECTRONICO", "URL_WEB"}},
      {"DATE", {"FECHAS"}},
      {"ID",
       {"ID_ASEGURAMIENTO", "ID_CONTACTO_ASISTENCIAL", "NUMERO_BENEF_PLAN_SALUD",
        "IDENTIF_VEHICULOS_NRSERIE_PLACAS", "IDENTIF_DISPOSITIVOS_NRSERIE", "IDENTIF_BIOMETRICOS",
        "ID_SUJETO_ASISTENCIA", "ID_TITULACION_PERSONAL_SANITARIO", "ID_EMPLEO_PERSONAL_SANITARIO",
        "OTRO_NUMERO_IDENTIF"}},
      {"LOCATION", {"HOSPITAL", "INSTITUCION", "CALLE", "TERRITORIO", "PAIS", "CENTRO_SALUD"}},
      {"NAME", {"NOMBRE_SUJETO_ASISTENCIA", "NOMBRE_PERSONAL_SANITARIO"}},
      {"PROFESSION", {"PROFESION"}},
      {"O",
       {"SEXO_SUJETO_ASISTENCIA", "FAMILIARES_SUJETO_ASISTENCIA", "OTROS_SUJETO_ASISTENCIA",
        "DIREC_PROT_INTERNET"}},
  };
  return table;
}

}  // namespace deid::test
