#include "deid/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "deid/error.hpp"

namespace deid {

std::vector<LabelId> repair_bio(std::vector<LabelId> labels) {
  LabelId prev = kOutside;
  for (auto& l : labels) {
    if (LabelSet::is_inside(l)) {
      const auto t = LabelSet::type_of(l);
      if (prev == kOutside || LabelSet::type_of(prev) != t) l = l - 1;
    }
    prev = l;
  }
  return labels;
}

std::vector<Span> extract_spans(const std::vector<LabelId>& labels, std::size_t sentence) {
  std::vector<Span> spans;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto t = LabelSet::type_of(labels[i]);
    if (!t) continue;
    const bool continues = LabelSet::is_inside(labels[i]) && !spans.empty() &&
                           spans.back().end + 1 == i && spans.back().type == *t;
    if (continues) {
      spans.back().end = i;
    } else {
      spans.push_back({*t, i, i, sentence});
    }
  }
  return spans;
}

namespace {

void finish(LabelMetrics& m) {
  m.precision = m.tp + m.fp == 0 ? 0.0 : static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
  m.recall = m.tp + m.fn == 0 ? 0.0 : static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
  m.f1 = m.precision + m.recall == 0.0
             ? 0.0
             : 2.0 * m.precision * m.recall / (m.precision + m.recall);
}

void check_aligned(const Corpus& gold, const Corpus& pred) {
  if (gold.size() != pred.size()) {
    throw Error("alignment_error", "gold has " + std::to_string(gold.size()) +
                                       " sentences, prediction has " +
                                       std::to_string(pred.size()));
  }
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold.sentences[i].tokens.size() != pred.sentences[i].tokens.size()) {
      throw Error("alignment_error",
                  "sentence " + std::to_string(i) + ": gold has " +
                      std::to_string(gold.sentences[i].tokens.size()) + " words, prediction has " +
                      std::to_string(pred.sentences[i].tokens.size()));
    }
  }
}

}  // namespace

MetricsReport evaluate(const Corpus& gold, const Corpus& pred) {
  check_aligned(gold, pred);
  const auto& ls = gold.label_set;
  std::vector<LabelMetrics> by_type(ls.num_types());
  for (std::size_t t = 0; t < by_type.size(); ++t) by_type[t].type = ls.phi_types()[t];

  for (std::size_t i = 0; i < gold.size(); ++i) {
    const auto g = extract_spans(repair_bio(gold.sentences[i].labels()), i);
    const auto p = extract_spans(repair_bio(pred.sentences[i].labels()), i);
    const std::set<Span> gold_set(g.begin(), g.end());
    const std::set<Span> pred_set(p.begin(), p.end());
    for (const auto& s : p) {
      if (gold_set.count(s)) ++by_type[s.type].tp;
      else ++by_type[s.type].fp;
    }
    for (const auto& s : g) {
      if (!pred_set.count(s)) ++by_type[s.type].fn;
    }
  }

  MetricsReport report;
  report.micro.type = "micro";
  for (auto& m : by_type) {
    report.micro.tp += m.tp;
    report.micro.fp += m.fp;
    report.micro.fn += m.fn;
    if (m.tp + m.fp + m.fn == 0) continue;
    finish(m);
    report.per_label.push_back(m);
  }
  finish(report.micro);
  return report;
}

std::vector<LabelMetrics> per_label_report(const Corpus& gold, const Corpus& pred) {
  return evaluate(gold, pred).per_label;
}

nlohmann::json MetricsReport::to_json() const {
  auto row = [](const LabelMetrics& m) {
    return nlohmann::json{{"type", m.type},           {"precision", m.precision},
                          {"recall", m.recall},       {"f1", m.f1},
                          {"tp", m.tp},               {"fp", m.fp},
                          {"fn", m.fn},               {"support", m.support()},
                          {"predicted", m.predicted()}};
  };
  nlohmann::json j;
  j["micro"] = row(micro);
  j["per_label"] = nlohmann::json::array();
  for (const auto& m : per_label) j["per_label"].push_back(row(m));
  return j;
}

std::string MetricsReport::to_table() const {
  std::ostringstream out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-12s %9s %9s %9s %8s %8s\n", "type", "precision", "recall",
                "f1", "support", "pred");
  out << buf;
  auto line = [&](const LabelMetrics& m) {
    std::snprintf(buf, sizeof buf, "%-12s %9.3f %9.3f %9.3f %8zu %8zu\n", m.type.c_str(),
                  m.precision, m.recall, m.f1, m.support(), m.predicted());
    out << buf;
  };
  for (const auto& m : per_label) line(m);
  line(micro);
  return out.str();
}

KappaResult cohens_kappa_detail(const std::vector<LabelId>& a, const std::vector<LabelId>& b,
                                const KappaOptions& options) {
  if (a.size() != b.size()) {
    throw Error("alignment_error", "kappa: sequences of length " + std::to_string(a.size()) +
                                       " and " + std::to_string(b.size()));
  }
  std::map<LabelId, double> freq_a, freq_b;
  std::size_t n = 0, same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (options.exclude_o && a[i] == kOutside && b[i] == kOutside) continue;
    ++n;
    if (a[i] == b[i]) ++same;
    freq_a[a[i]] += 1.0;
    freq_b[b[i]] += 1.0;
  }
  if (n == 0) throw Error("empty_input", "kappa: no tokens to compare");
  KappaResult r;
  r.tokens = n;
  const auto dn = static_cast<double>(n);
  r.observed = static_cast<double>(same) / dn;
  for (const auto& [label, fa] : freq_a) {
    auto it = freq_b.find(label);
    if (it != freq_b.end()) r.expected += (fa / dn) * (it->second / dn);
  }
  if (r.expected >= 1.0) {
    if (same != n) throw Error("numeric_error", "kappa undefined: chance agreement is 1");
    r.kappa = 1.0;
    return r;
  }
  r.kappa = (r.observed - r.expected) / (1.0 - r.expected);
  return r;
}

double cohens_kappa(const std::vector<LabelId>& a, const std::vector<LabelId>& b,
                    const KappaOptions& options) {
  return cohens_kappa_detail(a, b, options).kappa;
}

KappaResult corpus_kappa(const Corpus& a, const Corpus& b, const KappaOptions& options) {
  check_aligned(a, b);
  std::vector<LabelId> la, lb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto x = a.sentences[i].labels();
    const auto y = b.sentences[i].labels();
    la.insert(la.end(), x.begin(), x.end());
    lb.insert(lb.end(), y.begin(), y.end());
  }
  return cohens_kappa_detail(la, lb, options);
}

namespace {

std::string sentence_key(const Sentence& s, std::size_t position, bool use_meta) {
  if (!use_meta) return "#" + std::to_string(position);
  return *s.doc_id + "/" + std::to_string(*s.sent_index);
}

bool has_meta(const Corpus& c) {
  return !c.empty() && std::all_of(c.sentences.begin(), c.sentences.end(), [](const Sentence& s) {
    return s.doc_id.has_value() && s.sent_index.has_value();
  });
}

}  // namespace

AgreementPartition partition_agreement(const Corpus& a, const Corpus& b) {
  const bool use_meta = has_meta(a) && has_meta(b);
  std::map<std::string, std::size_t> b_index;
  for (std::size_t i = 0; i < b.size(); ++i) {
    b_index.emplace(sentence_key(b.sentences[i], i, use_meta), i);
  }
  std::vector<std::string> missing;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto key = sentence_key(a.sentences[i], i, use_meta);
    auto it = b_index.find(key);
    if (it == b_index.end()) {
      missing.push_back(key);
    } else if (a.sentences[i].words() != b.sentences[it->second].words()) {
      throw Error("alignment_error", "sentence " + key + " has different words in the two corpora");
    }
  }
  if (missing.empty() && a.size() != b.size()) missing.push_back("(extra sentences in second corpus)");
  if (!missing.empty()) {
    std::string list;
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) list += (i ? ", " : "") + missing[i];
    throw Error("alignment_error", "sentence sets differ: " + list);
  }

  AgreementPartition out;
  out.agreed.label_set = a.label_set;
  out.agreed.name = a.name + ".agreed";
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& sb = b.sentences[b_index.at(sentence_key(a.sentences[i], i, use_meta))];
    if (a.sentences[i].labels() == sb.labels()) {
      out.agreed.sentences.push_back(a.sentences[i]);
    } else {
      out.disagreed.push_back({i, a.sentences[i], sb});
    }
  }
  return out;
}

}  // namespace deid
