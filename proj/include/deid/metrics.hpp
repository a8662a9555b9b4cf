#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"

#include "deid/corpus.hpp"

namespace deid {

// I-X after O or after a different type becomes B-X; nothing else changes.
std::vector<LabelId> repair_bio(std::vector<LabelId> labels);

struct Span {
  std::size_t type = 0;
  std::size_t start = 0;  // word indices, inclusive
  std::size_t end = 0;
  std::size_t sentence = 0;

  bool operator==(const Span&) const = default;
  auto operator<=>(const Span&) const = default;
};

// Maximal B-X (I-X)* runs. Expects repaired input; a stray I-X is treated as
// opening a span.
std::vector<Span> extract_spans(const std::vector<LabelId>& labels, std::size_t sentence = 0);

struct LabelMetrics {
  std::string type;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;

  std::size_t support() const { return tp + fn; }
  std::size_t predicted() const { return tp + fp; }
};

struct MetricsReport {
  LabelMetrics micro;  // type is "micro"
  std::vector<LabelMetrics> per_label;  // types present in gold or pred, LabelSet order

  nlohmann::json to_json() const;
  std::string to_table() const;
};

// Exact (type, start, end) span matching, micro-averaged. Both sides are
// repaired before span extraction. Throws "alignment_error" naming the first
// sentence whose length differs.
MetricsReport evaluate(const Corpus& gold, const Corpus& pred);
std::vector<LabelMetrics> per_label_report(const Corpus& gold, const Corpus& pred);

struct KappaOptions {
  // Drop tokens both annotators labeled O.
  bool exclude_o = false;
};

struct KappaResult {
  double kappa = 0.0;
  double observed = 0.0;  // p_o
  double expected = 0.0;  // p_e
  std::size_t tokens = 0;
};

KappaResult cohens_kappa_detail(const std::vector<LabelId>& a, const std::vector<LabelId>& b,
                                const KappaOptions& options = {});
double cohens_kappa(const std::vector<LabelId>& a, const std::vector<LabelId>& b,
                    const KappaOptions& options = {});
// Pooled over all tokens of the aligned sentences.
KappaResult corpus_kappa(const Corpus& a, const Corpus& b, const KappaOptions& options = {});

struct DisagreedPair {
  std::size_t index = 0;  // position in `a`
  Sentence a;
  Sentence b;
};

struct AgreementPartition {
  Corpus agreed;
  std::vector<DisagreedPair> disagreed;
};

// Sentences are matched by (doc_id, sent_index) when both corpora carry them,
// else by position. A sentence agrees iff every token label matches.
AgreementPartition partition_agreement(const Corpus& a, const Corpus& b);

}  // namespace deid
