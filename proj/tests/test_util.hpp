#pragma once

#include <unistd.h>

#include <filesystem>
#include <initializer_list>
#include <string>
#include <vector>

#include "deid/corpus.hpp"
#include "deid/rng.hpp"

namespace deid::test {

// Sentence from parallel word/label-name lists.
inline Sentence sentence(std::initializer_list<const char*> words, std::initializer_list<const char*> labels) {
  const LabelSet ls;
  Sentence s;
  auto w = words.begin();
  for (auto l = labels.begin(); l != labels.end(); ++l, ++w) s.tokens.push_back({*w, ls.id(*l)});
  return s;
}

inline std::vector<LabelId> ids(std::initializer_list<const char*> names) {
  const LabelSet ls;
  std::vector<LabelId> out;
  for (const char* n : names) out.push_back(ls.id(n));
  return out;
}

inline Corpus corpus_of(std::vector<Sentence> sentences) {
  Corpus c;
  c.sentences = std::move(sentences);
  return c;
}

// Any label id, not necessarily valid IOB2.
inline std::vector<LabelId> random_labels(Rng& rng, std::size_t n, double o_rate = 0.5) {
  std::vector<LabelId> out(n);
  for (auto& l : out) l = rng.bernoulli(o_rate) ? 0 : static_cast<LabelId>(1 + rng.index(14));
  return out;
}

// Random corpus with awkward but legal tokens (UTF-8, '#', '=' and digits).
inline Corpus random_corpus(Rng& rng, std::size_t max_sentences = 20) {
  static const std::vector<std::string> alphabet{"a", "Z", "ñ", "ç", "7", "#", "=", "-", ".", "é", "x", "Ŀ"};
  Corpus c;
  const std::size_t n = rng.index(max_sentences + 1);
  for (std::size_t i = 0; i < n; ++i) {
    Sentence s;
    const std::size_t len = 1 + rng.index(12);
    for (std::size_t j = 0; j < len; ++j) {
      std::string w;
      const std::size_t wl = 1 + rng.index(6);
      for (std::size_t k = 0; k < wl; ++k) w += alphabet[rng.index(alphabet.size())];
      s.tokens.push_back({w, static_cast<LabelId>(rng.index(15))});
    }
    if (rng.bernoulli(0.3)) {
      s.doc_id = "doc" + std::to_string(rng.index(5));
      s.sent_index = static_cast<std::int64_t>(i);
    }
    c.sentences.push_back(std::move(s));
  }
  return c;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("deid_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace deid::test
