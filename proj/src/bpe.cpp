#include "deid/bpe.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "deid/error.hpp"
#include "utf8.hpp"

namespace deid {

namespace {

constexpr std::string_view kHeader = "#deid-bpe-vocab v1";

std::uint64_t pair_key(PieceId a, PieceId b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

}  // namespace

Vocab::Vocab() {
  for (const char* special : {"<pad>", "<unk>", "<s>", "</s>"}) add_piece(special);
}

PieceId Vocab::add_piece(const std::string& piece) {
  auto [it, inserted] = index_.emplace(piece, static_cast<PieceId>(pieces_.size()));
  if (inserted) pieces_.push_back(piece);
  return it->second;
}

void Vocab::add_merge(const std::string& left, const std::string& right) {
  const auto l = find(left);
  const auto r = find(right);
  if (!l || !r) {
    throw Error("vocab_error", "merge (" + left + ", " + right + ") references unknown pieces");
  }
  const PieceId merged = add_piece(left + right);
  merge_rank_.emplace(pair_key(*l, *r), std::make_pair(merges_.size(), merged));
  merges_.emplace_back(left, right);
}

std::optional<PieceId> Vocab::find(std::string_view piece) const {
  auto it = index_.find(std::string(piece));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::vector<PieceId> Vocab::encode_word(std::string_view word) const {
  std::vector<PieceId> symbols;
  for (const auto& ch : utf8::characters(word)) symbols.push_back(find(ch).value_or(kUnk));
  for (;;) {
    std::size_t best_rank = SIZE_MAX;
    PieceId best_merged = kUnk;
    PieceId best_left = kUnk, best_right = kUnk;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = merge_rank_.find(pair_key(symbols[i], symbols[i + 1]));
      if (it != merge_rank_.end() && it->second.first < best_rank) {
        best_rank = it->second.first;
        best_merged = it->second.second;
        best_left = symbols[i];
        best_right = symbols[i + 1];
      }
    }
    if (best_rank == SIZE_MAX) break;
    std::vector<PieceId> next;
    next.reserve(symbols.size());
    for (std::size_t i = 0; i < symbols.size(); ++i) {
      if (i + 1 < symbols.size() && symbols[i] == best_left && symbols[i + 1] == best_right) {
        next.push_back(best_merged);
        ++i;
      } else {
        next.push_back(symbols[i]);
      }
    }
    symbols = std::move(next);
  }
  return symbols;
}

std::string Vocab::serialize() const {
  std::ostringstream out;
  out << kHeader << '\n' << "pieces " << pieces_.size() << '\n';
  for (const auto& p : pieces_) out << p << '\n';
  out << "merges " << merges_.size() << '\n';
  for (const auto& [l, r] : merges_) out << l << ' ' << r << '\n';
  return out.str();
}

Vocab Vocab::deserialize(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  auto next_line = [&]() {
    if (!std::getline(in, line)) throw ParseError(line_no + 1, "unexpected end of vocab file");
    ++line_no;
    return line;
  };
  if (next_line() != kHeader) throw ParseError(1, "not a deid BPE vocab (bad header)");
  auto read_count = [&](std::string_view keyword) {
    const std::string l = next_line();
    if (l.rfind(std::string(keyword) + " ", 0) != 0) {
      throw ParseError(line_no, "expected '" + std::string(keyword) + " <count>'");
    }
    return static_cast<std::size_t>(std::stoull(l.substr(keyword.size() + 1)));
  };
  const std::size_t n_pieces = read_count("pieces");
  std::vector<std::string> pieces;
  for (std::size_t i = 0; i < n_pieces; ++i) pieces.push_back(next_line());

  Vocab v;
  for (std::size_t i = 0; i < std::min(n_pieces, kNumSpecials); ++i) {
    if (pieces[i] != v.pieces_[i]) throw ParseError(3 + i, "special piece mismatch");
  }
  const std::size_t n_merges = read_count("merges");
  std::vector<std::pair<std::string, std::string>> merges;
  for (std::size_t i = 0; i < n_merges; ++i) {
    const std::string l = next_line();
    const std::size_t sp = l.find(' ');
    if (sp == std::string::npos) throw ParseError(line_no, "merge line needs two pieces");
    merges.emplace_back(l.substr(0, sp), l.substr(sp + 1));
  }
  // Rebuild: base pieces in file order, then replay merges; pieces created by
  // merges must land on the same ids as in the file.
  std::set<std::string> merged_products;
  for (const auto& [l, r] : merges) merged_products.insert(l + r);
  for (std::size_t i = kNumSpecials; i < pieces.size(); ++i) {
    if (!merged_products.count(pieces[i])) v.add_piece(pieces[i]);
  }
  for (const auto& [l, r] : merges) v.add_merge(l, r);
  if (v.pieces_ != pieces) throw Error("vocab_error", "vocab pieces inconsistent with merges");
  return v;
}

std::size_t bpe_alphabet_size(const std::vector<std::string>& corpus_text) {
  std::set<std::string> chars;
  for (const auto& text : corpus_text) {
    for (const auto& w : tokenize_words(text)) {
      for (auto& c : utf8::characters(w.text)) chars.insert(std::move(c));
    }
  }
  return chars.size();
}

Vocab train_bpe(const std::vector<std::string>& corpus_text, std::size_t vocab_size,
                std::uint64_t /*seed*/) {
  std::map<std::string, std::size_t> word_freq;
  for (const auto& text : corpus_text) {
    for (const auto& w : tokenize_words(text)) ++word_freq[w.text];
  }
  std::set<std::string> alphabet;
  for (const auto& [w, _] : word_freq) {
    for (auto& c : utf8::characters(w)) alphabet.insert(std::move(c));
  }
  if (vocab_size < alphabet.size() + Vocab::kNumSpecials) {
    throw ConfigError("vocab_size " + std::to_string(vocab_size) + " is below alphabet size " +
                      std::to_string(alphabet.size()) + " + " +
                      std::to_string(Vocab::kNumSpecials) + " specials");
  }

  Vocab vocab;
  for (const auto& c : alphabet) vocab.add_piece(c);

  struct WordState {
    std::vector<PieceId> symbols;
    std::size_t freq;
  };
  std::vector<WordState> words;
  words.reserve(word_freq.size());
  for (const auto& [w, f] : word_freq) {
    WordState ws{{}, f};
    for (const auto& c : utf8::characters(w)) ws.symbols.push_back(*vocab.find(c));
    words.push_back(std::move(ws));
  }

  std::unordered_map<std::uint64_t, std::size_t> counts;
  while (vocab.size() < vocab_size) {
    counts.clear();
    for (const auto& ws : words) {
      for (std::size_t i = 0; i + 1 < ws.symbols.size(); ++i) {
        counts[pair_key(ws.symbols[i], ws.symbols[i + 1])] += ws.freq;
      }
    }
    if (counts.empty()) break;
    std::uint64_t best = 0;
    std::size_t best_count = 0;
    for (const auto& [key, count] : counts) {
      if (count < best_count) continue;
      if (count > best_count) {
        best = key;
        best_count = count;
        continue;
      }
      const auto& l = vocab.piece(static_cast<PieceId>(key >> 32));
      const auto& r = vocab.piece(static_cast<PieceId>(key & 0xFFFFFFFFu));
      const auto& bl = vocab.piece(static_cast<PieceId>(best >> 32));
      const auto& br = vocab.piece(static_cast<PieceId>(best & 0xFFFFFFFFu));
      if (std::tie(l, r) < std::tie(bl, br)) best = key;
    }
    const auto left = static_cast<PieceId>(best >> 32);
    const auto right = static_cast<PieceId>(best & 0xFFFFFFFFu);
    vocab.add_merge(vocab.piece(left), vocab.piece(right));
    const PieceId merged = *vocab.find(vocab.piece(left) + vocab.piece(right));
    for (auto& ws : words) {
      std::vector<PieceId> next;
      next.reserve(ws.symbols.size());
      for (std::size_t i = 0; i < ws.symbols.size(); ++i) {
        if (i + 1 < ws.symbols.size() && ws.symbols[i] == left && ws.symbols[i + 1] == right) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(ws.symbols[i]);
        }
      }
      ws.symbols = std::move(next);
    }
  }
  return vocab;
}

EncodedSentence encode(const std::vector<std::string>& words, const Vocab& vocab,
                       std::size_t max_len) {
  EncodedSentence out;
  out.total_words = words.size();
  for (std::size_t w = 0; w < words.size(); ++w) {
    const auto pieces = vocab.encode_word(words[w]);
    if (out.subtoken_ids.size() + pieces.size() > max_len) break;
    for (std::size_t k = 0; k < pieces.size(); ++k) {
      out.subtoken_ids.push_back(pieces[k]);
      out.word_index.push_back(w);
      out.first_piece_mask.push_back(k == 0);
      if (pieces[k] == Vocab::kUnk) ++out.unk_count;
    }
    out.num_words = w + 1;
  }
  return out;
}

EncodedSentence encode(const Sentence& sentence, const Vocab& vocab, std::size_t max_len) {
  return encode(sentence.words(), vocab, max_len);
}

std::vector<std::string> decode(const EncodedSentence& encoded, const Vocab& vocab) {
  std::vector<std::string> words(encoded.num_words);
  for (std::size_t i = 0; i < encoded.size(); ++i) {
    words[encoded.word_index[i]] += vocab.piece(encoded.subtoken_ids[i]);
  }
  return words;
}

std::vector<int> align_labels(const EncodedSentence& encoded, const std::vector<LabelId>& word_labels,
                              int ignore_id) {
  if (word_labels.size() != encoded.num_words) {
    throw ShapeError("align_labels: " + std::to_string(word_labels.size()) +
                     " word labels for " + std::to_string(encoded.num_words) + " encoded words");
  }
  std::vector<int> out(encoded.size(), ignore_id);
  for (std::size_t i = 0; i < encoded.size(); ++i) {
    if (encoded.first_piece_mask[i]) out[i] = word_labels[encoded.word_index[i]];
  }
  return out;
}

std::vector<LabelId> project_to_words(const EncodedSentence& encoded,
                                      const std::vector<int>& subtoken_labels) {
  if (subtoken_labels.size() != encoded.size()) {
    throw ShapeError("project_to_words: label count differs from subtoken count");
  }
  std::vector<LabelId> out(encoded.num_words, kOutside);
  for (std::size_t i = 0; i < encoded.size(); ++i) {
    if (encoded.first_piece_mask[i]) out[encoded.word_index[i]] = subtoken_labels[i];
  }
  return out;
}

double shared_piece_fraction(const std::vector<EncodedSentence>& source,
                             const std::vector<EncodedSentence>& target) {
  std::set<PieceId> seen;
  for (const auto& e : source) seen.insert(e.subtoken_ids.begin(), e.subtoken_ids.end());
  std::size_t total = 0, shared = 0;
  for (const auto& e : target) {
    for (PieceId id : e.subtoken_ids) {
      ++total;
      if (seen.count(id)) ++shared;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(shared) / static_cast<double>(total);
}

}  // namespace deid
