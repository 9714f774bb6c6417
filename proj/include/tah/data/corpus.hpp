#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "tah/data/tasks.hpp"
#include "tah/errors.hpp"
#include "tah/numerics/random.hpp"

namespace tah {

/// Character-level vocabulary: token id i is the single character
/// tokens[i].
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::string_view chars) {
    for (char c : chars) add(c);
  }

  void add(char c) {
    if (index_.count(c)) throw ConfigError(std::string("vocabulary: duplicate character '") + c + "'");
    index_[c] = static_cast<std::int64_t>(chars_.size());
    chars_ += c;
  }

  std::size_t size() const { return chars_.size(); }
  const std::string& chars() const { return chars_; }
  bool contains(char c) const { return index_.count(c) != 0; }
  std::int64_t id(char c) const {
    auto it = index_.find(c);
    if (it == index_.end()) throw TokenizationError(std::string("out-of-vocabulary character '") + c + "'");
    return it->second;
  }
  char token(std::int64_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= chars_.size()) {
      throw TokenizationError("token id " + std::to_string(id) + " outside the vocabulary");
    }
    return chars_[static_cast<std::size_t>(id)];
  }

 private:
  std::string chars_;
  std::unordered_map<char, std::int64_t> index_;
};

inline std::vector<std::int64_t> tokenize(std::string_view text, const Vocabulary& vocab) {
  std::vector<std::int64_t> ids;
  ids.reserve(text.size());
  std::string missing;
  for (char c : text) {
    if (!vocab.contains(c)) {
      if (missing.find(c) == std::string::npos) missing += c;
      continue;
    }
    ids.push_back(vocab.id(c));
  }
  if (!missing.empty()) throw TokenizationError("out-of-vocabulary characters: \"" + missing + "\"");
  return ids;
}

inline std::string detokenize(const std::vector<std::int64_t>& ids, const Vocabulary& vocab) {
  std::string s;
  s.reserve(ids.size());
  for (auto id : ids) s += vocab.token(id);
  return s;
}

enum class Split : std::uint8_t { train = 0, validation = 1 };

struct Sequence {
  std::vector<std::int64_t> ids;
  std::string key;  // answer-key flag per token
  std::size_t prompt_len = 0;

  /// Next-token targets: targets[i] = ids[i+1] when that token belongs to
  /// the response, -1 otherwise (prompt tokens and the final position).
  std::vector<std::int64_t> targets() const {
    std::vector<std::int64_t> t(ids.size(), -1);
    for (std::size_t i = 0; i + 1 < ids.size(); ++i)
      if (i + 1 >= prompt_len) t[i] = ids[i + 1];
    return t;
  }
};

struct TokenizedCorpus {
  TaskSpec task;
  Vocabulary vocab;
  std::vector<Sequence> sequences;
  std::vector<Split> split;

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i)
      if (split[i] == s) out.push_back(i);
    return out;
  }
};

/// Number of validation sequences for `count` sequences: round(count *
/// fraction), at least one when the fraction is positive and count >= 2,
/// and never all of them.
inline std::size_t validation_count(std::size_t count, double fraction) {
  if (fraction <= 0.0 || count < 2) return 0;
  auto n = static_cast<std::size_t>(std::llround(static_cast<double>(count) * fraction));
  return std::clamp<std::size_t>(n, 1, count - 1);
}

inline TokenizedCorpus build_corpus(const TaskSpec& task, const std::vector<RawExample>& raw, double val_fraction,
                                    std::uint64_t seed) {
  if (raw.empty()) throw EmptyCorpusError("corpus has no sequences");
  if (val_fraction < 0.0 || val_fraction >= 1.0) throw ConfigError("validation fraction must lie in [0, 1)");
  TokenizedCorpus c;
  c.task = task;
  c.vocab = Vocabulary(task.alphabet());
  for (const auto& r : raw) c.sequences.push_back({tokenize(r.text, c.vocab), r.key, r.prompt_len});
  c.split.assign(raw.size(), Split::train);
  std::vector<std::size_t> perm(raw.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "split"));
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto nv = validation_count(raw.size(), val_fraction);
  for (std::size_t i = 0; i < nv; ++i) c.split[perm[i]] = Split::validation;
  return c;
}

// Corpus file (text, UTF-8):
//   #tah-corpus v1
//   #task <task spec JSON>
//   #vocab <n>
//   <id>\t<escaped character>            (n lines)
//   #sequences <m>
//   <split>\t<space-separated ids>\t<key flags>\t<prompt length>   (m lines)
// Escapes inside vocabulary entries: \n newline, \t tab, \s space, \\ backslash.

inline std::string escape_token(char c) {
  switch (c) {
    case '\n':
      return "\\n";
    case '\t':
      return "\\t";
    case ' ':
      return "\\s";
    case '\\':
      return "\\\\";
    default:
      return std::string(1, c);
  }
}

inline char unescape_token(const std::string& s) {
  if (s.size() == 1 && s[0] != '\\') return s[0];
  if (s == "\\n") return '\n';
  if (s == "\\t") return '\t';
  if (s == "\\s") return ' ';
  if (s == "\\\\") return '\\';
  throw IoError("corpus file: bad vocabulary entry '" + s + "'");
}

inline void write_corpus(const std::filesystem::path& path, const TokenizedCorpus& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << "#tah-corpus v1\n";
  f << "#task " << nlohmann::json(c.task).dump() << "\n";
  f << "#vocab " << c.vocab.size() << "\n";
  for (std::size_t i = 0; i < c.vocab.size(); ++i) f << i << "\t" << escape_token(c.vocab.chars()[i]) << "\n";
  f << "#sequences " << c.sequences.size() << "\n";
  for (std::size_t s = 0; s < c.sequences.size(); ++s) {
    const auto& q = c.sequences[s];
    f << static_cast<int>(c.split[s]) << "\t";
    for (std::size_t i = 0; i < q.ids.size(); ++i) f << (i ? " " : "") << q.ids[i];
    f << "\t" << q.key << "\t" << q.prompt_len << "\n";
  }
  if (!f) throw IoError("write failed for " + path.string());
}

inline TokenizedCorpus read_corpus(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  auto fail = [&](const std::string& m) { return IoError(path.string() + ": " + m); };
  std::string line;
  if (!std::getline(f, line) || line != "#tah-corpus v1") throw fail("not a corpus file");
  TokenizedCorpus c;
  if (!std::getline(f, line) || line.rfind("#task ", 0) != 0) throw fail("missing task header");
  try {
    c.task = nlohmann::json::parse(line.substr(6)).get<TaskSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("bad task header: ") + e.what());
  }
  if (!std::getline(f, line) || line.rfind("#vocab ", 0) != 0) throw fail("missing vocabulary header");
  const auto nv = std::stoul(line.substr(7));
  for (std::size_t i = 0; i < nv; ++i) {
    if (!std::getline(f, line)) throw fail("truncated vocabulary");
    const auto tab = line.find('\t');
    if (tab == std::string::npos || std::stoul(line.substr(0, tab)) != i) throw fail("bad vocabulary line");
    c.vocab.add(unescape_token(line.substr(tab + 1)));
  }
  if (!std::getline(f, line) || line.rfind("#sequences ", 0) != 0) throw fail("missing sequences header");
  const auto ns = std::stoul(line.substr(11));
  for (std::size_t s = 0; s < ns; ++s) {
    if (!std::getline(f, line)) throw fail("truncated sequences");
    std::vector<std::string> parts;
    std::stringstream ss(line);
    std::string part;
    while (std::getline(ss, part, '\t')) parts.push_back(part);
    if (parts.size() != 4) throw fail("bad sequence line " + std::to_string(s));
    Sequence q;
    std::stringstream ids(parts[1]);
    std::int64_t id;
    while (ids >> id) {
      if (id < 0 || static_cast<std::size_t>(id) >= c.vocab.size()) throw fail("token id out of range");
      q.ids.push_back(id);
    }
    q.key = parts[2];
    q.prompt_len = std::stoul(parts[3]);
    if (q.key.size() != q.ids.size()) throw fail("answer key length mismatch on line " + std::to_string(s));
    c.split.push_back(parts[0] == "1" ? Split::validation : Split::train);
    c.sequences.push_back(std::move(q));
  }
  return c;
}

/// A padded batch. mask[b][i] is 1 for real tokens; targets are -1 on
/// padding and unsupervised positions.
struct Batch {
  std::vector<std::size_t> sequence_ids;
  std::vector<std::vector<std::int64_t>> tokens;
  std::vector<std::vector<std::int64_t>> targets;
  std::vector<std::vector<std::uint8_t>> mask;
  std::size_t width = 0;
};

/// Sequences of `pool` no longer than max_len, in the order of a
/// permutation keyed by (seed, epoch), cut into batches of batch_size. A
/// short final batch is filled with fully masked slots.
inline std::vector<Batch> make_batches(const TokenizedCorpus& corpus, const std::vector<std::size_t>& pool,
                                       std::size_t batch_size, std::size_t max_len, std::uint64_t seed,
                                       std::uint64_t epoch) {
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  std::vector<std::size_t> kept;
  for (auto i : pool)
    if (corpus.sequences.at(i).ids.size() <= max_len) kept.push_back(i);
  if (kept.empty()) throw EmptyCorpusError("no sequence fits within max_len " + std::to_string(max_len));
  Rng rng(derive_seed(seed, "batch-order", epoch));
  std::shuffle(kept.begin(), kept.end(), rng);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < kept.size(); start += batch_size) {
    Batch b;
    const std::size_t end = std::min(kept.size(), start + batch_size);
    for (std::size_t k = start; k < end; ++k) b.width = std::max(b.width, corpus.sequences[kept[k]].ids.size());
    for (std::size_t k = start; k < start + batch_size; ++k) {
      if (k < end) {
        const auto& s = corpus.sequences[kept[k]];
        b.sequence_ids.push_back(kept[k]);
        auto toks = s.ids;
        auto tg = s.targets();
        std::vector<std::uint8_t> m(b.width, 0);
        std::fill(m.begin(), m.begin() + static_cast<std::ptrdiff_t>(toks.size()), 1);
        toks.resize(b.width, 0);
        tg.resize(b.width, -1);
        b.tokens.push_back(std::move(toks));
        b.targets.push_back(std::move(tg));
        b.mask.push_back(std::move(m));
      } else {
        b.sequence_ids.push_back(static_cast<std::size_t>(-1));
        b.tokens.emplace_back(b.width, 0);
        b.targets.emplace_back(b.width, -1);
        b.mask.emplace_back(b.width, 0);
      }
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace tah
