#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tah/backbone/forward.hpp"
#include "tah/backbone/sample.hpp"
#include "tah/data/corpus.hpp"
#include "tah/policy/labels.hpp"

namespace tah {

enum class LabelRule { binary, quantile };

struct LabelConfig {
  LabelRule rule = LabelRule::binary;
  int max_depth = 2;
  std::vector<double> quantile_cuts;  // empty: uniform bins
  std::size_t batch_size = 64;
};

inline void to_json(nlohmann::json& j, const LabelConfig& c) {
  j = nlohmann::json{{"rule", c.rule == LabelRule::binary ? "binary" : "quantile"},
                     {"max_depth", c.max_depth},
                     {"quantile_cuts", c.quantile_cuts},
                     {"batch_size", c.batch_size}};
}

inline void from_json(const nlohmann::json& j, LabelConfig& c) {
  LabelConfig d;
  const auto rule = j.value("rule", std::string("binary"));
  if (rule != "binary" && rule != "quantile") throw ConfigError("unknown label rule '" + rule + "'");
  c.rule = rule == "binary" ? LabelRule::binary : LabelRule::quantile;
  c.max_depth = j.value("max_depth", d.max_depth);
  c.quantile_cuts = j.value("quantile_cuts", d.quantile_cuts);
  c.batch_size = j.value("batch_size", d.batch_size);
}

/// Per supervised position of `corpus`, the reference model's top-1 and
/// cross-entropy on the gold next token, turned into oracle depths.
/// Covers both splits; records are ordered by (sequence, index).
template <class T>
IterationLabels label_corpus(const Backbone<T>& reference, const TokenizedCorpus& corpus, const LabelConfig& cfg) {
  if (reference.config().max_depth != 1) throw ContractError("label_corpus: the reference model must be single-pass");
  if (cfg.rule == LabelRule::binary && cfg.max_depth != 2) throw ConfigError("binary labels require max_depth 2");
  if (corpus.sequences.empty()) throw EmptyCorpusError("label_corpus: empty corpus");
  NoGradGuard no_grad;
  IterationLabels out;
  out.max_depth = cfg.max_depth;
  const std::size_t v = static_cast<std::size_t>(reference.config().vocab_size);
  for (std::size_t start = 0; start < corpus.sequences.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(corpus.sequences.size(), start + cfg.batch_size);
    std::vector<std::vector<std::int64_t>> seqs;
    for (std::size_t s = start; s < end; ++s) seqs.push_back(corpus.sequences[s].ids);
    auto rows = pack_rows(seqs);
    const std::size_t n = rows.size();
    auto trace = run_passes(reference, std::move(rows), fixed_depths<T>(std::vector<int>(n, 1)));
    const auto& logits = trace.passes[0].logits;
    std::size_t row = 0;
    for (std::size_t s = start; s < end; ++s) {
      const auto tg = corpus.sequences[s].targets();
      for (std::size_t i = 0; i < tg.size(); ++i, ++row) {
        if (tg[i] < 0) continue;
        std::span<const T> l(logits.vec().data() + row * v, v);
        TokenLabel t;
        t.sequence = s;
        t.index = i;
        t.gold = tg[i];
        t.ref_top1 = argmax(l);
        double mx = static_cast<double>(l[static_cast<std::size_t>(t.ref_top1)]);
        double z = 0.0;
        for (T x : l) z += std::exp(static_cast<double>(x) - mx);
        t.ref_ce = std::log(z) + mx - static_cast<double>(l[static_cast<std::size_t>(t.gold)]);
        out.tokens.push_back(std::move(t));
      }
    }
  }
  if (cfg.rule == LabelRule::binary) {
    for (auto& t : out.tokens) t.depth = oracle_depth_binary(t.ref_top1, t.gold);
  } else {
    std::vector<double> losses;
    for (const auto& t : out.tokens) losses.push_back(t.ref_ce);
    const auto depths = oracle_depth_quantile(losses, cfg.max_depth, cfg.quantile_cuts);
    for (std::size_t k = 0; k < depths.size(); ++k) out.tokens[k].depth = depths[k];
  }
  for (auto& t : out.tokens) t.cont = continuation_labels(t.depth, cfg.max_depth);
  return out;
}

/// Lookup from (sequence, index) to label.
class LabelIndex {
 public:
  LabelIndex() = default;
  explicit LabelIndex(const IterationLabels& labels) : labels_(&labels) {
    for (std::size_t k = 0; k < labels.tokens.size(); ++k)
      index_[{labels.tokens[k].sequence, labels.tokens[k].index}] = k;
  }
  bool bound() const { return labels_ != nullptr; }
  int max_depth() const { return labels_ ? labels_->max_depth : 0; }

  /// Label for a supervised position; AlignmentError when absent or when
  /// the gold token disagrees with the corpus.
  const TokenLabel& at(std::size_t seq, std::size_t index, std::int64_t gold) const {
    if (!labels_) throw ContractError("no label file bound");
    auto it = index_.find({seq, index});
    if (it == index_.end()) {
      throw AlignmentError("no label for sequence " + std::to_string(seq) + " index " + std::to_string(index));
    }
    const auto& t = labels_->tokens[it->second];
    if (t.gold != gold) {
      throw AlignmentError("label gold token disagrees with corpus at sequence " + std::to_string(seq) + " index " +
                           std::to_string(index));
    }
    return t;
  }

 private:
  const IterationLabels* labels_ = nullptr;
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> index_;
};

}  // namespace tah
