#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "tah/analysis/flops.hpp"
#include "tah/backbone/forward.hpp"
#include "tah/backbone/sample.hpp"
#include "tah/data/corpus.hpp"
#include "tah/decider/decider.hpp"
#include "tah/policy/labeling.hpp"

namespace tah {

/// Depth policies for teacher-forced evaluation. oracle_gold iterates a
/// token while its own top-1 at the current depth misses the gold token;
/// oracle_labels follows a label file.
enum class EvalPolicy { standard, always_think, decider, oracle_gold, oracle_labels };

inline std::string to_string(EvalPolicy p) {
  switch (p) {
    case EvalPolicy::standard:
      return "standard";
    case EvalPolicy::always_think:
      return "always_think";
    case EvalPolicy::decider:
      return "tah_decider";
    case EvalPolicy::oracle_gold:
      return "tah_oracle";
    case EvalPolicy::oracle_labels:
      return "oracle_labels";
  }
  return "standard";
}

inline EvalPolicy parse_eval_policy(const std::string& s) {
  if (s == "standard") return EvalPolicy::standard;
  if (s == "always_think" || s == "always-think") return EvalPolicy::always_think;
  if (s == "tah_decider" || s == "tah-decider" || s == "decider") return EvalPolicy::decider;
  if (s == "tah_oracle" || s == "tah-oracle" || s == "oracle") return EvalPolicy::oracle_gold;
  if (s == "oracle_labels" || s == "oracle-labels") return EvalPolicy::oracle_labels;
  throw ConfigError("unknown evaluation policy '" + s + "'");
}

template <class T>
struct EvalOptions {
  EvalPolicy policy = EvalPolicy::standard;
  double threshold = 0.9;
  const Decider<T>* decider = nullptr;
  const IterationLabels* labels = nullptr;
  Split split = Split::validation;
  std::size_t batch_size = 32;
  std::size_t max_len = 128;
};

/// One supervised position under a policy.
struct TokenRecord {
  std::size_t sequence = 0;
  std::size_t index = 0;
  std::int64_t token = 0;  // input token at this position
  std::int64_t gold = 0;
  int depth = 1;
  std::vector<std::int64_t> top1;  // per executed depth
  std::vector<double> c_hat;       // per consulted gate (decider policy)
  char flag = kCompute;            // answer-key flag of the predicted token
  double flops = 0.0;

  bool correct() const { return top1.back() == gold; }
};

struct EvalResult {
  std::string policy;
  int max_depth = 1;
  std::vector<TokenRecord> tokens;
  std::size_t sequences = 0;
  std::size_t sequences_correct = 0;

  double accuracy() const {
    if (tokens.empty()) return 0.0;
    std::size_t c = 0;
    for (const auto& t : tokens) c += t.correct();
    return static_cast<double>(c) / static_cast<double>(tokens.size());
  }
  double mean_iterations() const {
    if (tokens.empty()) return 0.0;
    double s = 0.0;
    for (const auto& t : tokens) s += t.depth;
    return s / static_cast<double>(tokens.size());
  }
  /// Continue decisions over consulted gates (d < max_depth).
  double continue_fraction() const {
    std::size_t cont = 0, gates = 0;
    for (const auto& t : tokens) {
      cont += static_cast<std::size_t>(t.depth - 1);
      gates += static_cast<std::size_t>(std::min(t.depth, max_depth - 1));
    }
    return gates ? static_cast<double>(cont) / static_cast<double>(gates) : 0.0;
  }
  double flops_per_token() const {
    if (tokens.empty()) return 0.0;
    double s = 0.0;
    for (const auto& t : tokens) s += t.flops;
    return s / static_cast<double>(tokens.size());
  }
  double sequence_accuracy() const {
    return sequences ? static_cast<double>(sequences_correct) / static_cast<double>(sequences) : 0.0;
  }
};

inline nlohmann::json summary_json(const EvalResult& r) {
  return {{"policy", r.policy},
          {"tokens", r.tokens.size()},
          {"accuracy", r.accuracy()},
          {"sequence_accuracy", r.sequence_accuracy()},
          {"mean_iterations", r.mean_iterations()},
          {"continue_fraction", r.continue_fraction()},
          {"flops_per_token", r.flops_per_token()}};
}

/// Teacher-forced next-token evaluation over one split. Positions without a
/// supervised target always stop at depth 1.
template <class T>
EvalResult evaluate(const Backbone<T>& model, const TokenizedCorpus& corpus, const EvalOptions<T>& opt) {
  NoGradGuard no_grad;
  const int dmax = model.config().max_depth;
  if (opt.policy == EvalPolicy::always_think && dmax < 2) throw ConfigError("always_think needs max_depth >= 2");
  if (opt.policy == EvalPolicy::decider && !opt.decider) throw DependencyError("decider policy needs a decider checkpoint");
  if (opt.policy == EvalPolicy::oracle_labels && !opt.labels) throw DependencyError("oracle_labels policy needs labels");
  std::optional<LabelIndex> index;
  if (opt.labels) index.emplace(*opt.labels);
  const auto v = static_cast<std::size_t>(model.config().vocab_size);
  FlopsModel fm(model.config(), opt.policy == EvalPolicy::decider ? opt.decider->macs() : 0);

  EvalResult res;
  res.policy = to_string(opt.policy);
  res.max_depth = dmax;
  std::vector<std::size_t> pool;
  for (auto s : corpus.indices(opt.split))
    if (corpus.sequences[s].ids.size() <= opt.max_len) pool.push_back(s);
  if (pool.empty()) throw EmptyCorpusError("evaluation split is empty");

  for (std::size_t start = 0; start < pool.size(); start += opt.batch_size) {
    const std::vector<std::size_t> ids(pool.begin() + static_cast<std::ptrdiff_t>(start),
                                       pool.begin() + static_cast<std::ptrdiff_t>(std::min(pool.size(), start + opt.batch_size)));
    std::vector<TokenRow> rows;
    std::vector<std::int64_t> targets;
    std::vector<std::size_t> row_seq, row_idx;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const auto& s = corpus.sequences[ids[k]];
      const auto tg = s.targets();
      for (std::size_t i = 0; i < s.ids.size(); ++i) {
        rows.push_back({k, static_cast<std::int64_t>(i), s.ids[i]});
        targets.push_back(tg[i]);
        row_seq.push_back(ids[k]);
        row_idx.push_back(i);
      }
    }
    std::vector<std::vector<double>> chat(rows.size());
    ContinueFn<T> keep = [&](const DepthPass<T>& pass) {
      std::vector<std::size_t> next;
      std::vector<std::size_t> sup_local;
      for (std::size_t li = 0; li < pass.rows.size(); ++li)
        if (targets[pass.rows[li]] >= 0) sup_local.push_back(li);
      if (sup_local.empty()) return next;
      std::vector<double> probs;
      if (opt.policy == EvalPolicy::decider) {
        auto p = opt.decider->forward(tap_features(pass.taps, sup_local));
        probs.assign(p.vec().begin(), p.vec().end());
      }
      for (std::size_t k = 0; k < sup_local.size(); ++k) {
        const auto li = sup_local[k];
        const auto r = pass.rows[li];
        bool go = false;
        switch (opt.policy) {
          case EvalPolicy::standard:
            break;
          case EvalPolicy::always_think:
            go = true;
            break;
          case EvalPolicy::decider:
            chat[r].push_back(probs[k]);
            go = gate(probs[k], opt.threshold, pass.depth, dmax);
            break;
          case EvalPolicy::oracle_gold: {
            std::span<const T> l(pass.logits.vec().data() + li * v, v);
            go = argmax(l) != targets[r];
            break;
          }
          case EvalPolicy::oracle_labels:
            go = index->at(row_seq[r], row_idx[r], targets[r]).depth > pass.depth;
            break;
        }
        if (go) next.push_back(r);
      }
      return next;
    };
    auto trace = run_passes(model, rows, keep);
    const auto depth = trace.final_depths();
    std::vector<std::vector<std::int64_t>> top1(rows.size());
    for (const auto& pass : trace.passes) {
      for (std::size_t li = 0; li < pass.rows.size(); ++li) {
        std::span<const T> l(pass.logits.vec().data() + li * v, v);
        top1[pass.rows[li]].push_back(argmax(l));
      }
    }
    std::size_t r0 = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const auto& s = corpus.sequences[ids[k]];
      const std::size_t n = s.ids.size();
      std::vector<int> dseq(depth.begin() + static_cast<std::ptrdiff_t>(r0),
                            depth.begin() + static_cast<std::ptrdiff_t>(r0 + n));
      std::vector<std::uint8_t> gated(n, 0);
      if (opt.policy == EvalPolicy::decider)
        for (std::size_t i = 0; i < n; ++i) gated[i] = targets[r0 + i] >= 0;
      const auto fl = sequence_flops(fm, dseq, gated);
      bool all = true;
      for (std::size_t i = 0; i < n; ++i) {
        const auto r = r0 + i;
        if (targets[r] < 0) continue;
        TokenRecord t;
        t.sequence = ids[k];
        t.index = i;
        t.token = s.ids[i];
        t.gold = targets[r];
        t.depth = depth[r];
        t.top1 = std::move(top1[r]);
        t.c_hat = std::move(chat[r]);
        t.flag = i + 1 < s.key.size() ? s.key[i + 1] : kFormat;
        t.flops = fl[i];
        all = all && t.correct();
        res.tokens.push_back(std::move(t));
      }
      ++res.sequences;
      res.sequences_correct += all;
      r0 += n;
    }
  }
  return res;
}

/// Transitions between the depth-1 and the final-depth prediction.
struct OverthinkReport {
  std::string policy;
  std::size_t kept_correct = 0;
  std::size_t wrong_to_right = 0;
  std::size_t right_to_wrong = 0;
  std::size_t kept_wrong = 0;
  std::size_t iterated = 0;

  std::size_t total() const { return kept_correct + wrong_to_right + right_to_wrong + kept_wrong; }
};

inline OverthinkReport overthink_report(const EvalResult& r) {
  OverthinkReport o;
  o.policy = r.policy;
  for (const auto& t : r.tokens) {
    const bool first = t.top1.front() == t.gold;
    const bool last = t.top1.back() == t.gold;
    o.iterated += t.depth > 1;
    if (first && last) ++o.kept_correct;
    else if (!first && last) ++o.wrong_to_right;
    else if (first && !last) ++o.right_to_wrong;
    else ++o.kept_wrong;
  }
  return o;
}

/// Transitions between a single-pass model's prediction and another
/// model's final prediction on the same tokens.
inline OverthinkReport direct_reply_report(const EvalResult& direct, const EvalResult& iterated) {
  if (direct.tokens.size() != iterated.tokens.size()) throw AlignmentError("direct_reply_report: token count mismatch");
  OverthinkReport o;
  o.policy = iterated.policy;
  for (std::size_t i = 0; i < direct.tokens.size(); ++i) {
    const auto& a = direct.tokens[i];
    const auto& b = iterated.tokens[i];
    if (a.sequence != b.sequence || a.index != b.index) throw AlignmentError("direct_reply_report: token order mismatch");
    const bool first = a.correct();
    const bool last = b.correct();
    o.iterated += b.depth > 1;
    if (first && last) ++o.kept_correct;
    else if (!first && last) ++o.wrong_to_right;
    else if (first && !last) ++o.right_to_wrong;
    else ++o.kept_wrong;
  }
  return o;
}

inline nlohmann::json to_json_value(const OverthinkReport& o) {
  return {{"policy", o.policy},
          {"kept_correct", o.kept_correct},
          {"wrong_to_right", o.wrong_to_right},
          {"right_to_wrong", o.right_to_wrong},
          {"kept_wrong", o.kept_wrong},
          {"iterated", o.iterated}};
}

/// Per token type T (the depth-1 top-1 candidate): how often the token
/// continues, and where continued tokens end up at their final depth.
struct AlternationStats {
  struct Entry {
    std::size_t count = 0;
    std::size_t continued = 0;
    std::map<std::int64_t, std::size_t> final_top1;  // over continued tokens

    double rate() const { return count ? static_cast<double>(continued) / static_cast<double>(count) : 0.0; }
    double transition(std::int64_t to) const {
      auto it = final_top1.find(to);
      return continued && it != final_top1.end() ? static_cast<double>(it->second) / static_cast<double>(continued) : 0.0;
    }
  };
  std::map<std::int64_t, Entry> by_type;
};

inline AlternationStats token_alternation_stats(const EvalResult& r) {
  AlternationStats s;
  for (const auto& t : r.tokens) {
    auto& e = s.by_type[t.top1.front()];
    ++e.count;
    if (t.depth > 1) {
      ++e.continued;
      ++e.final_top1[t.top1.back()];
    }
  }
  return s;
}

inline nlohmann::json to_json_value(const AlternationStats& s, const Vocabulary& vocab) {
  auto out = nlohmann::json::array();
  for (const auto& [tok, e] : s.by_type) {
    nlohmann::json tr = nlohmann::json::object();
    for (const auto& [to, n] : e.final_top1) tr[std::string(1, vocab.token(to))] = e.transition(to);
    out.push_back({{"token", std::string(1, vocab.token(tok))},
                   {"count", e.count},
                   {"continued", e.continued},
                   {"rate", e.rate()},
                   {"final_top1", tr}});
  }
  return out;
}

struct SweepPoint {
  double threshold = 0.0;
  double continue_fraction = 0.0;
  double accuracy = 0.0;
  double mean_iterations = 0.0;
};

/// Decider policy evaluated at each threshold (sorted ascending).
template <class T>
std::vector<SweepPoint> threshold_sweep(const Backbone<T>& model, const TokenizedCorpus& corpus, EvalOptions<T> opt,
                                        std::vector<double> thresholds) {
  std::sort(thresholds.begin(), thresholds.end());
  opt.policy = EvalPolicy::decider;
  std::vector<SweepPoint> out;
  for (double thr : thresholds) {
    opt.threshold = thr;
    auto r = evaluate(model, corpus, opt);
    out.push_back({thr, r.continue_fraction(), r.accuracy(), r.mean_iterations()});
  }
  return out;
}

/// Thresholds lo, lo+step, ... up to hi (inclusive within rounding).
inline std::vector<double> threshold_grid(double lo, double hi, double step) {
  if (!(lo <= hi) || !(step > 0.0)) throw ConfigError("threshold grid: need lo <= hi and step > 0");
  std::vector<double> out;
  const auto n = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9));
  for (std::size_t i = 0; i <= n; ++i) out.push_back(lo + static_cast<double>(i) * step);
  if (hi - out.back() > 1e-9) out.push_back(hi);
  return out;
}

}  // namespace tah
