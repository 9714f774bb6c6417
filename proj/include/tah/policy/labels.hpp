#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tah/errors.hpp"
#include "tah/numerics/random.hpp"

namespace tah {

/// Oracle supervision for one predicting position: the token at `index`
/// of sequence `sequence` predicts `gold` (the token at index + 1).
struct TokenLabel {
  std::size_t sequence = 0;
  std::size_t index = 0;
  std::int64_t gold = 0;
  std::int64_t ref_top1 = 0;
  double ref_ce = 0.0;
  int depth = 1;
  std::vector<std::uint8_t> cont;  // cont[d-1] = c^(d), d in [1, max_depth-1]
};

struct IterationLabels {
  int max_depth = 2;
  std::vector<TokenLabel> tokens;

  std::vector<int> depths() const {
    std::vector<int> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(t.depth);
    return out;
  }
  double mean_depth() const {
    if (tokens.empty()) return 0.0;
    double s = 0.0;
    for (const auto& t : tokens) s += t.depth;
    return s / static_cast<double>(tokens.size());
  }
};

/// 1 when the reference already predicts the gold token, 2 otherwise.
constexpr int oracle_depth_binary(std::int64_t ref_top1, std::int64_t gold) { return ref_top1 == gold ? 1 : 2; }

/// c^(d) = 1 iff a pass at depth d+1 runs, for d = 1 .. max_depth-1.
inline std::vector<std::uint8_t> continuation_labels(int depth, int max_depth) {
  if (max_depth < 1 || depth < 1 || depth > max_depth) throw ContractError("continuation_labels: depth outside [1, max_depth]");
  std::vector<std::uint8_t> c(static_cast<std::size_t>(max_depth - 1));
  for (int d = 1; d < max_depth; ++d) c[static_cast<std::size_t>(d - 1)] = d < depth ? 1 : 0;
  return c;
}

/// Depth implied by continuation bits: 1 + number of leading ones.
inline int depth_from_bits(std::span<const std::uint8_t> c) {
  int d = 1;
  for (auto b : c) {
    if (!b) break;
    ++d;
  }
  return d;
}

/// Quantile-binned halting depths. The rank of a loss is its empirical CDF
/// over `losses`; with default bins the depth is clamp(floor(rank *
/// max_depth), 1, max_depth). `cuts`, when given, holds max_depth
/// nondecreasing rank thresholds and the raw depth is the number of cuts
/// the rank reaches.
inline std::vector<int> oracle_depth_quantile(std::span<const double> losses, int max_depth,
                                              const std::vector<double>& cuts = {}) {
  if (losses.empty()) throw ContractError("oracle_depth_quantile: empty corpus");
  if (max_depth < 2) throw ContractError("oracle_depth_quantile: max_depth must be >= 2");
  for (double l : losses)
    if (!std::isfinite(l)) throw NumericError("oracle_depth_quantile: non-finite loss");
  if (!cuts.empty()) {
    if (cuts.size() != static_cast<std::size_t>(max_depth)) throw ConfigError("quantile cuts: need max_depth entries");
    if (!std::is_sorted(cuts.begin(), cuts.end())) throw ConfigError("quantile cuts must be nondecreasing");
  }
  std::vector<double> sorted(losses.begin(), losses.end());
  std::sort(sorted.begin(), sorted.end());
  const auto n = static_cast<std::uint64_t>(sorted.size());
  std::vector<int> out;
  out.reserve(losses.size());
  for (double l : losses) {
    const auto le = static_cast<std::uint64_t>(std::upper_bound(sorted.begin(), sorted.end(), l) - sorted.begin());
    std::int64_t raw;
    if (cuts.empty()) {
      raw = static_cast<std::int64_t>(le * static_cast<std::uint64_t>(max_depth) / n);
    } else {
      const double rank = static_cast<double>(le) / static_cast<double>(n);
      raw = std::count_if(cuts.begin(), cuts.end(), [&](double c) { return rank >= c; });
    }
    out.push_back(static_cast<int>(std::clamp<std::int64_t>(raw, 1, max_depth)));
  }
  return out;
}

/// Per-depth counts of consulted decisions (gates d <= min(max_depth-1,
/// depth)) and the continue-term weight #stop / #continue.
struct ClassWeights {
  std::vector<double> weight;
  std::vector<std::size_t> stop;
  std::vector<std::size_t> cont;
  std::vector<bool> degenerate;  // a class is empty at this depth

  bool any_degenerate() const { return std::find(degenerate.begin(), degenerate.end(), true) != degenerate.end(); }
};

inline ClassWeights class_weights(const IterationLabels& labels, double max_weight = 100.0) {
  const auto gates = static_cast<std::size_t>(std::max(labels.max_depth - 1, 0));
  ClassWeights w;
  w.weight.assign(gates, 1.0);
  w.stop.assign(gates, 0);
  w.cont.assign(gates, 0);
  w.degenerate.assign(gates, false);
  for (const auto& t : labels.tokens) {
    for (int d = 1; d <= std::min(labels.max_depth - 1, t.depth); ++d) {
      (d < t.depth ? w.cont : w.stop)[static_cast<std::size_t>(d - 1)]++;
    }
  }
  for (std::size_t g = 0; g < gates; ++g) {
    if (w.cont[g] == 0 || w.stop[g] == 0) {
      w.degenerate[g] = true;
      w.weight[g] = w.cont[g] == 0 ? max_weight : 1.0 / max_weight;
    } else {
      w.weight[g] = std::clamp(static_cast<double>(w.stop[g]) / static_cast<double>(w.cont[g]), 1.0 / max_weight,
                               max_weight);
    }
  }
  return w;
}

struct PerturbResult {
  IterationLabels labels;
  std::size_t decisions = 0;
  std::size_t stop_decisions = 0;
  std::size_t continue_decisions = 0;
  std::size_t overthink_flips = 0;   // stop -> continue
  std::size_t underthink_flips = 0;  // continue -> stop
  double requested_overthink = 0.0;
  double requested_underthink = 0.0;
  double realized_overthink() const { return decisions ? static_cast<double>(overthink_flips) / decisions : 0.0; }
  double realized_underthink() const { return decisions ? static_cast<double>(underthink_flips) / decisions : 0.0; }
};

/// Injects decider-style errors into oracle labels. Each stop decision
/// flips to continue with probability overthink_rate * N / #stop and each
/// continue decision flips to stop with probability underthink_rate * N /
/// #continue, so the expected flip fractions over all N consulted
/// decisions equal the requested rates. The earliest flipped continue
/// gate of a token decides its new depth.
inline PerturbResult perturb_policy(const IterationLabels& labels, double overthink_rate, double underthink_rate,
                                    std::uint64_t seed) {
  if (!(overthink_rate >= 0.0 && overthink_rate <= 1.0 && underthink_rate >= 0.0 && underthink_rate <= 1.0)) {
    throw ContractError("perturb_policy: rates must lie in [0, 1]");
  }
  PerturbResult r;
  r.labels = labels;
  r.requested_overthink = overthink_rate;
  r.requested_underthink = underthink_rate;
  const int dmax = labels.max_depth;
  for (const auto& t : labels.tokens) {
    if (t.depth < dmax) ++r.stop_decisions;
    r.continue_decisions += static_cast<std::size_t>(std::min(t.depth, dmax) - 1);
  }
  r.decisions = r.stop_decisions + r.continue_decisions;
  const double n = static_cast<double>(r.decisions);
  if (overthink_rate * n > static_cast<double>(r.stop_decisions) + 1e-9 ||
      underthink_rate * n > static_cast<double>(r.continue_decisions) + 1e-9) {
    throw ContractError("perturb_policy: requested rate exceeds the available decisions of that class");
  }
  if (r.decisions == 0) return r;
  const double p_over = r.stop_decisions ? overthink_rate * n / static_cast<double>(r.stop_decisions) : 0.0;
  const double p_under = r.continue_decisions ? underthink_rate * n / static_cast<double>(r.continue_decisions) : 0.0;
  Rng rng(derive_seed(seed, "perturb"));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& t : r.labels.tokens) {
    int new_depth = t.depth;
    for (int d = 1; d < t.depth; ++d) {
      if (u(rng) < p_under) {
        ++r.underthink_flips;
        new_depth = d;
        break;
      }
    }
    if (t.depth < dmax) {
      if (u(rng) < p_over) {
        ++r.overthink_flips;
        if (new_depth == t.depth) new_depth = t.depth + 1;
      }
    }
    t.depth = new_depth;
    t.cont = continuation_labels(t.depth, dmax);
  }
  return r;
}

// Label file: one JSON object per line.

inline nlohmann::json label_to_json(const TokenLabel& t) {
  return {{"seq", t.sequence}, {"index", t.index},   {"gold", t.gold},   {"ref_top1", t.ref_top1},
          {"ref_ce", t.ref_ce}, {"depth", t.depth}, {"cont", t.cont}};
}

inline void write_labels(const std::filesystem::path& path, const IterationLabels& labels) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << nlohmann::json{{"max_depth", labels.max_depth}, {"count", labels.tokens.size()}}.dump() << "\n";
  for (const auto& t : labels.tokens) f << label_to_json(t).dump() << "\n";
}

inline IterationLabels read_labels(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path.string());
  IterationLabels out;
  std::string line;
  if (!std::getline(f, line)) throw IoError(path.string() + ": empty label file");
  try {
    const auto head = nlohmann::json::parse(line);
    out.max_depth = head.at("max_depth").get<int>();
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      TokenLabel t;
      t.sequence = j.at("seq").get<std::size_t>();
      t.index = j.at("index").get<std::size_t>();
      t.gold = j.at("gold").get<std::int64_t>();
      t.ref_top1 = j.at("ref_top1").get<std::int64_t>();
      t.ref_ce = j.at("ref_ce").get<double>();
      t.depth = j.at("depth").get<int>();
      t.cont = j.at("cont").get<std::vector<std::uint8_t>>();
      out.tokens.push_back(std::move(t));
    }
    if (out.tokens.size() != head.at("count").get<std::size_t>()) throw IoError(path.string() + ": record count mismatch");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed label record: " + e.what());
  }
  return out;
}

}  // namespace tah
