#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "tah/backbone/forward.hpp"

namespace tah {

struct HeadDepthMass {
  double depth1 = 0.0;  // mean share of attention on depth-1 keys
  double deeper = 0.0;  // mean share on keys at depth >= 2
};

struct LayerDepthMass {
  std::vector<HeadDepthMass> heads;
  double mean = 0.0;    // of depth1 across heads
  double stddev = 0.0;  // population standard deviation across heads
};

/// Per-head share of attention placed on depth-1 keys by the queries at
/// `query_depth`, averaged over those queries.
template <class T>
LayerDepthMass depth_mass_from_record(const AttentionRecord<T>& rec, int query_depth = 2) {
  LayerDepthMass out;
  std::size_t nq = 0;
  for (std::size_t q = 0; q < rec.query_coords.size(); ++q) {
    if (rec.query_coords[q].depth != query_depth) continue;
    const auto& per_head = rec.probs.probs.at(q);
    if (out.heads.empty()) out.heads.resize(per_head.size());
    ++nq;
    for (std::size_t h = 0; h < per_head.size(); ++h) {
      for (std::size_t a = 0; a < rec.allowed[q].size(); ++a) {
        const double p = static_cast<double>(per_head[h][a]);
        if (rec.key_coords[rec.allowed[q][a]].depth == 1) {
          out.heads[h].depth1 += p;
        } else {
          out.heads[h].deeper += p;
        }
      }
    }
  }
  if (nq == 0) return out;
  for (auto& h : out.heads) {
    h.depth1 /= static_cast<double>(nq);
    h.deeper /= static_cast<double>(nq);
    out.mean += h.depth1;
  }
  out.mean /= static_cast<double>(out.heads.size());
  for (const auto& h : out.heads) out.stddev += (h.depth1 - out.mean) * (h.depth1 - out.mean);
  out.stddev = std::sqrt(out.stddev / static_cast<double>(out.heads.size()));
  return out;
}

/// Runs every token of `sequences` to depth 2 and reports, per layer and
/// head, the attention share depth-2 queries give to depth-1 keys.
template <class T>
std::vector<LayerDepthMass> attention_depth_mass(const Backbone<T>& model,
                                                 const std::vector<std::vector<std::int64_t>>& sequences) {
  if (model.config().max_depth < 2) throw ContractError("attention_depth_mass: model has max_depth 1");
  NoGradGuard no_grad;
  auto rows = pack_rows(sequences);
  std::vector<int> depths(rows.size(), 2);
  std::vector<std::vector<AttentionRecord<T>>> records;
  PassOptions<T> opts;
  opts.attention = &records;
  run_passes(model, rows, fixed_depths<T>(depths), opts);
  std::vector<LayerDepthMass> out;
  for (const auto& rec : records.at(1)) out.push_back(depth_mass_from_record(rec, 2));
  return out;
}

}  // namespace tah
