#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tah/attention/duo_causal.hpp"
#include "tah/backbone/model.hpp"
#include "tah/numerics/ops.hpp"

namespace tah {

/// x·W, plus x·A·B when the adapter is active for this depth.
template <class T>
Tensor<T> project(const LayerParams<T>& layer, Proj p, const Tensor<T>& x, bool adapted) {
  auto y = matmul(x, layer.w(p));
  if (adapted && layer.delta(p)) {
    const auto& d = *layer.delta(p);
    y = add(y, matmul(matmul(x, d.a), d.b));
  }
  return y;
}

/// One pre-norm block: RMSNorm → rotary attention → residual → RMSNorm →
/// SiLU-gated MLP → residual. `attend_fn(q, k, v)` owns key/value storage
/// and masking, which is where the parallel and cached paths differ.
template <class T, class AttendFn>
Tensor<T> block_forward(const Backbone<T>& model, std::size_t l, const Tensor<T>& x,
                        std::span<const std::int64_t> positions, bool adapted, AttendFn&& attend_fn) {
  const auto& cfg = model.config();
  const auto& layer = model.layers()[l];
  const auto eps = static_cast<T>(cfg.norm_eps);
  const auto heads = static_cast<std::size_t>(cfg.num_heads);
  auto a = rms_norm(x, layer.attn_norm, eps);
  auto q = rope(project(layer, Proj::q, a, adapted), positions, heads, cfg.rope_base);
  auto k = rope(project(layer, Proj::k, a, adapted), positions, heads, cfg.rope_base);
  auto v = project(layer, Proj::v, a, adapted);
  auto att = attend_fn(q, k, v);
  auto x1 = add(x, project(layer, Proj::o, att, adapted));
  auto b = rms_norm(x1, layer.mlp_norm, eps);
  auto gated = mul(silu(project(layer, Proj::gate, b, adapted)), project(layer, Proj::up, b, adapted));
  return add(x1, project(layer, Proj::down, gated, adapted));
}

/// logits = W_outᵀ y for each row of y ([n x h] → [n x v]).
template <class T>
Tensor<T> lm_head(const Backbone<T>& model, const Tensor<T>& y) {
  if (y.dim() != 2 || y.cols() != static_cast<std::size_t>(model.config().hidden_dim)) {
    throw DimensionError("lm_head: hidden state width mismatch");
  }
  if (model.lm_head_weight()) return matmul(y, *model.lm_head_weight());
  return matmul(y, transpose(model.embedding()));
}

/// Logit-weighted embedding from precomputed logits: softmax over each
/// row's top-K logits (renormalised, zero elsewhere) times E, plus the
/// previous depth's input when the cross-iteration residual is enabled.
template <class T>
Tensor<T> next_depth_input_from_logits(const Backbone<T>& model, const Tensor<T>& logits, const Tensor<T>& x_prev) {
  const auto& cfg = model.config();
  if (cfg.lwe_top_k < 1) throw ConfigError("next_depth_input: top-k must be >= 1");
  auto mixed = matmul(topk_softmax(logits, cfg.effective_top_k()), model.embedding());
  return cfg.depth_residual ? add(mixed, x_prev) : mixed;
}

template <class T>
Tensor<T> next_depth_input(const Backbone<T>& model, const Tensor<T>& y, const Tensor<T>& x_prev) {
  return next_depth_input_from_logits(model, lm_head(model, y), x_prev);
}

template <class T>
Tensor<T> embed_tokens(const Backbone<T>& model, std::span<const std::int64_t> tokens) {
  std::vector<std::size_t> idx;
  idx.reserve(tokens.size());
  for (auto t : tokens) {
    if (t < 0 || t >= model.config().vocab_size) throw DimensionError("token id out of vocabulary range");
    idx.push_back(static_cast<std::size_t>(t));
  }
  return gather_rows(model.embedding(), idx);
}

// ---------------------------------------------------------------------------
// Depth-major parallel execution (training, prefill, teacher-forced eval).

/// One token of a packed batch. Rows must be sorted by (segment, position).
struct TokenRow {
  std::size_t segment = 0;
  std::int64_t position = 0;
  std::int64_t token = 0;
};

template <class T>
struct DepthPass {
  int depth = 1;
  std::vector<std::size_t> rows;  // packed-row ids active at this depth, ascending
  Tensor<T> input;                // x^(d)
  Tensor<T> hidden;               // y^(d), after the final norm
  Tensor<T> logits;
  std::vector<Tensor<T>> taps;    // outputs of the decider's tap layers

  /// Local index of packed row `row` in this pass, or -1.
  std::ptrdiff_t local(std::size_t row) const {
    auto it = std::lower_bound(rows.begin(), rows.end(), row);
    if (it == rows.end() || *it != row) return -1;
    return it - rows.begin();
  }
};

/// Attention weights captured during a pass, for one (depth, layer).
template <class T>
struct AttentionRecord {
  std::vector<AttnCoord> query_coords;
  std::vector<AttnCoord> key_coords;
  AllowedKeys allowed;
  AttentionProbs<T> probs;
};

template <class T>
struct PassTrace {
  std::vector<TokenRow> rows;
  std::vector<DepthPass<T>> passes;  // passes[d-1] is depth d

  /// Deepest depth executed by each packed row.
  std::vector<int> final_depths() const {
    std::vector<int> out(rows.size(), 0);
    for (const auto& p : passes)
      for (auto r : p.rows) out[r] = p.depth;
    return out;
  }
};

template <class T>
struct PassOptions {
  AccessAudit* audit = nullptr;
  /// When set, filled as [depth-1][layer].
  std::vector<std::vector<AttentionRecord<T>>>* attention = nullptr;
};

/// Chooses, after depth d, which packed rows run depth d+1. Must return a
/// subset of pass.rows.
template <class T>
using ContinueFn = std::function<std::vector<std::size_t>(const DepthPass<T>&)>;

/// Runs depth 1 for every row, then depth 2 for the rows the continue
/// function keeps, and so on up to max_depth. At depth d each query sees
/// keys of its own segment at position <= its own and depth <= d; depths
/// above d are never materialised when depth d runs.
template <class T>
PassTrace<T> run_passes(const Backbone<T>& model, std::vector<TokenRow> rows, const ContinueFn<T>& keep_going,
                        PassOptions<T> opts = {}) {
  const auto& cfg = model.config();
  if (rows.empty()) throw ContractError("run_passes: no rows");
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& a = rows[r - 1];
    const auto& b = rows[r];
    if (b.segment < a.segment || (b.segment == a.segment && b.position <= a.position)) {
      throw ContractError("run_passes: rows must be sorted by (segment, position)");
    }
  }
  for (const auto& r : rows) {
    if (r.position >= cfg.max_position) throw LengthError("run_passes: position exceeds max_position");
  }
  const std::size_t L = model.layers().size();
  const auto heads = static_cast<std::size_t>(cfg.num_heads);
  const auto taps = cfg.tap_layers();

  PassTrace<T> trace;
  trace.rows = std::move(rows);
  const auto& all = trace.rows;

  // Per-layer keys/values, one tensor per executed depth (depth-major).
  std::vector<std::vector<Tensor<T>>> keys(L), values(L);
  // Per executed depth: packed-row ids of its key slab.
  std::vector<std::vector<std::size_t>> slab_rows;

  std::vector<std::size_t> active(all.size());
  for (std::size_t i = 0; i < active.size(); ++i) active[i] = i;
  std::vector<std::int64_t> tokens;
  for (const auto& r : all) tokens.push_back(r.token);
  Tensor<T> x = embed_tokens(model, tokens);

  if (opts.attention) opts.attention->clear();

  for (int d = 1; d <= cfg.max_depth; ++d) {
    slab_rows.push_back(active);
    std::vector<std::int64_t> positions;
    std::vector<AttnCoord> qcoords;
    for (auto r : active) {
      positions.push_back(all[r].position);
      qcoords.push_back({all[r].position, d});
    }

    // Visible keys for each query, indexing the concatenated slabs 1..d.
    AllowedKeys allowed(active.size());
    std::vector<AttnCoord> kcoords;
    {
      std::uint32_t offset = 0;
      for (std::size_t k = 0; k < slab_rows.size(); ++k) {
        const auto& slab = slab_rows[k];
        std::map<std::size_t, std::pair<std::size_t, std::size_t>> seg_range;
        for (std::size_t j = 0; j < slab.size(); ++j) {
          auto [it, fresh] = seg_range.try_emplace(all[slab[j]].segment, j, j + 1);
          if (!fresh) it->second.second = j + 1;
          kcoords.push_back({all[slab[j]].position, static_cast<int>(k + 1)});
        }
        for (std::size_t qi = 0; qi < active.size(); ++qi) {
          const auto& qrow = all[active[qi]];
          auto it = seg_range.find(qrow.segment);
          if (it == seg_range.end()) continue;
          for (std::size_t j = it->second.first; j < it->second.second; ++j) {
            const AttnCoord key{all[slab[j]].position, static_cast<int>(k + 1)};
            if (!accessible(qcoords[qi], key, true)) continue;
            allowed[qi].push_back(offset + static_cast<std::uint32_t>(j));
            if (opts.audit) opts.audit->record(qcoords[qi], key);
          }
        }
        offset += static_cast<std::uint32_t>(slab.size());
      }
    }

    if (opts.attention) opts.attention->emplace_back(L);
    DepthPass<T> pass;
    pass.depth = d;
    pass.rows = active;
    pass.input = x;
    Tensor<T> hcur = x;
    for (std::size_t l = 0; l < L; ++l) {
      hcur = block_forward(model, l, hcur, positions, d > 1, [&](const Tensor<T>& q, const Tensor<T>& k,
                                                                 const Tensor<T>& v) {
        keys[l].push_back(k);
        values[l].push_back(v);
        auto K = keys[l].size() == 1 ? k : concat_rows(keys[l]);
        auto V = values[l].size() == 1 ? v : concat_rows(values[l]);
        AttentionProbs<T>* rec = nullptr;
        if (opts.attention) {
          auto& slot = opts.attention->back()[l];
          slot.query_coords = qcoords;
          slot.key_coords = kcoords;
          slot.allowed = allowed;
          rec = &slot.probs;
        }
        return masked_attention(q, K, V, allowed, heads, rec);
      });
      if (l == taps[0] || l == taps[1] || l == taps[2]) {
        // Tap layers may coincide for shallow models; record each slot.
        for (std::size_t t = 0; t < 3; ++t) {
          if (taps[t] == l) {
            if (pass.taps.size() < 3) pass.taps.resize(3);
            pass.taps[t] = hcur;
          }
        }
      }
    }
    pass.hidden = rms_norm(hcur, model.final_norm(), static_cast<T>(cfg.norm_eps));
    pass.logits = lm_head(model, pass.hidden);
    trace.passes.push_back(pass);

    if (d == cfg.max_depth) break;
    auto next = keep_going(trace.passes.back());
    if (next.empty()) break;
    std::sort(next.begin(), next.end());
    std::vector<std::size_t> local;
    for (auto r : next) {
      auto li = trace.passes.back().local(r);
      if (li < 0) throw ContractError("run_passes: continue set is not a subset of the active rows");
      local.push_back(static_cast<std::size_t>(li));
    }
    const auto& cur = trace.passes.back();
    x = next_depth_input_from_logits(model, gather_rows(cur.logits, local), gather_rows(cur.input, local));
    active = std::move(next);
  }
  return trace;
}

/// Continue function for a fixed per-row depth assignment.
template <class T>
ContinueFn<T> fixed_depths(std::vector<int> depth_of_row) {
  return [depth_of_row = std::move(depth_of_row)](const DepthPass<T>& pass) {
    std::vector<std::size_t> keep;
    for (auto r : pass.rows)
      if (depth_of_row.at(r) > pass.depth) keep.push_back(r);
    return keep;
  };
}

/// Packs token sequences into rows: sequence s becomes segment s.
inline std::vector<TokenRow> pack_rows(const std::vector<std::vector<std::int64_t>>& sequences) {
  std::vector<TokenRow> rows;
  for (std::size_t s = 0; s < sequences.size(); ++s)
    for (std::size_t i = 0; i < sequences[s].size(); ++i)
      rows.push_back({s, static_cast<std::int64_t>(i), sequences[s][i]});
  return rows;
}

// ---------------------------------------------------------------------------
// Incremental execution against a KV cache (decode).

template <class T>
struct DepthInput {
  std::int64_t position = 0;
  int depth = 1;
  std::vector<T> embedding;  // length h
};

template <class T>
struct DepthOutput {
  Tensor<T> input;   // x^(d) rows as fed
  Tensor<T> hidden;  // y^(d)
  Tensor<T> logits;
  std::vector<Tensor<T>> taps;
};

template <class T>
KVCache2D<T> make_cache(const Backbone<T>& model) {
  return KVCache2D<T>(model.layers().size(), static_cast<std::size_t>(model.config().hidden_dim));
}

/// Runs one depth for a batch of positions against `cache`, appending each
/// layer's keys/values tagged (position, depth) before attending. Depth-1
/// batches must extend the cache contiguously; depth d>1 entries require
/// the same position's depth d-1 entry.
template <class T>
DepthOutput<T> forward_depth(const Backbone<T>& model, std::span<const DepthInput<T>> inputs, KVCache2D<T>& cache,
                             int depth, AccessAudit* audit = nullptr,
                             std::vector<AttentionProbs<T>>* attention = nullptr) {
  NoGradGuard no_grad;
  const auto& cfg = model.config();
  const auto h = static_cast<std::size_t>(cfg.hidden_dim);
  if (inputs.empty()) throw ContractError("forward_depth: empty input batch");
  if (depth < 1 || depth > cfg.max_depth) throw ContractError("forward_depth: depth outside [1, max_depth]");
  if (cache.num_layers() != model.layers().size()) throw CacheError("forward_depth: cache layer count mismatch");
  std::vector<std::int64_t> positions;
  std::vector<AttnCoord> qcoords;
  std::vector<T> xs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& in = inputs[i];
    if (in.depth != depth) throw ContractError("forward_depth: mixed depths in one batch");
    if (in.embedding.size() != h) throw DimensionError("forward_depth: embedding width mismatch");
    if (in.position >= cfg.max_position) throw LengthError("forward_depth: position exceeds max_position");
    if (i > 0 && in.position <= inputs[i - 1].position) throw ContractError("forward_depth: positions must increase");
    if (depth == 1) {
      if (in.position != static_cast<std::int64_t>(cache.length() + i)) {
        throw CacheError("forward_depth: depth-1 positions must extend the cache contiguously");
      }
    } else {
      if (!cache.contains(in.position, depth - 1)) {
        throw CacheError("forward_depth: missing shallower entry (" + std::to_string(in.position) + "," +
                         std::to_string(depth - 1) + ")");
      }
      if (cache.contains(in.position, depth)) throw CacheError("forward_depth: entry already materialised");
    }
    positions.push_back(in.position);
    qcoords.push_back({in.position, depth});
    xs.insert(xs.end(), in.embedding.begin(), in.embedding.end());
  }
  const auto heads = static_cast<std::size_t>(cfg.num_heads);
  const auto taps = cfg.tap_layers();
  DepthOutput<T> out;
  out.input = Tensor<T>({inputs.size(), h}, std::move(xs));
  out.taps.resize(3);
  if (attention) attention->assign(model.layers().size(), {});
  Tensor<T> hcur = out.input;
  for (std::size_t l = 0; l < model.layers().size(); ++l) {
    hcur = block_forward(model, l, hcur, positions, depth > 1,
                         [&](const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
                           auto& lc = cache.layer(l);
                           for (std::size_t i = 0; i < qcoords.size(); ++i) {
                             lc.append(qcoords[i], std::span<const T>(k.vec().data() + i * h, h),
                                       std::span<const T>(v.vec().data() + i * h, h));
                           }
                           const auto index = lc.index();
                           const auto mask = build_mask(qcoords, index);
                           if (audit) {
                             for (std::size_t qi = 0; qi < mask.rows; ++qi)
                               for (std::size_t ki = 0; ki < mask.cols; ++ki)
                                 if (mask.allowed(qi, ki)) audit->record(qcoords[qi], index[ki]);
                           }
                           return attend(q, lc.stacked_keys(), lc.stacked_values(), mask, heads,
                                         attention ? &(*attention)[l] : nullptr);
                         });
    for (std::size_t t = 0; t < 3; ++t)
      if (taps[t] == l) out.taps[t] = hcur;
  }
  out.hidden = rms_norm(hcur, model.final_norm(), static_cast<T>(cfg.norm_eps));
  out.logits = lm_head(model, out.hidden);
  return out;
}

}  // namespace tah
