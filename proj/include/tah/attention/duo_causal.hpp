#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "tah/errors.hpp"
#include "tah/numerics/ops.hpp"
#include "tah/numerics/tensor.hpp"

namespace tah {

/// A (token position, iteration depth) coordinate. Depth counts from 1.
struct AttnCoord {
  std::int64_t position = 0;
  int depth = 1;

  friend bool operator==(const AttnCoord&, const AttnCoord&) = default;
};

/// The duo-causal rule: a key is visible iff it has been materialised, is
/// at an earlier-or-equal position and at a shallower-or-equal depth.
constexpr bool accessible(AttnCoord query, AttnCoord key, bool key_exists) {
  return key_exists && key.position <= query.position && key.depth <= query.depth;
}

/// Dense additive mask: 0 for visible entries, -inf otherwise. Row-major
/// [queries x keys].
struct AdditiveMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  double at(std::size_t q, std::size_t k) const { return values[q * cols + k]; }
  bool allowed(std::size_t q, std::size_t k) const { return values[q * cols + k] == 0.0; }
};

/// Builds the additive mask of `queries` against the materialised keys in
/// `cache_index`. Everything in cache_index is assumed to exist.
inline AdditiveMask build_mask(std::span<const AttnCoord> queries, std::span<const AttnCoord> cache_index) {
  AdditiveMask mask;
  mask.rows = queries.size();
  mask.cols = cache_index.size();
  mask.values.assign(mask.rows * mask.cols, -std::numeric_limits<double>::infinity());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    for (std::size_t k = 0; k < cache_index.size(); ++k) {
      if (accessible(queries[q], cache_index[k], true)) mask.values[q * mask.cols + k] = 0.0;
    }
  }
  return mask;
}

inline AllowedKeys allowed_from_mask(const AdditiveMask& mask) {
  AllowedKeys allowed(mask.rows);
  for (std::size_t q = 0; q < mask.rows; ++q) {
    for (std::size_t k = 0; k < mask.cols; ++k) {
      if (mask.allowed(q, k)) allowed[q].push_back(static_cast<std::uint32_t>(k));
    }
  }
  return allowed;
}

/// Key/value storage for one layer, tagged by (position, depth). Entries
/// live in per-depth slabs (depth 1 first), positions strictly increasing
/// within a slab, so concatenating the slabs gives the depth-major layout
/// the attention kernel consumes.
template <class T>
class LayerCache {
 public:
  struct Slab {
    std::vector<std::int64_t> positions;
    std::vector<T> keys;    // [n x width]
    std::vector<T> values;  // [n x width]
  };

  explicit LayerCache(std::size_t width = 0) : width_(width) {}

  std::size_t width() const { return width_; }
  int max_depth() const { return static_cast<int>(slabs_.size()); }
  const std::vector<Slab>& slabs() const { return slabs_; }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& s : slabs_) n += s.positions.size();
    return n;
  }

  std::size_t count_at_depth(int depth) const {
    if (depth < 1 || depth > max_depth()) return 0;
    return slabs_[static_cast<std::size_t>(depth - 1)].positions.size();
  }

  bool contains(std::int64_t position, int depth) const {
    if (depth < 1 || depth > max_depth()) return false;
    const auto& p = slabs_[static_cast<std::size_t>(depth - 1)].positions;
    return std::binary_search(p.begin(), p.end(), position);
  }

  void append(AttnCoord at, std::span<const T> key, std::span<const T> value) {
    if (key.size() != width_ || value.size() != width_) throw DimensionError("LayerCache: key/value width mismatch");
    if (at.depth < 1) throw CacheError("LayerCache: depth must be >= 1");
    if (at.depth > 1 && !contains(at.position, at.depth - 1)) {
      throw CacheError("LayerCache: entry (" + std::to_string(at.position) + "," + std::to_string(at.depth) +
                       ") appended without its shallower entry");
    }
    while (max_depth() < at.depth) slabs_.emplace_back();
    auto& slab = slabs_[static_cast<std::size_t>(at.depth - 1)];
    if (!slab.positions.empty() && slab.positions.back() >= at.position) {
      throw CacheError("LayerCache: positions must be strictly increasing within a depth");
    }
    slab.positions.push_back(at.position);
    slab.keys.insert(slab.keys.end(), key.begin(), key.end());
    slab.values.insert(slab.values.end(), value.begin(), value.end());
  }

  /// Coordinates of every entry in depth-major order.
  std::vector<AttnCoord> index() const {
    std::vector<AttnCoord> out;
    out.reserve(size());
    for (std::size_t d = 0; d < slabs_.size(); ++d)
      for (auto p : slabs_[d].positions) out.push_back({p, static_cast<int>(d + 1)});
    return out;
  }

  /// Keys (or values) of all depths concatenated along the sequence axis.
  Tensor<T> stacked_keys() const { return stack(true); }
  Tensor<T> stacked_values() const { return stack(false); }

 private:
  Tensor<T> stack(bool keys) const {
    std::vector<T> out;
    out.reserve(size() * width_);
    for (const auto& s : slabs_) {
      const auto& src = keys ? s.keys : s.values;
      out.insert(out.end(), src.begin(), src.end());
    }
    return Tensor<T>({size(), width_}, std::move(out));
  }

  std::size_t width_;
  std::vector<Slab> slabs_;
};

/// Per-layer 2D KV cache owned by one decoding session.
template <class T>
class KVCache2D {
 public:
  KVCache2D() = default;
  KVCache2D(std::size_t num_layers, std::size_t width) : layers_(num_layers, LayerCache<T>(width)) {}

  std::size_t num_layers() const { return layers_.size(); }
  LayerCache<T>& layer(std::size_t l) { return layers_.at(l); }
  const LayerCache<T>& layer(std::size_t l) const { return layers_.at(l); }

  /// Number of depth-1 entries, i.e. how many positions have been fed.
  std::size_t length() const { return layers_.empty() ? 0 : layers_.front().count_at_depth(1); }
  bool contains(std::int64_t position, int depth) const {
    return !layers_.empty() && layers_.front().contains(position, depth);
  }

 private:
  std::vector<LayerCache<T>> layers_;
};

/// Records, for every attended (query, key) pair, how far the key reaches
/// beyond the query. Both maxima stay <= 0 under the duo-causal rule.
struct AccessAudit {
  std::int64_t max_position_overshoot = std::numeric_limits<std::int64_t>::min();
  int max_depth_overshoot = std::numeric_limits<int>::min();
  std::size_t pairs = 0;

  void record(AttnCoord query, AttnCoord key) {
    max_position_overshoot = std::max(max_position_overshoot, key.position - query.position);
    max_depth_overshoot = std::max(max_depth_overshoot, key.depth - query.depth);
    ++pairs;
  }
  bool clean() const { return pairs == 0 || (max_position_overshoot <= 0 && max_depth_overshoot <= 0); }
};

/// Scaled dot-product attention of `queries` ([nq x h]) over the stacked
/// cache keys/values with an additive mask built from the same snapshot.
template <class T>
Tensor<T> attend(const Tensor<T>& queries, const Tensor<T>& keys, const Tensor<T>& values, const AdditiveMask& mask,
                 std::size_t num_heads, AttentionProbs<T>* record = nullptr) {
  if (mask.rows != queries.rows() || mask.cols != keys.rows()) {
    throw DimensionError("attend: mask shape does not match queries/keys");
  }
  return masked_attention(queries, keys, values, allowed_from_mask(mask), num_heads, record);
}

}  // namespace tah
