#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "tah/backbone/config.hpp"
#include "tah/backbone/model.hpp"
#include "tah/errors.hpp"

namespace tah {

/// Analytic FLOP counts for one token pass. Weight matmuls cost 2 FLOPs
/// per multiply-accumulate; attention costs 2*h per visible key for the
/// scores plus 2*h for the value mix, per layer; embedding lookups are free.
struct FlopsModel {
  ModelConfig cfg;
  std::size_t decider_macs = 0;

  explicit FlopsModel(ModelConfig c, std::size_t decider_mac_count = 0) : cfg(std::move(c)), decider_macs(decider_mac_count) {}

  double base_weight_flops() const {
    const double h = cfg.hidden_dim, f = cfg.mlp_dim, v = cfg.vocab_size;
    const double per_layer = 4.0 * h * h + 3.0 * h * f;
    return 2.0 * (static_cast<double>(cfg.num_layers) * per_layer + h * v);
  }

  double adapter_flops() const {
    if (cfg.max_depth < 2 || cfg.lora_rank < 1) return 0.0;
    const auto h = static_cast<std::size_t>(cfg.hidden_dim), f = static_cast<std::size_t>(cfg.mlp_dim);
    double per_layer = 0.0;
    for (std::size_t p = 0; p < kNumProj; ++p) {
      if (!cfg.targets(static_cast<Proj>(p))) continue;
      const auto [in, out] = Backbone<float>::proj_shape(static_cast<Proj>(p), h, f);
      per_layer += 2.0 * cfg.lora_rank * static_cast<double>(in + out);
    }
    return static_cast<double>(cfg.num_layers) * per_layer;
  }

  double attention_flops(std::size_t visible_keys) const {
    return 4.0 * cfg.hidden_dim * static_cast<double>(visible_keys) * cfg.num_layers;
  }

  /// Building the next depth's input from the top-k candidates.
  double lwe_flops() const { return 2.0 * static_cast<double>(cfg.effective_top_k()) * cfg.hidden_dim; }

  double decider_flops() const { return 2.0 * static_cast<double>(decider_macs); }

  /// One pass of one token at `depth` attending to `visible_keys` keys.
  double pass_flops(int depth, std::size_t visible_keys) const {
    return base_weight_flops() + (depth > 1 ? adapter_flops() : 0.0) + attention_flops(visible_keys);
  }
};

/// Keys visible to (position i, depth d) within one sequence whose
/// positions have the given final depths: every (j, k) with j < i and
/// k <= min(depth_j, d), plus (i, 1..d).
inline std::size_t visible_keys(std::span<const int> depths, std::size_t i, int d) {
  std::size_t n = static_cast<std::size_t>(d);
  for (std::size_t j = 0; j < i; ++j) n += static_cast<std::size_t>(std::min(depths[j], d));
  return n;
}

/// FLOPs for every position of one sequence executed to `depths`.
/// `gated[i]` marks positions whose continue decision consulted the
/// decider.
inline std::vector<double> sequence_flops(const FlopsModel& fm, std::span<const int> depths,
                                          std::span<const std::uint8_t> gated = {}) {
  if (!gated.empty() && gated.size() != depths.size()) throw DimensionError("sequence_flops: gate mask length");
  std::vector<double> out(depths.size(), 0.0);
  for (std::size_t i = 0; i < depths.size(); ++i) {
    const int D = depths[i];
    if (D < 1 || D > fm.cfg.max_depth) throw ContractError("sequence_flops: depth outside [1, max_depth]");
    for (int d = 1; d <= D; ++d) {
      out[i] += fm.pass_flops(d, visible_keys(depths, i, d));
      if (d < D) out[i] += fm.lwe_flops();
      if (!gated.empty() && gated[i] && d < fm.cfg.max_depth) out[i] += fm.decider_flops();
    }
  }
  return out;
}

}  // namespace tah
