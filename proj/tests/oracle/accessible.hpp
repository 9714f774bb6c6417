#pragma once

// Brute-force accessible-set enumeration from a per-token depth trace.

#include <cstdint>
#include <vector>

#include "tah/attention/duo_causal.hpp"

namespace oracle {

/// Every (position, depth) state computed when token i runs depths[i]
/// passes, in depth-major order.
inline std::vector<tah::AttnCoord> materialised(const std::vector<int>& depths) {
  std::vector<tah::AttnCoord> out;
  int dmax = 0;
  for (int d : depths) dmax = std::max(dmax, d);
  for (int d = 1; d <= dmax; ++d)
    for (std::size_t i = 0; i < depths.size(); ++i)
      if (depths[i] >= d) out.push_back({static_cast<std::int64_t>(i), d});
  return out;
}

/// visible[q][k] for queries and keys both drawn from `states`, decided by
/// the definition: the key is computed, earlier-or-equal in position and
/// shallower-or-equal in depth.
inline std::vector<std::vector<bool>> visibility(const std::vector<int>& depths, const std::vector<tah::AttnCoord>& states) {
  std::vector<std::vector<bool>> vis(states.size(), std::vector<bool>(states.size(), false));
  for (std::size_t q = 0; q < states.size(); ++q) {
    for (std::size_t k = 0; k < states.size(); ++k) {
      const auto key = states[k];
      const bool computed = key.position >= 0 && static_cast<std::size_t>(key.position) < depths.size() &&
                            key.depth >= 1 && depths[static_cast<std::size_t>(key.position)] >= key.depth;
      vis[q][k] = computed && key.position <= states[q].position && key.depth <= states[q].depth;
    }
  }
  return vis;
}

}  // namespace oracle
