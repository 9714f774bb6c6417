#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "tah/errors.hpp"

namespace tah {

/// Projection matrices a low-rank adapter may target.
enum class Proj : std::size_t { q = 0, k, v, o, gate, up, down };
inline constexpr std::size_t kNumProj = 7;
inline constexpr std::array<std::string_view, kNumProj> kProjNames = {"wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"};

struct ModelConfig {
  int vocab_size = 16;
  int hidden_dim = 32;
  int num_layers = 2;
  int num_heads = 4;
  int head_dim = 8;
  int mlp_dim = 64;
  int max_depth = 2;
  int lora_rank = 4;
  /// Entries: "attention", "mlp", or individual projection names ("wq", ...).
  std::vector<std::string> lora_targets = {"attention", "mlp"};
  int lwe_top_k = 16;
  bool tie_embeddings = true;
  int max_position = 256;
  /// x^(d+1) = LWE(y^(d)) + x^(d) when set; LWE(y^(d)) alone otherwise.
  bool depth_residual = true;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;

  /// Top-k actually used, capped at the vocabulary size.
  std::size_t effective_top_k() const { return static_cast<std::size_t>(std::min(lwe_top_k, vocab_size)); }

  bool targets(Proj p) const {
    const auto name = kProjNames[static_cast<std::size_t>(p)];
    const bool attn = p == Proj::q || p == Proj::k || p == Proj::v || p == Proj::o;
    for (const auto& t : lora_targets) {
      if (t == name || (t == "attention" && attn) || (t == "mlp" && !attn)) return true;
    }
    return false;
  }

  /// 0-based indices of the shallow, middle and final layers whose outputs
  /// feed the iteration decider (layers 1, ceil(L/2), L counted from 1).
  std::array<std::size_t, 3> tap_layers() const {
    const auto L = static_cast<std::size_t>(num_layers);
    return {0, (L + 1) / 2 - 1, L - 1};
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (vocab_size < 2) fail("vocab_size must be >= 2");
    if (hidden_dim < 2 || num_layers < 1 || num_heads < 1 || head_dim < 2 || mlp_dim < 1) fail("non-positive extent");
    if (num_heads * head_dim != hidden_dim) fail("num_heads * head_dim must equal hidden_dim");
    if (head_dim % 2 != 0) fail("head_dim must be even for rotary encoding");
    if (max_depth < 1) fail("max_depth must be >= 1");
    if (lora_rank < 0 || lora_rank > hidden_dim) fail("lora_rank must lie in [0, hidden_dim]");
    if (lwe_top_k < 1) fail("lwe_top_k must be >= 1");
    if (lwe_top_k > vocab_size) fail("lwe_top_k must not exceed vocab_size");
    if (max_position < 1) fail("max_position must be >= 1");
    for (const auto& t : lora_targets) {
      const bool known = t == "attention" || t == "mlp" ||
                         std::find(kProjNames.begin(), kProjNames.end(), t) != kProjNames.end();
      if (!known) fail("unknown lora target '" + t + "'");
    }
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size},   {"hidden_dim", c.hidden_dim},
                     {"num_layers", c.num_layers},   {"num_heads", c.num_heads},
                     {"head_dim", c.head_dim},       {"mlp_dim", c.mlp_dim},
                     {"max_depth", c.max_depth},     {"lora_rank", c.lora_rank},
                     {"lora_targets", c.lora_targets}, {"lwe_top_k", c.lwe_top_k},
                     {"tie_embeddings", c.tie_embeddings}, {"max_position", c.max_position},
                     {"depth_residual", c.depth_residual}, {"rope_base", c.rope_base},
                     {"norm_eps", c.norm_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.hidden_dim = j.value("hidden_dim", d.hidden_dim);
  c.num_layers = j.value("num_layers", d.num_layers);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.head_dim = j.value("head_dim", c.hidden_dim / std::max(c.num_heads, 1));
  c.mlp_dim = j.value("mlp_dim", 2 * c.hidden_dim);
  c.max_depth = j.value("max_depth", d.max_depth);
  c.lora_rank = j.value("lora_rank", d.lora_rank);
  c.lora_targets = j.value("lora_targets", d.lora_targets);
  c.lwe_top_k = j.value("lwe_top_k", std::min(100, c.vocab_size));
  c.tie_embeddings = j.value("tie_embeddings", d.tie_embeddings);
  c.max_position = j.value("max_position", d.max_position);
  c.depth_residual = j.value("depth_residual", d.depth_residual);
  c.rope_base = j.value("rope_base", d.rope_base);
  c.norm_eps = j.value("norm_eps", d.norm_eps);
}

}  // namespace tah
