#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tah/backbone/config.hpp"
#include "tah/numerics/optim.hpp"
#include "tah/numerics/random.hpp"
#include "tah/numerics/tensor.hpp"

namespace tah {

/// Low-rank delta for one projection W [in x out]: the depth>1 weight is
/// W + A·B with A [in x r] and B [r x out]. B starts at zero so the
/// adapted forward initially equals the base forward.
template <class T>
struct LoraPair {
  Tensor<T> a;
  Tensor<T> b;
};

template <class T>
struct LayerParams {
  Tensor<T> attn_norm;
  std::array<Tensor<T>, kNumProj> proj;  // indexed by Proj, each [in x out]
  Tensor<T> mlp_norm;
  std::array<std::optional<LoraPair<T>>, kNumProj> lora;

  const Tensor<T>& w(Proj p) const { return proj[static_cast<std::size_t>(p)]; }
  const std::optional<LoraPair<T>>& delta(Proj p) const { return lora[static_cast<std::size_t>(p)]; }
};

/// Shared transformer weights θ plus the depth>1 adapter Δ.
template <class T>
class Backbone {
 public:
  Backbone() = default;

  /// Fresh weights. Base weights and adapters come from separate streams
  /// of `seed`, so the base initialisation does not depend on whether
  /// adapters exist.
  static Backbone init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Backbone m;
    m.cfg_ = cfg;
    const auto h = static_cast<std::size_t>(cfg.hidden_dim);
    const auto v = static_cast<std::size_t>(cfg.vocab_size);
    const auto f = static_cast<std::size_t>(cfg.mlp_dim);
    Rng base(derive_seed(seed, "backbone"));
    auto normal = [&](Shape shape, double stddev) {
      auto t = Tensor<T>::zeros(shape);
      fill_normal<T>(t.mutable_data(), base, stddev);
      return t;
    };
    m.embed_ = normal({v, h}, 1.0 / std::sqrt(static_cast<double>(h)));
    m.layers_.resize(static_cast<std::size_t>(cfg.num_layers));
    for (auto& layer : m.layers_) {
      layer.attn_norm = Tensor<T>::full({h}, T(1));
      layer.mlp_norm = Tensor<T>::full({h}, T(1));
      for (std::size_t p = 0; p < kNumProj; ++p) {
        const auto [in, out] = proj_shape(static_cast<Proj>(p), h, f);
        layer.proj[p] = normal({in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
      }
    }
    m.final_norm_ = Tensor<T>::full({h}, T(1));
    if (!cfg.tie_embeddings) m.lm_head_ = normal({h, v}, 1.0 / std::sqrt(static_cast<double>(h)));

    if (cfg.max_depth > 1 && cfg.lora_rank > 0) {
      Rng adapters(derive_seed(seed, "lora"));
      const auto r = static_cast<std::size_t>(cfg.lora_rank);
      for (auto& layer : m.layers_) {
        for (std::size_t p = 0; p < kNumProj; ++p) {
          if (!cfg.targets(static_cast<Proj>(p))) continue;
          const auto [in, out] = proj_shape(static_cast<Proj>(p), h, f);
          LoraPair<T> pair{Tensor<T>::zeros({in, r}), Tensor<T>::zeros({r, out})};
          fill_normal<T>(pair.a.mutable_data(), adapters, 1.0 / std::sqrt(static_cast<double>(in)));
          layer.lora[p] = pair;
        }
      }
    }
    m.set_trainable(true);
    return m;
  }

  static std::pair<std::size_t, std::size_t> proj_shape(Proj p, std::size_t h, std::size_t f) {
    switch (p) {
      case Proj::gate:
      case Proj::up:
        return {h, f};
      case Proj::down:
        return {f, h};
      default:
        return {h, h};
    }
  }

  const ModelConfig& config() const { return cfg_; }
  const Tensor<T>& embedding() const { return embed_; }
  const std::vector<LayerParams<T>>& layers() const { return layers_; }
  std::vector<LayerParams<T>>& layers() { return layers_; }
  const Tensor<T>& final_norm() const { return final_norm_; }
  /// Output projection W_out [h x v]; absent when tied to the embedding.
  const std::optional<Tensor<T>>& lm_head_weight() const { return lm_head_; }
  bool has_adapters() const {
    for (const auto& l : layers_)
      for (const auto& d : l.lora)
        if (d) return true;
    return false;
  }

  /// θ in a fixed canonical order.
  std::vector<NamedParam<T>> base_params() const {
    std::vector<NamedParam<T>> out;
    out.push_back({"embed", embed_});
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto pre = "layers." + std::to_string(l) + ".";
      out.push_back({pre + "attn_norm", layers_[l].attn_norm});
      for (std::size_t p = 0; p < kNumProj; ++p) out.push_back({pre + std::string(kProjNames[p]), layers_[l].proj[p]});
      out.push_back({pre + "mlp_norm", layers_[l].mlp_norm});
    }
    out.push_back({"final_norm", final_norm_});
    if (lm_head_) out.push_back({"lm_head", *lm_head_});
    return out;
  }

  /// Δ in a fixed canonical order.
  std::vector<NamedParam<T>> adapter_params() const {
    std::vector<NamedParam<T>> out;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      for (std::size_t p = 0; p < kNumProj; ++p) {
        if (!layers_[l].lora[p]) continue;
        const auto pre = "lora.layers." + std::to_string(l) + "." + std::string(kProjNames[p]);
        out.push_back({pre + ".A", layers_[l].lora[p]->a});
        out.push_back({pre + ".B", layers_[l].lora[p]->b});
      }
    }
    return out;
  }

  std::vector<NamedParam<T>> params() const {
    auto out = base_params();
    for (auto& p : adapter_params()) out.push_back(std::move(p));
    return out;
  }

  void set_trainable(bool on) {
    for (auto& p : params()) p.tensor.set_requires_grad(on);
  }
  bool any_trainable() const {
    for (const auto& p : params())
      if (p.tensor.requires_grad()) return true;
    return false;
  }

  /// Deep copy; the copy shares no storage with this model.
  Backbone clone() const {
    Backbone m = *this;
    auto copy = [](Tensor<T>& t) {
      const bool rg = t.requires_grad();
      t = t.detach();
      t.set_requires_grad(rg);
    };
    copy(m.embed_);
    copy(m.final_norm_);
    if (m.lm_head_) copy(*m.lm_head_);
    for (auto& l : m.layers_) {
      copy(l.attn_norm);
      copy(l.mlp_norm);
      for (auto& p : l.proj) copy(p);
      for (auto& d : l.lora) {
        if (!d) continue;
        copy(d->a);
        copy(d->b);
      }
    }
    return m;
  }

  /// Parameter count split as {base, adapters}.
  std::pair<std::size_t, std::size_t> parameter_counts() const {
    std::size_t b = 0, a = 0;
    for (const auto& p : base_params()) b += p.tensor.numel();
    for (const auto& p : adapter_params()) a += p.tensor.numel();
    return {b, a};
  }

 private:
  ModelConfig cfg_;
  Tensor<T> embed_;
  std::vector<LayerParams<T>> layers_;
  Tensor<T> final_norm_;
  std::optional<Tensor<T>> lm_head_;
};

/// FNV-1a over the raw bytes of every parameter, in canonical order.
template <class T>
std::uint64_t params_hash(const std::vector<NamedParam<T>>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params) {
    for (char c : p.name) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.tensor.data().data());
    for (std::size_t i = 0; i < p.tensor.numel() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace tah
