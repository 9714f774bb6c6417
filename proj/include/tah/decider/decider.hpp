#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tah/backbone/forward.hpp"
#include "tah/numerics/ops.hpp"
#include "tah/numerics/optim.hpp"
#include "tah/numerics/random.hpp"

namespace tah {

/// MLP over the concatenated tap-layer hidden states: 3h -> hidden... -> 1,
/// SiLU between layers, sigmoid on the output.
template <class T>
class Decider {
 public:
  Decider() = default;

  static Decider init(std::size_t hidden_dim, std::vector<std::size_t> widths, std::uint64_t seed) {
    if (hidden_dim == 0) throw ConfigError("decider: hidden_dim must be positive");
    if (widths.empty()) widths = {hidden_dim, hidden_dim};
    Decider d;
    d.hidden_dim_ = hidden_dim;
    d.widths_ = widths;
    Rng rng(derive_seed(seed, "decider"));
    std::size_t in = 3 * hidden_dim;
    auto dims = widths;
    dims.push_back(1);
    for (auto out : dims) {
      if (out == 0) throw ConfigError("decider: layer widths must be positive");
      auto w = Tensor<T>::zeros({in, out});
      fill_normal<T>(w.mutable_data(), rng, 1.0 / std::sqrt(static_cast<double>(in)));
      d.weights_.push_back(w);
      d.biases_.push_back(Tensor<T>::zeros({out}));
      in = out;
    }
    d.set_trainable(true);
    return d;
  }

  std::size_t hidden_dim() const { return hidden_dim_; }
  std::size_t input_dim() const { return 3 * hidden_dim_; }
  const std::vector<std::size_t>& widths() const { return widths_; }
  bool empty() const { return weights_.empty(); }

  /// Continuation probabilities ĉ for each row of `features` [n x 3h].
  Tensor<T> forward(const Tensor<T>& features) const {
    if (features.dim() != 2 || features.cols() != input_dim()) {
      throw ConfigError("decider: feature width " + std::to_string(features.cols()) + " does not match 3*h = " +
                        std::to_string(input_dim()));
    }
    Tensor<T> x = features;
    for (std::size_t k = 0; k < weights_.size(); ++k) {
      x = add_bias(matmul(x, weights_[k]), biases_[k]);
      if (k + 1 < weights_.size()) x = silu(x);
    }
    return sigmoid(x);
  }

  std::vector<NamedParam<T>> params() const {
    std::vector<NamedParam<T>> out;
    for (std::size_t k = 0; k < weights_.size(); ++k) {
      out.push_back({"decider.layers." + std::to_string(k) + ".w", weights_[k]});
      out.push_back({"decider.layers." + std::to_string(k) + ".b", biases_[k]});
    }
    return out;
  }

  void set_trainable(bool on) {
    for (auto& p : params()) p.tensor.set_requires_grad(on);
  }

  /// Multiply-accumulates for one evaluation.
  std::size_t macs() const {
    std::size_t m = 0;
    for (const auto& w : weights_) m += w.numel();
    return m;
  }

 private:
  std::size_t hidden_dim_ = 0;
  std::vector<std::size_t> widths_;
  std::vector<Tensor<T>> weights_;
  std::vector<Tensor<T>> biases_;
};

/// Feature rows [n x 3h] from the three tap tensors of a pass, taking the
/// given local rows.
template <class T>
Tensor<T> tap_features(const std::vector<Tensor<T>>& taps, std::span<const std::size_t> local_rows) {
  if (taps.size() != 3) throw DimensionError("tap_features: expected three tap tensors");
  const std::size_t h = taps[0].cols();
  std::vector<T> out;
  out.reserve(local_rows.size() * 3 * h);
  for (auto r : local_rows) {
    for (const auto& t : taps) {
      const auto* p = t.vec().data() + r * h;
      out.insert(out.end(), p, p + h);
    }
  }
  if (local_rows.empty()) throw DimensionError("tap_features: no rows selected");
  return Tensor<T>({local_rows.size(), 3 * h}, std::move(out));
}

struct GateDecision {
  double c_hat = 0.0;
  bool cont = false;
  int depth = 1;
};

/// Continue iff ĉ > threshold and depth < max_depth.
constexpr bool gate(double c_hat, double threshold, int depth, int max_depth) {
  return c_hat > threshold && depth < max_depth;
}

template <class T>
GateDecision decide(const Decider<T>& decider, const std::vector<std::span<const T>>& tapped, double threshold,
                    int depth, int max_depth) {
  if (depth < 1) throw ContractError("decide: depth must be >= 1");
  if (tapped.size() != 3) throw ConfigError("decide: expected three tapped hidden states");
  std::vector<T> x;
  for (const auto& t : tapped) {
    if (t.size() != decider.hidden_dim()) throw ConfigError("decide: tapped width does not match the decider");
    x.insert(x.end(), t.begin(), t.end());
  }
  NoGradGuard no_grad;
  const std::size_t width = x.size();
  const double c = static_cast<double>(decider.forward(Tensor<T>({1, width}, std::move(x))).item());
  return {c, gate(c, threshold, depth, max_depth), depth};
}

/// -Σ [ w·c·log ĉ + (1-c)·log(1-ĉ) ] with ĉ clamped to [1e-7, 1-1e-7].
template <class T>
Tensor<T> decider_loss(const Tensor<T>& predictions, std::span<const T> labels, std::span<const T> weights) {
  return weighted_bce_sum(predictions, labels, weights);
}

struct DeciderAccuracy {
  std::size_t true_continue = 0;
  std::size_t true_stop = 0;
  std::size_t overthink = 0;   // predicted continue, label stop
  std::size_t underthink = 0;  // predicted stop, label continue
  double accuracy = 0.0;
  double balanced_accuracy = 0.0;

  std::size_t total() const { return true_continue + true_stop + overthink + underthink; }
};

inline DeciderAccuracy decider_accuracy(std::span<const double> predictions, std::span<const std::uint8_t> labels,
                                        double threshold) {
  if (predictions.empty()) throw ContractError("decider_accuracy: empty evaluation set");
  if (predictions.size() != labels.size()) throw DimensionError("decider_accuracy: length mismatch");
  DeciderAccuracy a;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const bool p = predictions[i] > threshold;
    if (labels[i]) {
      (p ? a.true_continue : a.underthink)++;
    } else {
      (p ? a.overthink : a.true_stop)++;
    }
  }
  const double n = static_cast<double>(predictions.size());
  a.accuracy = static_cast<double>(a.true_continue + a.true_stop) / n;
  const std::size_t pos = a.true_continue + a.underthink, neg = a.true_stop + a.overthink;
  const double tpr = pos ? static_cast<double>(a.true_continue) / static_cast<double>(pos) : 0.0;
  const double tnr = neg ? static_cast<double>(a.true_stop) / static_cast<double>(neg) : 0.0;
  a.balanced_accuracy = pos && neg ? 0.5 * (tpr + tnr) : (pos ? tpr : tnr);
  return a;
}

}  // namespace tah
