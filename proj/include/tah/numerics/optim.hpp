#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "tah/errors.hpp"
#include "tah/numerics/tensor.hpp"

namespace tah {

struct OptimizerConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables clipping
  double warmup_frac = 0.03;
  double min_lr_ratio = 0.1;
  std::int64_t total_steps = 1000;
};

/// Linear warmup followed by cosine decay to min_lr_ratio * lr.
inline double scheduled_lr(const OptimizerConfig& cfg, std::int64_t step) {
  const auto total = std::max<std::int64_t>(cfg.total_steps, 1);
  const auto warmup = static_cast<std::int64_t>(std::floor(cfg.warmup_frac * static_cast<double>(total)));
  if (step < warmup) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double span = static_cast<double>(std::max<std::int64_t>(total - warmup, 1));
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return cfg.lr * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cosine);
}

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

/// Scales every populated gradient so their joint L2 norm is at most
/// max_norm. Returns the pre-clip norm.
template <class T>
double clip_grad_norm(std::vector<NamedParam<T>>& params, double max_norm) {
  double sq = 0.0;
  for (auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.mutable_grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T f = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (T& g : p.tensor.mutable_grad()) g *= f;
    }
  }
  return norm;
}

/// Adam with decoupled weight decay. Moment buffers exist for exactly the
/// parameters handed to the constructor; parameters without a populated
/// gradient in a step are left untouched.
template <class T>
class AdamW {
 public:
  AdamW(std::vector<NamedParam<T>> params, OptimizerConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), T(0));
      v_.emplace_back(p.tensor.numel(), T(0));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  /// Clips, applies one update at the scheduled rate and returns the
  /// pre-clip gradient norm.
  double step() {
    const double norm = clip_grad_norm(params_, cfg_.clip_norm);
    const double lr = scheduled_lr(cfg_, step_);
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].tensor;
      if (!p.has_grad()) continue;
      auto w = p.mutable_data();
      auto g = p.mutable_grad();
      const bool decay = p.dim() >= 2 && cfg_.weight_decay > 0.0;
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        const double mj = cfg_.beta1 * static_cast<double>(m_[i][j]) + (1.0 - cfg_.beta1) * gj;
        const double vj = cfg_.beta2 * static_cast<double>(v_[i][j]) + (1.0 - cfg_.beta2) * gj * gj;
        m_[i][j] = static_cast<T>(mj);
        v_[i][j] = static_cast<T>(vj);
        double wj = static_cast<double>(w[j]);
        if (decay) wj -= lr * cfg_.weight_decay * wj;
        wj -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg_.eps);
        w[j] = static_cast<T>(wj);
      }
    }
    return norm;
  }

  std::int64_t step_count() const { return step_; }
  double current_lr() const { return scheduled_lr(cfg_, step_); }
  const OptimizerConfig& config() const { return cfg_; }
  const std::vector<NamedParam<T>>& params() const { return params_; }
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }

  void restore(std::int64_t step, std::vector<std::vector<T>> m, std::vector<std::vector<T>> v) {
    if (m.size() != params_.size() || v.size() != params_.size()) {
      throw ContractError("optimizer restore: moment buffers do not match the parameter set");
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (m[i].size() != params_[i].tensor.numel() || v[i].size() != params_[i].tensor.numel()) {
        throw ContractError("optimizer restore: moment size mismatch for " + params_[i].name);
      }
    }
    step_ = step;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  std::vector<NamedParam<T>> params_;
  OptimizerConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  std::int64_t step_ = 0;
};

}  // namespace tah
