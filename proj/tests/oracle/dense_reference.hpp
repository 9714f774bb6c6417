#pragma once

// Loop-level reference transformer used only by tests. It shares no code
// with the library forward pass: every matrix product, normalisation,
// rotary rotation and attention is an explicit scalar loop in double
// precision, and visibility is decided by enumerating every materialised
// (position, depth) state.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <utility>
#include <vector>

#include "tah/backbone/model.hpp"

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major [rows][cols]

template <class T>
Mat to_mat(const tah::Tensor<T>& t) {
  const std::size_t r = t.rows(), c = t.cols();
  Mat m(r, Vec(c));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) m[i][j] = static_cast<double>(t.vec()[i * c + j]);
  return m;
}

template <class T>
Vec to_vec(const tah::Tensor<T>& t) {
  Vec v(t.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(t.vec()[i]);
  return v;
}

/// x [in] times W [in x out].
inline Vec vecmat(const Vec& x, const Mat& w) {
  Vec y(w.empty() ? 0 : w[0].size(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < y.size(); ++j) y[j] += x[i] * w[i][j];
  return y;
}

inline Vec rmsnorm(const Vec& x, const Vec& g, double eps) {
  double ss = 0.0;
  for (double v : x) ss += v * v;
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + eps);
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * inv * g[i];
  return y;
}

inline Vec rotate(const Vec& x, std::int64_t pos, std::size_t heads, double base) {
  const std::size_t hd = x.size() / heads, half = hd / 2;
  Vec y = x;
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t k = 0; k < half; ++k) {
      const double ang = static_cast<double>(pos) * std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(hd));
      const double a = x[h * hd + k], b = x[h * hd + k + half];
      y[h * hd + k] = a * std::cos(ang) - b * std::sin(ang);
      y[h * hd + k + half] = b * std::cos(ang) + a * std::sin(ang);
    }
  }
  return y;
}

struct State {
  Vec input;
  Vec hidden;
  Vec logits;
  std::vector<Vec> layer_out;  // output of every block
};

/// Reference model. `depths[i]` is how many passes position i receives.
/// Returns states[(i, d)] for every materialised state.
class DenseReference {
 public:
  template <class T>
  explicit DenseReference(const tah::Backbone<T>& m) : cfg_(m.config()) {
    E_ = to_mat(m.embedding());
    final_norm_ = to_vec(m.final_norm());
    if (m.lm_head_weight()) {
      W_out_ = to_mat(*m.lm_head_weight());
    } else {
      W_out_.assign(E_[0].size(), Vec(E_.size()));
      for (std::size_t t = 0; t < E_.size(); ++t)
        for (std::size_t j = 0; j < E_[0].size(); ++j) W_out_[j][t] = E_[t][j];
    }
    for (const auto& l : m.layers()) {
      Layer L;
      L.attn_norm = to_vec(l.attn_norm);
      L.mlp_norm = to_vec(l.mlp_norm);
      for (std::size_t p = 0; p < tah::kNumProj; ++p) {
        L.w[p] = to_mat(l.proj[p]);
        L.w_adapted[p] = L.w[p];
        if (l.lora[p]) {
          const auto A = to_mat(l.lora[p]->a);
          const auto B = to_mat(l.lora[p]->b);
          for (std::size_t i = 0; i < A.size(); ++i)
            for (std::size_t j = 0; j < B[0].size(); ++j)
              for (std::size_t r = 0; r < B.size(); ++r) L.w_adapted[p][i][j] += A[i][r] * B[r][j];
        }
      }
      layers_.push_back(std::move(L));
    }
  }

  std::map<std::pair<std::int64_t, int>, State> run(const std::vector<std::int64_t>& tokens,
                                                    const std::vector<int>& depths) const {
    const std::size_t n = tokens.size();
    const std::size_t heads = static_cast<std::size_t>(cfg_.num_heads);
    const double eps = cfg_.norm_eps;
    std::map<std::pair<std::int64_t, int>, State> states;
    // keys/values per layer per materialised state
    std::vector<std::map<std::pair<std::int64_t, int>, std::pair<Vec, Vec>>> kv(layers_.size());
    const int dmax = *std::max_element(depths.begin(), depths.end());
    for (int d = 1; d <= dmax; ++d) {
      std::vector<std::size_t> active;
      for (std::size_t i = 0; i < n; ++i)
        if (depths[i] >= d) active.push_back(i);
      std::map<std::size_t, Vec> x;
      for (auto i : active) {
        if (d == 1) {
          x[i] = E_[static_cast<std::size_t>(tokens[i])];
        } else {
          const auto& prev = states.at({static_cast<std::int64_t>(i), d - 1});
          x[i] = lwe(prev.logits);
          if (cfg_.depth_residual)
            for (std::size_t j = 0; j < x[i].size(); ++j) x[i][j] += prev.input[j];
        }
        states[{static_cast<std::int64_t>(i), d}].input = x[i];
      }
      const bool adapted = d > 1;
      for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& L = layers_[l];
        const auto& W = adapted ? L.w_adapted : L.w;
        std::map<std::size_t, Vec> q;
        for (auto i : active) {
          const auto a = rmsnorm(x[i], L.attn_norm, eps);
          const auto pos = static_cast<std::int64_t>(i);
          q[i] = rotate(vecmat(a, W[0]), pos, heads, cfg_.rope_base);
          kv[l][{pos, d}] = {rotate(vecmat(a, W[1]), pos, heads, cfg_.rope_base), vecmat(a, W[2])};
        }
        for (auto i : active) {
          const auto pos = static_cast<std::int64_t>(i);
          // Brute-force visibility over every materialised state.
          std::vector<const std::pair<Vec, Vec>*> vis;
          for (const auto& [coord, entry] : kv[l])
            if (coord.first <= pos && coord.second <= d) vis.push_back(&entry);
          const std::size_t h = x[i].size(), hd = h / heads;
          Vec att(h, 0.0);
          for (std::size_t hh = 0; hh < heads; ++hh) {
            std::vector<double> s(vis.size());
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t a = 0; a < vis.size(); ++a) {
              double dot = 0.0;
              for (std::size_t c = 0; c < hd; ++c) dot += q[i][hh * hd + c] * vis[a]->first[hh * hd + c];
              s[a] = dot / std::sqrt(static_cast<double>(hd));
              mx = std::max(mx, s[a]);
            }
            double z = 0.0;
            for (auto& v : s) z += (v = std::exp(v - mx));
            for (std::size_t a = 0; a < vis.size(); ++a)
              for (std::size_t c = 0; c < hd; ++c) att[hh * hd + c] += s[a] / z * vis[a]->second[hh * hd + c];
          }
          auto o = vecmat(att, W[3]);
          Vec x1(h);
          for (std::size_t j = 0; j < h; ++j) x1[j] = x[i][j] + o[j];
          const auto b = rmsnorm(x1, L.mlp_norm, eps);
          auto g = vecmat(b, W[4]);
          const auto u = vecmat(b, W[5]);
          for (std::size_t j = 0; j < g.size(); ++j) g[j] = g[j] / (1.0 + std::exp(-g[j])) * u[j];
          const auto dn = vecmat(g, W[6]);
          for (std::size_t j = 0; j < h; ++j) x1[j] += dn[j];
          x[i] = x1;
          states[{pos, d}].layer_out.push_back(x1);
        }
      }
      for (auto i : active) {
        auto& st = states[{static_cast<std::int64_t>(i), d}];
        st.hidden = rmsnorm(x[i], final_norm_, eps);
        st.logits = vecmat(st.hidden, W_out_);
      }
    }
    return states;
  }

  /// Top-K renormalised softmax of `logits` times E, by explicit sorting.
  Vec lwe(const Vec& logits) const {
    const std::size_t K = std::min<std::size_t>(static_cast<std::size_t>(cfg_.lwe_top_k), logits.size());
    std::vector<std::size_t> idx(logits.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
    double mx = logits[idx[0]], z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(logits[idx[k]] - mx);
    Vec out(E_[0].size(), 0.0);
    for (std::size_t k = 0; k < K; ++k) {
      const double p = std::exp(logits[idx[k]] - mx) / z;
      for (std::size_t j = 0; j < out.size(); ++j) out[j] += p * E_[idx[k]][j];
    }
    return out;
  }

 private:
  struct Layer {
    Vec attn_norm, mlp_norm;
    std::array<Mat, tah::kNumProj> w, w_adapted;
  };
  tah::ModelConfig cfg_;
  Mat E_, W_out_;
  Vec final_norm_;
  std::vector<Layer> layers_;
};

}  // namespace oracle
