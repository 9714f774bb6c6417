#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tah/errors.hpp"
#include "tah/numerics/random.hpp"

namespace tah {

enum class SampleRule { greedy, temperature, nucleus };

struct SamplerConfig {
  SampleRule rule = SampleRule::greedy;
  double temperature = 0.6;
  double top_p = 0.95;
};

inline std::string to_string(SampleRule r) {
  switch (r) {
    case SampleRule::greedy:
      return "greedy";
    case SampleRule::temperature:
      return "temperature";
    case SampleRule::nucleus:
      return "nucleus";
  }
  return "greedy";
}

inline SampleRule parse_sample_rule(const std::string& s) {
  if (s == "greedy") return SampleRule::greedy;
  if (s == "temperature") return SampleRule::temperature;
  if (s == "nucleus") return SampleRule::nucleus;
  throw ConfigError("unknown sampling rule '" + s + "'");
}

inline void to_json(nlohmann::json& j, const SamplerConfig& c) {
  j = nlohmann::json{{"rule", to_string(c.rule)}, {"temperature", c.temperature}, {"top_p", c.top_p}};
}

inline void from_json(const nlohmann::json& j, SamplerConfig& c) {
  SamplerConfig d;
  c.rule = parse_sample_rule(j.value("rule", to_string(d.rule)));
  c.temperature = j.value("temperature", d.temperature);
  c.top_p = j.value("top_p", d.top_p);
}

/// Index of the largest logit; the lowest index wins ties.
template <class T>
std::int64_t argmax(std::span<const T> logits) {
  if (logits.empty()) throw DimensionError("argmax: empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<std::int64_t>(best);
}

template <class T>
std::int64_t sample(std::span<const T> logits, const SamplerConfig& cfg, Rng& rng) {
  if (logits.empty()) throw DimensionError("sample: empty logits");
  for (T v : logits)
    if (!std::isfinite(static_cast<double>(v))) throw NumericError("sample: non-finite logit");
  if (cfg.rule == SampleRule::greedy) return argmax(logits);
  if (!(cfg.temperature > 0.0)) throw ConfigError("sample: temperature must be > 0");

  const double mx = static_cast<double>(*std::max_element(logits.begin(), logits.end()));
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp((static_cast<double>(logits[i]) - mx) / cfg.temperature);
    z += p[i];
  }
  for (auto& x : p) x /= z;

  if (cfg.rule == SampleRule::nucleus) {
    if (!(cfg.top_p > 0.0 && cfg.top_p <= 1.0)) throw ConfigError("sample: top_p must lie in (0, 1]");
    std::vector<std::size_t> order(p.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    double mass = 0.0;
    std::size_t keep = 0;
    while (keep < order.size() && mass < cfg.top_p) mass += p[order[keep++]];
    std::vector<double> kept(p.size(), 0.0);
    for (std::size_t i = 0; i < keep; ++i) kept[order[i]] = p[order[i]];
    p.swap(kept);
  }
  std::discrete_distribution<std::int64_t> dist(p.begin(), p.end());
  return dist(rng);
}

}  // namespace tah
