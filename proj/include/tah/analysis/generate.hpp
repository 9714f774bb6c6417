#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tah/analysis/flops.hpp"
#include "tah/backbone/forward.hpp"
#include "tah/backbone/sample.hpp"
#include "tah/decider/decider.hpp"

namespace tah {

/// oracle continues while the model's top-1 at the current depth differs
/// from a single-pass reference model's top-1 at the same position.
enum class GenPolicy { standard, always_think, decider, oracle };

inline std::string to_string(GenPolicy p) {
  switch (p) {
    case GenPolicy::standard:
      return "standard";
    case GenPolicy::always_think:
      return "always_think";
    case GenPolicy::decider:
      return "decider";
    case GenPolicy::oracle:
      return "oracle";
  }
  return "standard";
}

inline GenPolicy parse_gen_policy(const std::string& s) {
  if (s == "standard") return GenPolicy::standard;
  if (s == "always_think" || s == "always-think") return GenPolicy::always_think;
  if (s == "decider" || s == "tah_decider" || s == "tah-decider") return GenPolicy::decider;
  if (s == "oracle" || s == "tah_oracle" || s == "tah-oracle") return GenPolicy::oracle;
  throw ConfigError("unknown generation policy '" + s + "'");
}

template <class T>
struct GenerateOptions {
  GenPolicy policy = GenPolicy::standard;
  double threshold = 0.9;
  const Decider<T>* decider = nullptr;
  const Backbone<T>* reference = nullptr;
  SamplerConfig sampler;
  std::size_t max_new_tokens = 32;
  std::optional<std::int64_t> stop_token;
  std::uint64_t seed = 0;
};

/// One emitted token; `position` is where the passes producing it ran.
struct GenerationStep {
  std::size_t index = 0;
  std::int64_t position = 0;
  std::int64_t token = 0;
  int depth = 1;
  std::vector<double> c_hat;
  std::vector<std::int64_t> top1;  // greedy candidate at each executed depth
  std::optional<std::int64_t> reference_top1;
  double flops = 0.0;
  double cumulative_flops = 0.0;
  double wall_ms = 0.0;
};

struct GenerationTrace {
  std::string policy;
  std::vector<std::int64_t> prompt;
  std::vector<GenerationStep> steps;
  double prefill_flops = 0.0;

  std::vector<std::int64_t> tokens() const {
    std::vector<std::int64_t> out;
    for (const auto& s : steps) out.push_back(s.token);
    return out;
  }
  double mean_iterations() const {
    if (steps.empty()) return 0.0;
    double d = 0.0;
    for (const auto& s : steps) d += s.depth;
    return d / static_cast<double>(steps.size());
  }
  double total_flops() const { return steps.empty() ? prefill_flops : steps.back().cumulative_flops; }
  double flops_per_token() const {
    if (steps.empty()) return 0.0;
    double f = 0.0;
    for (const auto& s : steps) f += s.flops;
    return f / static_cast<double>(steps.size());
  }
};

inline nlohmann::json step_json(const GenerationStep& s) {
  std::vector<int> depths;
  for (int d = 1; d <= s.depth; ++d) depths.push_back(d);
  nlohmann::json j = {{"index", s.index},   {"token", s.token}, {"depths", depths},
                      {"c_hat", s.c_hat},   {"top1", s.top1},   {"flops", s.flops},
                      {"cumulative_flops", s.cumulative_flops}, {"wall_ms", s.wall_ms}};
  if (s.reference_top1) j["reference_top1"] = *s.reference_top1;
  return j;
}

inline void write_trace(const std::filesystem::path& path, const GenerationTrace& t) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  for (const auto& s : t.steps) f << step_json(s).dump() << "\n";
}

namespace detail {

template <class T>
std::vector<T> embedding_row(const Backbone<T>& m, std::int64_t token) {
  const auto h = static_cast<std::size_t>(m.config().hidden_dim);
  if (token < 0 || token >= m.config().vocab_size) throw ContractError("token id outside the vocabulary");
  const auto* p = m.embedding().vec().data() + static_cast<std::size_t>(token) * h;
  return std::vector<T>(p, p + h);
}

template <class T>
std::span<const T> row_span(const Tensor<T>& t) {
  return std::span<const T>(t.vec().data(), t.cols());
}

}  // namespace detail

/// Autoregressive decode with per-token dynamic depth. Prompt positions
/// before the last run one pass; every emitted token gets its depth from
/// the policy.
template <class T>
GenerationTrace generate(const Backbone<T>& model, const std::vector<std::int64_t>& prompt, const GenerateOptions<T>& opt) {
  const auto& cfg = model.config();
  const int dmax = cfg.max_depth;
  if (prompt.empty()) throw ContractError("generate: empty prompt");
  if (opt.policy == GenPolicy::decider && !opt.decider) throw DependencyError("decider policy needs a decider");
  if (opt.policy == GenPolicy::oracle) {
    if (!opt.reference) throw DependencyError("oracle policy needs a reference model");
    if (opt.reference->config().max_depth != 1 || opt.reference->config().vocab_size != cfg.vocab_size) {
      throw ConfigError("oracle reference must be single-pass with the same vocabulary");
    }
  }
  if (prompt.size() + opt.max_new_tokens > static_cast<std::size_t>(cfg.max_position) + 1) {
    throw LengthError("generate: prompt of " + std::to_string(prompt.size()) + " plus " +
                      std::to_string(opt.max_new_tokens) + " new tokens exceeds max_position " +
                      std::to_string(cfg.max_position));
  }
  FlopsModel fm(cfg, opt.policy == GenPolicy::decider ? opt.decider->macs() : 0);
  Rng rng(derive_seed(opt.seed, "generate"));
  auto cache = make_cache(model);
  std::optional<KVCache2D<T>> ref_cache;
  if (opt.reference) ref_cache = make_cache(*opt.reference);

  GenerationTrace trace;
  trace.policy = to_string(opt.policy);
  trace.prompt = prompt;
  std::vector<int> depths;  // final depth per fed position

  const std::size_t P = prompt.size();
  if (P > 1) {
    std::vector<DepthInput<T>> in;
    for (std::size_t i = 0; i + 1 < P; ++i)
      in.push_back({static_cast<std::int64_t>(i), 1, detail::embedding_row(model, prompt[i])});
    forward_depth<T>(model, in, cache, 1);
    if (ref_cache) {
      std::vector<DepthInput<T>> rin;
      for (std::size_t i = 0; i + 1 < P; ++i)
        rin.push_back({static_cast<std::int64_t>(i), 1, detail::embedding_row(*opt.reference, prompt[i])});
      forward_depth<T>(*opt.reference, rin, *ref_cache, 1);
    }
    depths.assign(P - 1, 1);
    for (double f : sequence_flops(fm, depths)) trace.prefill_flops += f;
  }

  double cumulative = trace.prefill_flops;
  std::int64_t next = prompt.back();
  for (std::size_t k = 0; k < opt.max_new_tokens; ++k) {
    const auto t0 = std::chrono::steady_clock::now();
    GenerationStep step;
    step.index = k;
    step.position = static_cast<std::int64_t>(P - 1 + k);
    std::optional<std::int64_t> ref_top1;
    if (ref_cache) {
      std::vector<DepthInput<T>> rin = {{step.position, 1, detail::embedding_row(*opt.reference, next)}};
      auto ro = forward_depth<T>(*opt.reference, rin, *ref_cache, 1);
      ref_top1 = argmax(detail::row_span(ro.logits));
      step.reference_top1 = ref_top1;
    }
    DepthInput<T> in{step.position, 1, detail::embedding_row(model, next)};
    DepthOutput<T> out;
    int d = 1;
    const auto visible = [&](int depth) {
      std::size_t n = static_cast<std::size_t>(depth);
      for (int dj : depths) n += static_cast<std::size_t>(std::min(dj, depth));
      return n;
    };
    while (true) {
      std::vector<DepthInput<T>> batch = {in};
      out = forward_depth<T>(model, batch, cache, d);
      step.top1.push_back(argmax(detail::row_span(out.logits)));
      step.flops += fm.pass_flops(d, visible(d));
      bool go = false;
      if (d < dmax) {
        switch (opt.policy) {
          case GenPolicy::standard:
            break;
          case GenPolicy::always_think:
            go = true;
            break;
          case GenPolicy::decider: {
            auto g = decide(*opt.decider,
                            {detail::row_span(out.taps[0]), detail::row_span(out.taps[1]), detail::row_span(out.taps[2])},
                            opt.threshold, d, dmax);
            step.c_hat.push_back(g.c_hat);
            step.flops += fm.decider_flops();
            go = g.cont;
            break;
          }
          case GenPolicy::oracle:
            go = step.top1.back() != *ref_top1;
            break;
        }
      }
      if (!go) break;
      NoGradGuard no_grad;
      auto x = next_depth_input_from_logits(model, out.logits, out.input);
      step.flops += fm.lwe_flops();
      in = {step.position, d + 1, x.vec()};
      ++d;
    }
    step.depth = d;
    depths.push_back(d);
    step.token = sample(detail::row_span(out.logits), opt.sampler, rng);
    cumulative += step.flops;
    step.cumulative_flops = cumulative;
    step.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    next = step.token;
    trace.steps.push_back(std::move(step));
    if (opt.stop_token && next == *opt.stop_token) break;
  }
  return trace;
}

}  // namespace tah
