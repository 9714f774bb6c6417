#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"
#include "tah/errors.hpp"
#include "tah/numerics/optim.hpp"

namespace tah {

enum class Policy { standard, always_think, oracle, token_plus_latent };

inline std::string to_string(Policy p) {
  switch (p) {
    case Policy::standard:
      return "standard";
    case Policy::always_think:
      return "always_think";
    case Policy::oracle:
      return "oracle";
    case Policy::token_plus_latent:
      return "token_plus_latent";
  }
  return "oracle";
}

inline Policy parse_policy(const std::string& s) {
  if (s == "standard") return Policy::standard;
  if (s == "always_think" || s == "always-think") return Policy::always_think;
  if (s == "oracle" || s == "tah") return Policy::oracle;
  if (s == "token_plus_latent" || s == "token+latent") return Policy::token_plus_latent;
  throw ConfigError("unknown training policy '" + s + "'");
}

inline bool needs_labels(Policy p) { return p == Policy::oracle || p == Policy::token_plus_latent; }

inline void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"weight_decay", c.weight_decay},
                     {"clip_norm", c.clip_norm},
                     {"warmup_frac", c.warmup_frac},
                     {"min_lr_ratio", c.min_lr_ratio}};
}

inline void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  OptimizerConfig d;
  c.lr = j.value("lr", d.lr);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.warmup_frac = j.value("warmup_frac", d.warmup_frac);
  c.min_lr_ratio = j.value("min_lr_ratio", d.min_lr_ratio);
}

struct TrainConfig {
  Policy policy = Policy::oracle;
  OptimizerConfig optim;
  /// Total optimizer steps; 0 means epochs * batches per epoch.
  std::int64_t steps = 0;
  int epochs = 1;
  std::size_t batch_size = 32;
  std::size_t max_len = 128;
  std::uint64_t seed = 0;
  /// Validation cadence in steps; the final step is always validated.
  std::int64_t eval_every = 100;
  /// Resumable-state cadence in steps; 0 disables.
  std::int64_t checkpoint_every = 0;
  double max_class_weight = 100.0;
  std::vector<std::size_t> decider_widths;  // empty: two layers of width h

  void validate() const {
    if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    if (max_len == 0) throw ConfigError("train: max_len must be >= 1");
    if (steps < 0 || epochs < 0 || (steps == 0 && epochs == 0)) throw ConfigError("train: no steps to run");
    if (eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
    if (!(optim.lr > 0.0)) throw ConfigError("train: learning rate must be positive");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"policy", to_string(c.policy)},
                     {"optim", c.optim},
                     {"steps", c.steps},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"max_len", c.max_len},
                     {"seed", c.seed},
                     {"eval_every", c.eval_every},
                     {"checkpoint_every", c.checkpoint_every},
                     {"max_class_weight", c.max_class_weight},
                     {"decider_widths", c.decider_widths}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.policy = parse_policy(j.value("policy", to_string(d.policy)));
  c.optim = j.contains("optim") ? j.at("optim").get<OptimizerConfig>() : d.optim;
  c.steps = j.value("steps", d.steps);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.max_len = j.value("max_len", d.max_len);
  c.seed = j.value("seed", d.seed);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.max_class_weight = j.value("max_class_weight", d.max_class_weight);
  c.decider_widths = j.value("decider_widths", d.decider_widths);
}

struct TrainRecord {
  std::int64_t step = 0;
  std::string split;  // "train" or "validation"
  double loss = 0.0;
  double perplexity = 0.0;
  std::vector<std::size_t> tokens_at_depth;
  nlohmann::json extra = nlohmann::json::object();
};

inline void to_json(nlohmann::json& j, const TrainRecord& r) {
  j = nlohmann::json{{"step", r.step},
                     {"split", r.split},
                     {"loss", r.loss},
                     {"perplexity", r.perplexity},
                     {"tokens_at_depth", r.tokens_at_depth}};
  for (auto it = r.extra.begin(); it != r.extra.end(); ++it) j[it.key()] = it.value();
}

inline void from_json(const nlohmann::json& j, TrainRecord& r) {
  r.step = j.at("step").get<std::int64_t>();
  r.split = j.at("split").get<std::string>();
  r.loss = j.at("loss").get<double>();
  r.perplexity = j.at("perplexity").get<double>();
  r.tokens_at_depth = j.value("tokens_at_depth", std::vector<std::size_t>{});
  r.extra = nlohmann::json::object();
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    if (k != "step" && k != "split" && k != "loss" && k != "perplexity" && k != "tokens_at_depth") r.extra[k] = it.value();
  }
}

struct TrainReport {
  std::vector<TrainRecord> records;
  std::int64_t best_step = -1;
  double best_value = std::numeric_limits<double>::infinity();  // validation perplexity (or loss)
  std::string best_checkpoint;

  std::vector<double> losses(const std::string& split) const {
    std::vector<double> out;
    for (const auto& r : records)
      if (r.split == split) out.push_back(r.loss);
    return out;
  }
  std::vector<double> validation_perplexity() const {
    std::vector<double> out;
    for (const auto& r : records)
      if (r.split == "validation") out.push_back(r.perplexity);
    return out;
  }

  void write_jsonl(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    for (const auto& r : records) f << nlohmann::json(r).dump() << "\n";
  }
};

inline void to_json(nlohmann::json& j, const TrainReport& r) {
  j = nlohmann::json{{"records", r.records},
                     {"best_step", r.best_step},
                     {"best_value", r.best_value},
                     {"best_checkpoint", r.best_checkpoint}};
}

inline void from_json(const nlohmann::json& j, TrainReport& r) {
  r.records = j.at("records").get<std::vector<TrainRecord>>();
  r.best_step = j.at("best_step").get<std::int64_t>();
  r.best_value = j.at("best_value").is_null() ? std::numeric_limits<double>::infinity() : j.at("best_value").get<double>();
  r.best_checkpoint = j.value("best_checkpoint", std::string());
}

}  // namespace tah
