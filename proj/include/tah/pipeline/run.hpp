#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tah/analysis/evaluate.hpp"
#include "tah/analysis/flops.hpp"
#include "tah/analysis/generate.hpp"
#include "tah/analysis/sensitivity.hpp"
#include "tah/attention/depth_mass.hpp"
#include "tah/data/corpus.hpp"
#include "tah/data/tasks.hpp"
#include "tah/io/checkpoint.hpp"
#include "tah/policy/labeling.hpp"
#include "tah/policy/labels.hpp"
#include "tah/training/config.hpp"
#include "tah/training/decider_trainer.hpp"
#include "tah/training/trainer.hpp"

namespace tah {

namespace fs = std::filesystem;

struct EvalSettings {
  double threshold = 0.9;
  std::size_t batch_size = 64;
  std::size_t max_len = 128;
  double sweep_lo = 0.5;
  double sweep_hi = 0.99;
  double sweep_step = 0.01;
  std::vector<std::uint64_t> noise_seeds = {1, 2, 3};
  std::size_t depth_mass_sequences = 16;
};

inline void to_json(nlohmann::json& j, const EvalSettings& e) {
  j = nlohmann::json{{"threshold", e.threshold},   {"batch_size", e.batch_size},
                     {"max_len", e.max_len},       {"sweep_lo", e.sweep_lo},
                     {"sweep_hi", e.sweep_hi},     {"sweep_step", e.sweep_step},
                     {"noise_seeds", e.noise_seeds}, {"depth_mass_sequences", e.depth_mass_sequences}};
}

inline void from_json(const nlohmann::json& j, EvalSettings& e) {
  EvalSettings d;
  e.threshold = j.value("threshold", d.threshold);
  e.batch_size = j.value("batch_size", d.batch_size);
  e.max_len = j.value("max_len", d.max_len);
  e.sweep_lo = j.value("sweep_lo", d.sweep_lo);
  e.sweep_hi = j.value("sweep_hi", d.sweep_hi);
  e.sweep_step = j.value("sweep_step", d.sweep_step);
  e.noise_seeds = j.value("noise_seeds", d.noise_seeds);
  e.depth_mass_sequences = j.value("depth_mass_sequences", d.depth_mass_sequences);
}

struct GenerateSettings {
  SamplerConfig sampler;
  std::size_t max_new_tokens = 32;
  /// Validation prompts decoded by `analyze`.
  std::size_t prompts = 16;
};

inline void to_json(nlohmann::json& j, const GenerateSettings& g) {
  j = nlohmann::json{{"sampler", g.sampler}, {"max_new_tokens", g.max_new_tokens}, {"prompts", g.prompts}};
}

inline void from_json(const nlohmann::json& j, GenerateSettings& g) {
  GenerateSettings d;
  g.sampler = j.contains("sampler") ? j.at("sampler").get<SamplerConfig>() : d.sampler;
  g.max_new_tokens = j.value("max_new_tokens", d.max_new_tokens);
  g.prompts = j.value("prompts", d.prompts);
}

/// Everything a run depends on. Stage seeds always equal `seed`.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string precision = "float32";
  TaskSpec task;
  std::size_t count = 4000;
  double validation_fraction = 0.1;
  ModelConfig model;
  TrainConfig reference;
  TrainConfig backbone;
  TrainConfig decider;
  LabelConfig labels;
  EvalSettings eval;
  GenerateSettings generate;

  RunConfig() {
    model.hidden_dim = 32;
    model.num_layers = 2;
    model.num_heads = 4;
    model.head_dim = 8;
    model.mlp_dim = 64;
    model.max_depth = 2;
    model.lora_rank = 4;
    model.lwe_top_k = 8;
    for (auto* t : {&reference, &backbone, &decider}) {
      t->steps = 600;
      t->batch_size = 32;
      t->optim.lr = 3e-3;
      t->optim.warmup_frac = 0.05;
      t->eval_every = 100;
      t->checkpoint_every = 100;
    }
    reference.policy = Policy::standard;
    backbone.policy = Policy::oracle;
    decider.batch_size = 64;
    decider.optim.weight_decay = 0.0;
    sync();
  }

  /// Re-establishes the derived fields after an edit.
  void sync() {
    for (auto* t : {&reference, &backbone, &decider}) t->seed = seed;
    reference.policy = Policy::standard;
    labels.max_depth = model.max_depth;
    if (model.max_depth > 2) labels.rule = LabelRule::quantile;
  }

  void validate() const {
    if (precision != "float32" && precision != "float64") throw ConfigError("precision must be float32 or float64");
    if (validation_fraction < 0.0 || validation_fraction >= 1.0) throw ConfigError("validation_fraction must lie in [0, 1)");
    if (model.max_depth < 2) throw ConfigError("model.max_depth must be >= 2 for a run");
    if (labels.max_depth != model.max_depth) throw ConfigError("labels.max_depth must equal model.max_depth");
    if (labels.rule == LabelRule::binary && model.max_depth != 2) throw ConfigError("binary labels need max_depth 2");
    if (!(eval.sweep_step > 0.0) || eval.sweep_lo > eval.sweep_hi) throw ConfigError("eval: bad threshold sweep range");
    task.validate();
    reference.validate();
    backbone.validate();
    decider.validate();
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"seed", c.seed},
                     {"precision", c.precision},
                     {"task", c.task},
                     {"count", c.count},
                     {"validation_fraction", c.validation_fraction},
                     {"model", c.model},
                     {"reference", c.reference},
                     {"backbone", c.backbone},
                     {"decider", c.decider},
                     {"labels", c.labels},
                     {"eval", c.eval},
                     {"generate", c.generate}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  RunConfig d;
  c.seed = j.value("seed", d.seed);
  c.precision = j.value("precision", d.precision);
  c.task = j.contains("task") ? j.at("task").get<TaskSpec>() : d.task;
  c.count = j.value("count", d.count);
  c.validation_fraction = j.value("validation_fraction", d.validation_fraction);
  if (j.contains("model")) {
    auto m = nlohmann::json(d.model);
    m.merge_patch(j.at("model"));
    c.model = m.get<ModelConfig>();
  } else {
    c.model = d.model;
  }
  auto train = [&](const char* key, const TrainConfig& def) {
    if (!j.contains(key)) return def;
    auto t = nlohmann::json(def);
    t.merge_patch(j.at(key));
    return t.get<TrainConfig>();
  };
  c.reference = train("reference", d.reference);
  c.backbone = train("backbone", d.backbone);
  c.decider = train("decider", d.decider);
  c.labels = j.contains("labels") ? j.at("labels").get<LabelConfig>() : d.labels;
  c.eval = j.contains("eval") ? j.at("eval").get<EvalSettings>() : d.eval;
  c.generate = j.contains("generate") ? j.at("generate").get<GenerateSettings>() : d.generate;
  c.sync();
  if (j.contains("labels") && j.at("labels").contains("rule")) {
    c.labels.rule = j.at("labels").at("rule") == "binary" ? LabelRule::binary : LabelRule::quantile;
  }
}

inline RunConfig load_run_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path.string());
  try {
    return nlohmann::json::parse(f).get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline std::string fingerprint(const nlohmann::json& j) {
  const auto name = content_name(j.dump(), "x");
  return name.substr(2, 16);
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp);
    f << j.dump(2) << "\n";
  }
  fs::rename(tmp, path);
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path.string());
  return nlohmann::json::parse(f);
}

/// Names of the evaluated policies, in report order.
inline const std::vector<std::string>& eval_policy_names() {
  static const std::vector<std::string> names = {"standard", "always_think", "tah_decider", "tah_oracle"};
  return names;
}

inline std::string canonical_policy_name(const std::string& s) {
  return to_string(parse_eval_policy(s));
}

struct AnalyzeOptions {
  bool sweep_only = false;
  std::optional<std::vector<double>> thresholds;
  bool sensitivity = true;
  bool generation = true;
};

/// One run directory:
///   config.json                resolved config of the last command
///   data/corpus.txt            tokenized corpus with answer keys
///   <stage>/stage.json         fingerprint and artifact of a finished stage
///   <stage>/<fingerprint>/     training state, reports, checkpoints
///   eval.json, analysis/       reports
template <class T>
class Pipeline {
 public:
  Pipeline(RunConfig cfg, fs::path root, std::ostream* log = nullptr)
      : cfg_(std::move(cfg)), root_(std::move(root)), log_(log) {
    cfg_.sync();
    cfg_.validate();
  }

  const RunConfig& config() const { return cfg_; }
  const fs::path& root() const { return root_; }

  void echo_config(const std::string& command) const {
    fs::create_directories(root_);
    write_json(root_ / "config.json", cfg_);
    std::ofstream f(root_ / "commands.jsonl", std::ios::app);
    f << nlohmann::json{{"command", command}, {"config", cfg_}}.dump() << "\n";
  }

  // Fingerprints chain through every upstream stage.
  std::string data_fp() const {
    return fingerprint({{"task", cfg_.task}, {"count", cfg_.count}, {"vf", cfg_.validation_fraction}, {"seed", cfg_.seed}});
  }
  std::string reference_fp() const {
    return fingerprint({{"data", data_fp()}, {"model", cfg_.model}, {"train", cfg_.reference}, {"precision", cfg_.precision}});
  }
  std::string labels_fp() const { return fingerprint({{"reference", reference_fp()}, {"labels", cfg_.labels}}); }
  std::string backbone_fp(Policy p) const {
    auto t = cfg_.backbone;
    t.policy = p;
    return fingerprint({{"reference", reference_fp()},
                        {"labels", needs_labels(p) ? labels_fp() : std::string()},
                        {"model", cfg_.model},
                        {"train", t},
                        {"precision", cfg_.precision}});
  }
  std::string decider_fp() const {
    return fingerprint({{"backbone", backbone_fp(Policy::oracle)}, {"labels", labels_fp()}, {"train", cfg_.decider}});
  }

  static std::string backbone_stage(Policy p) { return "backbone-" + to_string(p); }

  // ---- stages ----

  const TokenizedCorpus& gen_data() {
    const auto path = root_ / "data" / "corpus.txt";
    auto raw = generate_task(cfg_.task, cfg_.count, cfg_.seed);
    auto c = build_corpus(cfg_.task, raw, cfg_.validation_fraction, cfg_.seed);
    write_corpus(path, c);
    write_json(root_ / "data" / "stage.json", {{"fingerprint", data_fp()}, {"artifact", "data/corpus.txt"},
                                               {"sequences", c.sequences.size()},
                                               {"validation", c.indices(Split::validation).size()}});
    corpus_ = std::move(c);
    say("gen-data", std::to_string(corpus_->sequences.size()) + " sequences -> " + path.string());
    return *corpus_;
  }

  const TokenizedCorpus& corpus() {
    if (!corpus_) corpus_ = read_corpus(require("data", data_fp(), "gen-data"));
    return *corpus_;
  }

  const Backbone<T>& train_reference() {
    const auto fp = reference_fp();
    if (up_to_date("reference", fp)) {
      say("train-ref", "up to date");
      return reference();
    }
    const auto& c = corpus();
    const auto dir = root_ / "reference" / fp;
    auto tr = reference_trainer<T>(cfg_.model, c, cfg_.reference, dir);
    resume(tr, dir);
    drive(tr, "train-ref");
    finish_stage("reference", fp, tr.report());
    reference_.reset();
    return reference();
  }

  const Backbone<T>& reference() {
    if (!reference_) reference_ = load_backbone(require("reference", reference_fp(), "train-ref"));
    return *reference_;
  }

  const IterationLabels& label() {
    const auto fp = labels_fp();
    if (up_to_date("labels", fp)) {
      say("label", "up to date");
      return labels();
    }
    const auto& ref = reference();
    auto l = label_corpus(ref, corpus(), cfg_.labels);
    const auto rel = fs::path("labels") / fp / "labels.jsonl";
    write_labels(root_ / rel, l);
    std::size_t deep = 0;
    for (const auto& t : l.tokens) deep += t.depth > 1;
    write_json(root_ / "labels" / "stage.json",
               {{"fingerprint", fp}, {"artifact", rel.string()}, {"tokens", l.tokens.size()},
                {"iterated", deep}, {"mean_depth", l.mean_depth()}});
    labels_ = std::move(l);
    say("label", std::to_string(deep) + " of " + std::to_string(labels_->tokens.size()) + " tokens need depth > 1");
    return *labels_;
  }

  const IterationLabels& labels() {
    if (!labels_) labels_ = read_labels(require("labels", labels_fp(), "label"));
    return *labels_;
  }

  const Backbone<T>& train_backbone(Policy p) {
    if (p == Policy::standard) throw ConfigError("train-backbone: the standard policy is the reference stage");
    const auto fp = backbone_fp(p);
    const auto stage = backbone_stage(p);
    if (up_to_date(stage, fp)) {
      say("train-backbone", to_string(p) + " up to date");
      return backbone(p);
    }
    const IterationLabels* l = needs_labels(p) ? &labels() : nullptr;
    auto tcfg = cfg_.backbone;
    tcfg.policy = p;
    const auto dir = root_ / stage / fp;
    BackboneTrainer<T> tr(deepen(reference(), cfg_.model.max_depth, cfg_.seed), corpus(), tcfg, l, dir);
    resume(tr, dir);
    drive(tr, "train-backbone:" + to_string(p));
    finish_stage(stage, fp, tr.report());
    backbones_.erase(p);
    return backbone(p);
  }

  const Backbone<T>& backbone(Policy p) {
    auto it = backbones_.find(p);
    if (it == backbones_.end()) {
      const auto cmd = "train-backbone --policy " + to_string(p);
      it = backbones_.emplace(p, load_backbone(require(backbone_stage(p), backbone_fp(p), cmd))).first;
    }
    return it->second;
  }

  const Decider<T>& train_decider() {
    const auto fp = decider_fp();
    if (up_to_date("decider", fp)) {
      say("train-decider", "up to date");
      return decider();
    }
    const auto dir = root_ / "decider" / fp;
    DeciderTrainer<T> tr(backbone(Policy::oracle), corpus(), labels(), cfg_.decider, dir);
    resume(tr, dir);
    drive(tr, "train-decider");
    finish_stage("decider", fp, tr.report());
    decider_.reset();
    return decider();
  }

  const Decider<T>& decider() {
    if (!decider_) decider_ = decider_from_checkpoint<T>(load_checkpoint(require("decider", decider_fp(), "train-decider")));
    return *decider_;
  }

  // ---- evaluation ----

  EvalOptions<T> eval_options(EvalPolicy p) {
    EvalOptions<T> o;
    o.policy = p;
    o.threshold = cfg_.eval.threshold;
    o.batch_size = cfg_.eval.batch_size;
    o.max_len = cfg_.eval.max_len;
    if (p == EvalPolicy::decider) o.decider = &decider();
    if (p == EvalPolicy::oracle_labels) o.labels = &labels();
    return o;
  }

  const Backbone<T>& model_for(EvalPolicy p) {
    switch (p) {
      case EvalPolicy::standard:
        return reference();
      case EvalPolicy::always_think:
        return backbone(Policy::always_think);
      default:
        return backbone(Policy::oracle);
    }
  }

  const EvalResult& evaluate_policy(const std::string& name) {
    const auto p = parse_eval_policy(name);
    const auto key = to_string(p);
    auto it = results_.find(key);
    if (it == results_.end()) {
      const auto& m = model_for(p);
      it = results_.emplace(key, evaluate(m, corpus(), eval_options(p))).first;
    }
    return it->second;
  }

  nlohmann::json eval(const std::vector<std::string>& policies) {
    nlohmann::json out = fs::exists(root_ / "eval.json") ? read_json(root_ / "eval.json") : nlohmann::json::object();
    out["threshold"] = cfg_.eval.threshold;
    out["split"] = "validation";
    for (const auto& name : policies) {
      const auto& r = evaluate_policy(name);
      out["policies"][r.policy] = summary_json(r);
      std::ostringstream s;
      s << std::fixed << std::setprecision(4) << "accuracy " << r.accuracy() << " mean_iterations "
        << std::setprecision(2) << r.mean_iterations() << " flops/token " << std::setprecision(0)
        << r.flops_per_token();
      say("eval", r.policy + ": " + s.str());
    }
    write_json(root_ / "eval.json", out);
    return out;
  }

  std::vector<SweepPoint> sweep(const std::vector<double>& thresholds) {
    return threshold_sweep(backbone(Policy::oracle), corpus(), eval_options(EvalPolicy::decider), thresholds);
  }

  nlohmann::json analyze(const AnalyzeOptions& opt = {}) {
    const auto dir = root_ / "analysis";
    fs::create_directories(dir);
    nlohmann::json summary;

    const auto thresholds =
        opt.thresholds ? *opt.thresholds : threshold_grid(cfg_.eval.sweep_lo, cfg_.eval.sweep_hi, cfg_.eval.sweep_step);
    const auto pts = sweep(thresholds);
    {
      std::ofstream f(dir / "threshold_sweep.tsv", std::ios::trunc);
      f << "threshold\tcontinue_fraction\taccuracy\tmean_iterations\n";
      auto arr = nlohmann::json::array();
      for (const auto& p : pts) {
        f << p.threshold << "\t" << p.continue_fraction << "\t" << p.accuracy << "\t" << p.mean_iterations << "\n";
        arr.push_back({{"threshold", p.threshold},
                       {"continue_fraction", p.continue_fraction},
                       {"accuracy", p.accuracy},
                       {"mean_iterations", p.mean_iterations}});
      }
      summary["threshold_sweep"] = arr;
      write_json(dir / "threshold_sweep.json", arr);
    }
    if (opt.sweep_only) return summary;

    std::map<std::string, const EvalResult*> res;
    for (const auto& n : eval_policy_names()) res[n] = &evaluate_policy(n);

    nlohmann::json over;
    for (const auto& n : {"always_think", "tah_decider", "tah_oracle", "standard"}) over[n] = to_json_value(overthink_report(*res[n]));
    for (const auto& n : {"always_think", "tah_decider", "tah_oracle"})
      over["direct_reply"][n] = to_json_value(direct_reply_report(*res["standard"], *res[n]));
    write_json(dir / "overthink.json", over);
    summary["overthink"] = over;

    nlohmann::json alt;
    for (const auto& n : {"tah_decider", "tah_oracle"})
      alt[n] = to_json_value(token_alternation_stats(*res[n]), corpus().vocab);
    write_json(dir / "alternation.json", alt);

    nlohmann::json flops;
    const double base = res["standard"]->flops_per_token();
    for (const auto& n : eval_policy_names()) {
      const auto& r = *res[n];
      flops["teacher_forced"][n] = {{"flops_per_token", r.flops_per_token()},
                                    {"mean_iterations", r.mean_iterations()},
                                    {"ratio_to_standard", base > 0 ? r.flops_per_token() / base : 0.0}};
    }
    if (opt.generation) flops["generation"] = generation_report(dir / "generations");
    write_json(dir / "flops.json", flops);
    summary["flops"] = flops;

    {
      const auto& dec = decider();
      const auto val = corpus().indices(Split::validation);
      const auto set = collect_decisions(backbone(Policy::oracle), corpus(), val.empty() ? corpus().indices(Split::train) : val,
                                         labels(), cfg_.eval.batch_size, cfg_.eval.max_len);
      const auto p = predict(dec, set);
      nlohmann::json dj;
      for (double thr : {0.5, cfg_.eval.threshold}) {
        const auto a = decider_accuracy(p, set.labels, thr);
        std::ostringstream key;
        key << "threshold_" << std::fixed << std::setprecision(2) << thr;
        dj[key.str()] = {{"accuracy", a.accuracy},
                         {"balanced_accuracy", a.balanced_accuracy},
                         {"overthink", a.overthink},
                         {"underthink", a.underthink},
                         {"decisions", set.size()}};
      }
      write_json(dir / "decider.json", dj);
      summary["decider"] = dj;
    }

    {
      std::vector<std::vector<std::int64_t>> seqs;
      for (auto s : corpus().indices(Split::validation)) {
        if (seqs.size() >= cfg_.eval.depth_mass_sequences) break;
        seqs.push_back(corpus().sequences[s].ids);
      }
      auto arr = nlohmann::json::array();
      if (!seqs.empty()) {
        for (const auto& layer : attention_depth_mass(backbone(Policy::oracle), seqs)) {
          auto heads = nlohmann::json::array();
          for (const auto& h : layer.heads) heads.push_back({{"depth1", h.depth1}, {"deeper", h.deeper}});
          arr.push_back({{"mean_depth1", layer.mean}, {"stddev_depth1", layer.stddev}, {"heads", heads}});
        }
      }
      write_json(dir / "depth_mass.json", arr);
    }

    if (opt.sensitivity) {
      nlohmann::json sj;
      try {
        sj = to_json_value(sensitivity_sweep(backbone(Policy::oracle), corpus(), labels(), noise_grid_preset(),
                                             cfg_.eval.noise_seeds, cfg_.eval.batch_size, cfg_.eval.max_len));
      } catch (const Error& e) {
        sj = {{"error", e.what()}};
        say("analyze", std::string("sensitivity sweep skipped: ") + e.what());
      }
      write_json(dir / "sensitivity.json", sj);
      summary["sensitivity"] = sj;
    }
    say("analyze", "reports written to " + dir.string());
    return summary;
  }

  // ---- generation ----

  GenerationTrace generate_text(const std::string& prompt, GenPolicy p, std::optional<std::size_t> max_new = {}) {
    const auto& c = corpus();
    return generate_ids(tokenize(prompt, c.vocab), p, max_new);
  }

  GenerationTrace generate_ids(const std::vector<std::int64_t>& prompt, GenPolicy p,
                               std::optional<std::size_t> max_new = {}) {
    const auto& c = corpus();
    GenerateOptions<T> o;
    o.policy = p;
    o.threshold = cfg_.eval.threshold;
    o.sampler = cfg_.generate.sampler;
    o.seed = cfg_.seed;
    const auto room = static_cast<std::size_t>(cfg_.model.max_position) + 1;
    o.max_new_tokens = std::min(max_new.value_or(cfg_.generate.max_new_tokens), room > prompt.size() ? room - prompt.size() : 0);
    if (c.vocab.contains('.')) o.stop_token = c.vocab.id('.');
    const Backbone<T>* m = nullptr;
    switch (p) {
      case GenPolicy::standard:
        m = &reference();
        break;
      case GenPolicy::always_think:
        m = &backbone(Policy::always_think);
        break;
      case GenPolicy::decider:
        m = &backbone(Policy::oracle);
        o.decider = &decider();
        break;
      case GenPolicy::oracle:
        m = &backbone(Policy::oracle);
        o.reference = &reference();
        break;
    }
    return generate(*m, prompt, o);
  }

  // ---- everything ----

  nlohmann::json run_all() {
    gen_data();
    train_reference();
    label();
    train_backbone(Policy::oracle);
    train_backbone(Policy::always_think);
    train_decider();
    eval(eval_policy_names());
    return analyze();
  }

 private:
  void say(const std::string& stage, const std::string& msg) const {
    if (log_) *log_ << "[" << stage << "] " << msg << std::endl;
  }

  fs::path require(const std::string& stage, const std::string& fp, const std::string& command) const {
    const auto marker = root_ / stage / "stage.json";
    if (!fs::exists(marker)) {
      throw DependencyError("missing artifact " + marker.string() + " (run `tah " + command + "` first)");
    }
    const auto j = read_json(marker);
    if (j.value("fingerprint", std::string()) != fp) {
      throw DependencyError("stale artifact " + marker.string() + ": built from a different config (rerun `tah " +
                            command + "`)");
    }
    const auto artifact = root_ / j.at("artifact").get<std::string>();
    if (!fs::exists(artifact)) throw DependencyError("missing artifact " + artifact.string());
    return artifact;
  }

  bool up_to_date(const std::string& stage, const std::string& fp) const {
    const auto marker = root_ / stage / "stage.json";
    if (!fs::exists(marker)) return false;
    const auto j = read_json(marker);
    return j.value("fingerprint", std::string()) == fp && fs::exists(root_ / j.at("artifact").get<std::string>());
  }

  static Backbone<T> load_backbone(const fs::path& path) {
    auto m = backbone_from_checkpoint<T>(load_checkpoint(path));
    m.set_trainable(false);
    return m;
  }

  template <class Trainer>
  void resume(Trainer& tr, const fs::path& dir) {
    const auto state = dir / "state.tah";
    if (!fs::exists(state)) return;
    tr.restore(load_checkpoint(state));
    say("resume", "continuing from step " + std::to_string(tr.step()) + " of " + std::to_string(tr.total_steps()));
  }

  template <class Trainer>
  void drive(Trainer& tr, const std::string& stage) {
    const auto chunk = std::max<std::int64_t>(1, tr.config().eval_every);
    while (tr.step() < tr.total_steps()) {
      tr.run_until(tr.step() + chunk);
      const auto& recs = tr.report().records;
      for (auto it = recs.rbegin(); it != recs.rend(); ++it) {
        if (it->split != "validation") continue;
        std::ostringstream s;
        s << "step " << tr.step() << "/" << tr.total_steps() << " validation loss " << std::setprecision(5) << it->loss;
        say(stage, s.str());
        break;
      }
    }
    tr.run();
  }

  void finish_stage(const std::string& stage, const std::string& fp, const TrainReport& rep) {
    if (rep.best_checkpoint.empty()) throw ContractError(stage + ": training produced no checkpoint");
    write_json(root_ / stage / "stage.json", {{"fingerprint", fp},
                                              {"artifact", fs::relative(rep.best_checkpoint, root_).string()},
                                              {"best_step", rep.best_step},
                                              {"best_value", rep.best_value}});
  }

  nlohmann::json generation_report(const fs::path& dir) {
    const auto& c = corpus();
    std::vector<std::size_t> picks;
    for (auto s : c.indices(Split::validation)) {
      if (picks.size() >= cfg_.generate.prompts) break;
      picks.push_back(s);
    }
    nlohmann::json out;
    const std::vector<std::pair<std::string, GenPolicy>> pols = {{"standard", GenPolicy::standard},
                                                                 {"always_think", GenPolicy::always_think},
                                                                 {"tah_decider", GenPolicy::decider},
                                                                 {"tah_oracle", GenPolicy::oracle}};
    double base = 0.0;
    for (const auto& [name, gp] : pols) {
      double flops = 0.0, depth = 0.0;
      std::size_t tokens = 0, exact = 0;
      std::ofstream f;
      fs::create_directories(dir);
      f.open(dir / (name + ".jsonl"), std::ios::trunc);
      for (auto s : picks) {
        const auto& seq = c.sequences[s];
        std::vector<std::int64_t> prompt(seq.ids.begin(), seq.ids.begin() + static_cast<std::ptrdiff_t>(seq.prompt_len));
        auto tr = generate_ids(prompt, gp);
        std::vector<std::int64_t> gold(seq.ids.begin() + static_cast<std::ptrdiff_t>(seq.prompt_len), seq.ids.end());
        exact += tr.tokens() == gold;
        for (const auto& st : tr.steps) {
          flops += st.flops;
          depth += st.depth;
          ++tokens;
        }
        f << nlohmann::json{{"sequence", s},
                            {"prompt", detokenize(prompt, c.vocab)},
                            {"output", detokenize(tr.tokens(), c.vocab)},
                            {"steps", [&] {
                               auto a = nlohmann::json::array();
                               for (const auto& st : tr.steps) a.push_back(step_json(st));
                               return a;
                             }()}}
                 .dump()
          << "\n";
      }
      const double fpt = tokens ? flops / static_cast<double>(tokens) : 0.0;
      if (name == "standard") base = fpt;
      out[name] = {{"prompts", picks.size()},
                   {"tokens", tokens},
                   {"exact_match", picks.empty() ? 0.0 : static_cast<double>(exact) / static_cast<double>(picks.size())},
                   {"flops_per_token", fpt},
                   {"mean_iterations", tokens ? depth / static_cast<double>(tokens) : 0.0},
                   {"ratio_to_standard", base > 0 ? fpt / base : 0.0}};
    }
    return out;
  }

  RunConfig cfg_;
  fs::path root_;
  std::ostream* log_;
  std::optional<TokenizedCorpus> corpus_;
  std::optional<Backbone<T>> reference_;
  std::optional<IterationLabels> labels_;
  std::map<Policy, Backbone<T>> backbones_;
  std::optional<Decider<T>> decider_;
  std::map<std::string, EvalResult> results_;
};

}  // namespace tah
