#include <CLI11.hpp>

#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "tah/pipeline/run.hpp"

namespace {

using namespace tah;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string command;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> max_depth;
  std::optional<double> threshold;
  std::string precision;
  std::string policy;
  std::string task;
  std::optional<std::size_t> count;
  std::optional<double> validation_fraction;
  std::string sweep;
  bool no_sensitivity = false;
  std::string prompt;
  std::optional<std::size_t> max_new_tokens;
};

fs::path run_dir(const Options& o, std::uint64_t seed) {
  if (!o.out.empty()) return o.out;
  const char* env = std::getenv("TAH_RUN_ROOT");
  const fs::path root = env && *env ? fs::path(env) : fs::path("runs");
  return root / ("seed-" + std::to_string(seed));
}

RunConfig resolve(const Options& o, fs::path& dir) {
  RunConfig cfg;
  if (!o.config.empty()) {
    cfg = load_run_config(o.config);
  }
  if (o.seed) cfg.seed = *o.seed;
  dir = run_dir(o, cfg.seed);
  if (o.config.empty() && fs::exists(dir / "config.json")) {
    cfg = load_run_config(dir / "config.json");
    if (o.seed) cfg.seed = *o.seed;
  }
  if (o.max_depth) {
    if (*o.max_depth < 2) throw UsageError("--max-depth must be >= 2");
    cfg.model.max_depth = *o.max_depth;
    cfg.labels.rule = *o.max_depth == 2 ? LabelRule::binary : LabelRule::quantile;
  }
  if (o.threshold) {
    if (!(*o.threshold >= 0.0 && *o.threshold <= 1.0)) throw UsageError("--threshold must lie in [0, 1]");
    cfg.eval.threshold = *o.threshold;
  }
  if (!o.precision.empty()) cfg.precision = o.precision;
  if (!o.task.empty()) {
    try {
      cfg.task.kind = parse_task_kind(o.task);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
  }
  if (o.count) cfg.count = *o.count;
  if (o.validation_fraction) cfg.validation_fraction = *o.validation_fraction;
  cfg.sync();
  cfg.validate();
  return cfg;
}

std::vector<double> parse_sweep(const std::string& s) {
  std::vector<double> parts;
  std::stringstream ss(s);
  std::string item;
  try {
    while (std::getline(ss, item, ':')) parts.push_back(std::stod(item));
  } catch (const std::exception&) {
    throw UsageError("--threshold-sweep expects LO:HI[:STEP], got '" + s + "'");
  }
  if (parts.size() < 2 || parts.size() > 3 || parts[0] > parts[1]) {
    throw UsageError("--threshold-sweep expects LO:HI[:STEP], got '" + s + "'");
  }
  const double step = parts.size() == 3 ? parts[2] : 0.01;
  if (!(step > 0.0)) throw UsageError("--threshold-sweep step must be positive");
  return threshold_grid(parts[0], parts[1], step);
}

Policy train_policy(const std::string& s) {
  try {
    const auto p = parse_policy(s);
    if (p == Policy::standard) throw UsageError("train-backbone: use train-ref for the standard policy");
    return p;
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
}

std::string eval_policy(const std::string& s) {
  try {
    const auto p = parse_eval_policy(s);
    if (p == EvalPolicy::oracle_labels) throw UsageError("eval: unknown policy '" + s + "'");
    return to_string(p);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
}

void print_eval(const nlohmann::json& report, const std::vector<std::string>& names) {
  std::cout << "policy\taccuracy\tmean_iterations\tcontinue_fraction\tflops_per_token\n";
  for (const auto& n : names) {
    const auto& r = report.at("policies").at(n);
    std::cout << n << "\t" << std::fixed << std::setprecision(4) << r.at("accuracy").get<double>() << "\t"
              << std::setprecision(2) << r.at("mean_iterations").get<double>() << "\t" << std::setprecision(4)
              << r.at("continue_fraction").get<double>() << "\t" << std::setprecision(0)
              << r.at("flops_per_token").get<double>() << "\n";
  }
  std::cout.unsetf(std::ios::fixed);
}

template <class T>
int execute(const Options& o, const RunConfig& cfg, const fs::path& dir) {
  Pipeline<T> p(cfg, dir, &std::cerr);
  p.echo_config(o.command);
  const auto& c = o.command;
  if (c == "gen-data") {
    p.gen_data();
  } else if (c == "train-ref") {
    p.train_reference();
  } else if (c == "label") {
    p.label();
  } else if (c == "train-backbone") {
    p.train_backbone(train_policy(o.policy.empty() ? "oracle" : o.policy));
  } else if (c == "train-decider") {
    p.train_decider();
  } else if (c == "eval") {
    std::vector<std::string> names = eval_policy_names();
    if (!o.policy.empty()) names = {eval_policy(o.policy)};
    print_eval(p.eval(names), names);
  } else if (c == "analyze") {
    AnalyzeOptions a;
    a.sensitivity = !o.no_sensitivity;
    if (!o.sweep.empty()) {
      a.thresholds = parse_sweep(o.sweep);
      a.sweep_only = true;
    }
    const nlohmann::json out = p.analyze(a);
    std::cout << "threshold\tcontinue_fraction\taccuracy\n";
    for (const auto& pt : out.at("threshold_sweep")) {
      std::cout << pt.at("threshold").get<double>() << "\t" << pt.at("continue_fraction").get<double>() << "\t"
                << pt.at("accuracy").get<double>() << "\n";
    }
  } else if (c == "generate") {
    GenPolicy gp;
    try {
      gp = parse_gen_policy(o.policy.empty() ? "tah_decider" : o.policy);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
    const auto trace = p.generate_text(o.prompt, gp, o.max_new_tokens);
    const auto path = dir / "generations" / (to_string(gp) + ".jsonl");
    write_trace(path, trace);
    std::cout << o.prompt << detokenize(trace.tokens(), p.corpus().vocab) << "\n";
    std::cout << "tokens " << trace.steps.size() << " mean_iterations " << std::fixed << std::setprecision(2)
              << trace.mean_iterations() << " flops/token " << std::setprecision(0) << trace.flops_per_token() << "\n";
  } else if (c == "pipeline") {
    p.run_all();
    print_eval(read_json(dir / "eval.json"), eval_policy_names());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recurrent transformer with per-token iteration depth"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* s) {
    s->add_option("--config", o.config, "Run config JSON")->check(CLI::ExistingFile);
    s->add_option("--seed", o.seed, "Run seed");
    s->add_option("--out", o.out, "Run directory (default $TAH_RUN_ROOT/seed-N)");
    s->add_option("--max-depth", o.max_depth, "Maximum iteration depth");
    s->add_option("--precision", o.precision, "float32 or float64")->check(CLI::IsMember({"float32", "float64"}));
  };

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus");
  common(gen);
  gen->add_option("--task", o.task, "mod-chain, copy or brackets")->required();
  gen->add_option("--count", o.count, "Number of sequences")->required();
  gen->add_option("--validation-fraction", o.validation_fraction, "Held-out fraction");

  auto* ref = app.add_subcommand("train-ref", "Train the single-pass reference model");
  common(ref);
  auto* lab = app.add_subcommand("label", "Label oracle iteration depths with the reference");
  common(lab);
  auto* bb = app.add_subcommand("train-backbone", "Stage 1: train the recurrent backbone");
  common(bb);
  bb->add_option("--policy", o.policy, "oracle, always_think or token_plus_latent");
  auto* dec = app.add_subcommand("train-decider", "Stage 2: train the iteration decider");
  common(dec);

  auto* ev = app.add_subcommand("eval", "Validation accuracy per policy");
  common(ev);
  ev->add_option("--policy", o.policy, "standard, always_think, tah-decider or tah-oracle");
  ev->add_option("--threshold", o.threshold, "Decider continue threshold");

  auto* an = app.add_subcommand("analyze", "Overthinking, alternation, FLOPs and threshold reports");
  common(an);
  an->add_option("--threshold-sweep", o.sweep, "LO:HI[:STEP]; only run the sweep");
  an->add_option("--threshold", o.threshold, "Decider continue threshold");
  an->add_flag("--no-sensitivity", o.no_sensitivity, "Skip the noise sensitivity sweep");

  auto* gn = app.add_subcommand("generate", "Decode from a prompt");
  common(gn);
  gn->add_option("--prompt", o.prompt, "Prompt text")->required();
  gn->add_option("--policy", o.policy, "standard, always_think, tah-decider or tah-oracle");
  gn->add_option("--threshold", o.threshold, "Decider continue threshold");
  gn->add_option("--max-new-tokens", o.max_new_tokens, "Token budget");

  auto* pl = app.add_subcommand("pipeline", "All stages: data to analysis");
  common(pl);
  pl->add_option("--task", o.task, "mod-chain, copy or brackets");
  pl->add_option("--count", o.count, "Number of sequences");
  pl->add_option("--threshold", o.threshold, "Decider continue threshold");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  for (auto* s : app.get_subcommands()) o.command = s->get_name();

  try {
    fs::path dir;
    const auto cfg = resolve(o, dir);
    if (cfg.precision == "float64") return execute<double>(o, cfg, dir);
    return execute<float>(o, cfg, dir);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const tah::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
