// Library walk-through on a small modular-arithmetic corpus:
// reference -> oracle labels -> recurrent backbone -> decider -> eval and decode.

#include <cstdio>

#include "tah/analysis/evaluate.hpp"
#include "tah/analysis/generate.hpp"
#include "tah/data/tasks.hpp"
#include "tah/policy/labeling.hpp"
#include "tah/training/decider_trainer.hpp"
#include "tah/training/trainer.hpp"

using namespace tah;

int main() {
  TaskSpec task;
  const auto corpus = build_corpus(task, generate_task(task, 1500, 1), 0.1, 1);

  ModelConfig model;
  model.hidden_dim = 32;
  model.num_layers = 2;
  model.num_heads = 4;
  model.head_dim = 8;
  model.mlp_dim = 64;
  model.lora_rank = 4;
  model.lwe_top_k = 8;

  TrainConfig tc;
  tc.steps = 300;
  tc.batch_size = 32;
  tc.optim.lr = 3e-3;
  tc.seed = 1;

  auto ref = reference_trainer<float>(model, corpus, tc);
  ref.run();
  const auto& reference = ref.best_model();

  LabelConfig lc;
  const auto labels = label_corpus(reference, corpus, lc);
  std::printf("tokens labelled: %zu, mean oracle depth %.3f\n", labels.tokens.size(), labels.mean_depth());

  tc.policy = Policy::oracle;
  BackboneTrainer<float> stage1(deepen(reference, 2, 2), corpus, tc, &labels);
  stage1.run();
  const auto& backbone = stage1.best_model();

  DeciderTrainer<float> stage2(backbone, corpus, labels, tc);
  stage2.run();
  const auto& decider = stage2.best_decider();

  EvalOptions<float> eo;
  eo.batch_size = 64;
  std::printf("standard     accuracy %.4f\n", evaluate(reference, corpus, eo).accuracy());
  eo.policy = EvalPolicy::decider;
  eo.decider = &decider;
  const auto r = evaluate(backbone, corpus, eo);
  std::printf("tah-decider  accuracy %.4f  mean iterations %.3f\n", r.accuracy(), r.mean_iterations());

  GenerateOptions<float> go;
  go.policy = GenPolicy::decider;
  go.decider = &decider;
  go.max_new_tokens = 8;
  go.stop_token = tokenize(".", corpus.vocab).front();
  const std::string prompt = "3+4+2+1=";
  const auto trace = generate(backbone, tokenize(prompt, corpus.vocab), go);
  std::printf("%s%s  (%.2f iterations/token)\n", prompt.c_str(), detokenize(trace.tokens(), corpus.vocab).c_str(),
              trace.mean_iterations());
  return 0;
}
