#include <gtest/gtest.h>

#include <filesystem>

#include "tah/policy/labeling.hpp"
#include "tah/training/decider_trainer.hpp"
#include "tah/training/trainer.hpp"

using namespace tah;

namespace {

TokenizedCorpus small_corpus(std::size_t n = 24) {
  TaskSpec t;
  t.max_terms = 3;
  return build_corpus(t, generate_task(t, n, 1), 0.25, 1);
}

ModelConfig small_model(const TokenizedCorpus& c, int dmax) {
  ModelConfig m;
  m.vocab_size = static_cast<int>(c.vocab.size());
  m.hidden_dim = 16;
  m.num_layers = 2;
  m.num_heads = 2;
  m.head_dim = 8;
  m.mlp_dim = 24;
  m.max_depth = dmax;
  m.lora_rank = 2;
  m.lwe_top_k = 4;
  return m;
}

TrainConfig small_train(std::int64_t steps) {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = 4;
  t.eval_every = 3;
  t.optim.lr = 3e-3;
  t.seed = 5;
  return t;
}

IterationLabels labels_for(const TokenizedCorpus& c, const Backbone<float>& ref) {
  LabelConfig lc;
  return label_corpus(ref, c, lc);
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("tah_train_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Training, ReferenceLossDecreases) {
  auto c = small_corpus(40);
  auto cfg = small_train(60);
  cfg.optim.lr = 1e-2;
  auto tr = reference_trainer<float>(small_model(c, 2), c, cfg);
  EXPECT_EQ(tr.model().config().max_depth, 1);
  tr.run();
  auto l = tr.report().losses("train");
  ASSERT_EQ(l.size(), 60u);
  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) head += l[static_cast<std::size_t>(i)], tail += l[l.size() - 1 - static_cast<std::size_t>(i)];
  EXPECT_LT(tail, 0.7 * head);
  EXPECT_EQ(tr.report().validation_perplexity().size(), 20u);
  EXPECT_GE(tr.report().best_step, 0);
}

TEST(Training, StandardPolicyMatchesReferenceTraining) {
  auto c = small_corpus();
  auto cfg = small_train(8);
  auto ref = reference_trainer<float>(small_model(c, 1), c, cfg);
  auto deep = deepen(ref.model(), 2, 9);
  cfg.policy = Policy::standard;
  BackboneTrainer<float> a(ref.model().clone(), c, cfg);
  BackboneTrainer<float> b(deep, c, cfg);
  a.run();
  b.run();
  EXPECT_EQ(a.report().losses("train"), b.report().losses("train"));
  for (const auto& p : b.model().adapter_params())
    for (float v : p.tensor.vec()) (void)v;
  auto ab = a.model().base_params();
  auto bb = b.model().base_params();
  for (std::size_t i = 0; i < ab.size(); ++i) EXPECT_EQ(ab[i].tensor.vec(), bb[i].tensor.vec()) << ab[i].name;
}

TEST(Training, AllEasyLabelsLeaveAdaptersUntouched) {
  auto c = small_corpus();
  auto ref = Backbone<float>::init(small_model(c, 1), 2);
  auto labels = labels_for(c, ref);
  for (auto& t : labels.tokens) {
    t.depth = 1;
    t.cont = continuation_labels(1, 2);
  }
  auto deep = deepen(ref, 2, 3);
  std::vector<std::vector<float>> before;
  for (const auto& p : deep.adapter_params()) before.push_back(p.tensor.vec());
  BackboneTrainer<float> tr(deep, c, small_train(4), &labels);
  tr.run();
  auto after = tr.model().adapter_params();
  for (std::size_t i = 0; i < after.size(); ++i) EXPECT_EQ(after[i].tensor.vec(), before[i]) << after[i].name;
}

TEST(Training, OraclePolicyRoutesHardTokensDeeper) {
  auto c = small_corpus();
  auto ref = Backbone<float>::init(small_model(c, 1), 2);
  auto labels = labels_for(c, ref);
  LabelIndex index(labels);
  auto deep = deepen(ref, 2, 3);
  std::vector<std::size_t> ids = {0, 1, 2};
  auto b = assemble_batch(c, ids, Policy::oracle, 2, index);
  std::size_t hard = 0;
  for (const auto& t : labels.tokens) hard += t.sequence <= 2 && t.depth == 2;
  auto l = depth_loss(deep, b, Policy::oracle);
  EXPECT_EQ(l.tokens_at_depth[1], hard);
  EXPECT_EQ(l.tokens_at_depth[0] + l.tokens_at_depth[1], b.supervised);
  auto always = depth_loss(deep, assemble_batch(c, ids, Policy::always_think, 2, index), Policy::always_think);
  EXPECT_EQ(always.tokens_at_depth[1], b.supervised);
  EXPECT_THROW(assemble_batch(c, ids, Policy::oracle, 2, LabelIndex{}), DependencyError);
  EXPECT_THROW(assemble_batch(c, ids, Policy::oracle, 3, index), AlignmentError);
}

TEST(Training, TokenPlusLatentAddsShallowTerms) {
  auto c = small_corpus();
  auto ref = Backbone<float>::init(small_model(c, 1), 2);
  auto labels = labels_for(c, ref);
  LabelIndex index(labels);
  auto deep = deepen(ref, 2, 3);
  std::vector<std::size_t> ids = {0, 1, 2, 3};
  auto b = assemble_batch(c, ids, Policy::oracle, 2, index);
  NoGradGuard g;
  const double oracle = depth_loss(deep, b, Policy::oracle).loss.item();
  const double tpl = depth_loss(deep, b, Policy::token_plus_latent).loss.item();
  if (depth_loss(deep, b, Policy::oracle).tokens_at_depth[1] > 0) EXPECT_GT(tpl, oracle);
}

TEST(Training, ResumeReproducesLosses) {
  auto c = small_corpus();
  auto ref = Backbone<float>::init(small_model(c, 1), 2);
  auto labels = labels_for(c, ref);
  auto cfg = small_train(12);
  BackboneTrainer<float> full(deepen(ref, 2, 3), c, cfg, &labels);
  full.run();

  BackboneTrainer<float> first(deepen(ref, 2, 3), c, cfg, &labels);
  first.run_until(7);
  const auto path = scratch("resume") / "state.tah";
  std::filesystem::create_directories(path.parent_path());
  save_checkpoint(first.state_checkpoint(), path);

  BackboneTrainer<float> second(deepen(ref, 2, 77), c, cfg, &labels);
  second.restore(load_checkpoint(path));
  EXPECT_EQ(second.step(), 7);
  second.run();
  EXPECT_EQ(second.report().losses("train"), full.report().losses("train"));
  EXPECT_EQ(second.report().best_step, full.report().best_step);
}

TEST(Training, WritesReportAndBestCheckpoint) {
  auto c = small_corpus();
  const auto dir = scratch("artifacts");
  auto cfg = small_train(6);
  cfg.checkpoint_every = 3;
  auto tr = reference_trainer<float>(small_model(c, 1), c, cfg, dir);
  tr.run();
  EXPECT_TRUE(std::filesystem::exists(dir / "report.jsonl"));
  EXPECT_TRUE(std::filesystem::exists(dir / "state.tah"));
  ASSERT_FALSE(tr.report().best_checkpoint.empty());
  auto best = backbone_from_checkpoint<float>(load_checkpoint(tr.report().best_checkpoint));
  EXPECT_EQ(params_hash(best.params()), params_hash(tr.best_model().params()));
}

TEST(Training, PolicyNeedsLabelsAndDepth) {
  auto c = small_corpus();
  auto m = Backbone<float>::init(small_model(c, 2), 1);
  EXPECT_THROW(BackboneTrainer<float>(m, c, small_train(2)), DependencyError);
  auto cfg = small_train(2);
  cfg.policy = Policy::always_think;
  EXPECT_THROW(BackboneTrainer<float>(Backbone<float>::init(small_model(c, 1), 1), c, cfg), ConfigError);
  cfg.batch_size = 0;
  EXPECT_THROW(BackboneTrainer<float>(m, c, cfg), ConfigError);
}

TEST(DeciderTraining, RequiresFrozenBackbone) {
  auto c = small_corpus();
  auto ref = Backbone<float>::init(small_model(c, 1), 2);
  auto labels = labels_for(c, ref);
  auto deep = deepen(ref, 2, 3);
  deep.set_trainable(true);
  EXPECT_THROW(DeciderTrainer<float>(deep, c, labels, small_train(2)), ContractError);
}

TEST(DeciderTraining, DecisionsMatchLabels) {
  auto c = small_corpus();
  auto ref = Backbone<float>::init(small_model(c, 1), 2);
  auto labels = labels_for(c, ref);
  auto deep = deepen(ref, 2, 3);
  deep.set_trainable(false);
  auto set = collect_decisions(deep, c, c.indices(Split::train), labels, 5, 128);
  LabelIndex index(labels);
  std::size_t expected = 0;
  for (const auto& t : labels.tokens) expected += c.split[t.sequence] == Split::train;
  ASSERT_EQ(set.size(), expected);
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto gold = c.sequences[set.sequence[i]].targets()[set.index[i]];
    EXPECT_EQ(set.labels[i], index.at(set.sequence[i], set.index[i], gold).depth == 2 ? 1 : 0);
    EXPECT_EQ(set.gate_depth[i], 1);
  }
}

TEST(DeciderTraining, LearnsAndResumes) {
  auto c = small_corpus();
  auto ref = Backbone<float>::init(small_model(c, 1), 2);
  auto labels = labels_for(c, ref);
  auto deep = deepen(ref, 2, 3);
  deep.set_trainable(false);
  auto cfg = small_train(10);
  cfg.batch_size = 16;
  DeciderTrainer<float> full(deep, c, labels, cfg);
  full.run();
  DeciderTrainer<float> part(deep, c, labels, cfg);
  part.run_until(4);
  auto ck = deserialize(serialize(part.state_checkpoint()));
  DeciderTrainer<float> rest(deep, c, labels, cfg);
  rest.restore(ck);
  rest.run();
  EXPECT_EQ(rest.report().losses("train"), full.report().losses("train"));
  auto saved = decider_from_checkpoint<float>(DeciderTrainer<float>::decider_checkpoint(full.decider()));
  EXPECT_EQ(predict(saved, full.validation_set()), predict(full.decider(), full.validation_set()));
}
