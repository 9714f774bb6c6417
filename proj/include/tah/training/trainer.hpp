#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tah/backbone/forward.hpp"
#include "tah/data/corpus.hpp"
#include "tah/io/checkpoint.hpp"
#include "tah/numerics/ops.hpp"
#include "tah/numerics/optim.hpp"
#include "tah/policy/labeling.hpp"
#include "tah/training/config.hpp"

namespace tah {

/// Packed rows for a set of sequences plus, per row, the next-token target
/// (-1 when unsupervised) and the number of passes the policy assigns.
struct DepthBatch {
  std::vector<std::size_t> sequence_ids;
  std::vector<TokenRow> rows;
  std::vector<std::int64_t> targets;
  std::vector<int> depth;
  std::size_t supervised = 0;
};

inline DepthBatch assemble_batch(const TokenizedCorpus& corpus, const std::vector<std::size_t>& sequence_ids,
                                 Policy policy, int max_depth, const LabelIndex& labels) {
  if (needs_labels(policy)) {
    if (!labels.bound()) throw DependencyError("policy '" + to_string(policy) + "' needs iteration labels");
    if (labels.max_depth() != max_depth) {
      throw AlignmentError("label max_depth " + std::to_string(labels.max_depth()) + " differs from model max_depth " +
                           std::to_string(max_depth));
    }
  }
  DepthBatch b;
  std::size_t segment = 0;
  for (auto s : sequence_ids) {
    if (s == static_cast<std::size_t>(-1)) continue;
    const auto& seq = corpus.sequences.at(s);
    const auto tg = seq.targets();
    b.sequence_ids.push_back(s);
    for (std::size_t i = 0; i < seq.ids.size(); ++i) {
      b.rows.push_back({segment, static_cast<std::int64_t>(i), seq.ids[i]});
      b.targets.push_back(tg[i]);
      int d = 1;
      if (tg[i] >= 0) {
        ++b.supervised;
        switch (policy) {
          case Policy::standard:
            d = 1;
            break;
          case Policy::always_think:
            d = max_depth;
            break;
          case Policy::oracle:
          case Policy::token_plus_latent:
            d = labels.at(s, i, tg[i]).depth;
            if (d < 1 || d > max_depth) throw AlignmentError("label depth outside [1, max_depth]");
            break;
        }
      }
      b.depth.push_back(d);
    }
    ++segment;
  }
  if (b.rows.empty()) throw EmptyCorpusError("batch holds no sequences");
  return b;
}

template <class T>
struct DepthLoss {
  Tensor<T> loss;                          // mean over supervised rows
  std::vector<std::size_t> tokens_at_depth;  // supervised rows per assigned depth
  double final_ce_sum = 0.0;                 // Σ CE at each row's assigned depth
  std::size_t supervised = 0;
};

/// Cross-entropy of each supervised row at its assigned depth, averaged.
/// Under token_plus_latent every depth up to the assigned one contributes.
template <class T>
DepthLoss<T> depth_loss(const Backbone<T>& model, const DepthBatch& b, Policy policy) {
  if (b.supervised == 0) throw ContractError("depth_loss: batch has no supervised positions");
  const int dmax = model.config().max_depth;
  auto trace = run_passes(model, b.rows, fixed_depths<T>(b.depth));
  DepthLoss<T> out;
  out.supervised = b.supervised;
  out.tokens_at_depth.assign(static_cast<std::size_t>(dmax), 0);
  for (std::size_t r = 0; r < b.rows.size(); ++r)
    if (b.targets[r] >= 0) out.tokens_at_depth[static_cast<std::size_t>(b.depth[r] - 1)]++;
  std::optional<Tensor<T>> total;
  const auto v = static_cast<std::size_t>(model.config().vocab_size);
  for (const auto& pass : trace.passes) {
    std::vector<std::size_t> local;
    std::vector<std::int64_t> tgt;
    for (std::size_t li = 0; li < pass.rows.size(); ++li) {
      const auto r = pass.rows[li];
      if (b.targets[r] < 0) continue;
      const bool final = b.depth[r] == pass.depth;
      if (final) {
        const auto* l = pass.logits.vec().data() + li * v;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, static_cast<double>(l[j]));
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(l[j]) - mx);
        out.final_ce_sum += std::log(z) + mx - static_cast<double>(l[static_cast<std::size_t>(b.targets[r])]);
      }
      if (final || policy == Policy::token_plus_latent) {
        local.push_back(li);
        tgt.push_back(b.targets[r]);
      }
    }
    if (local.empty()) continue;
    auto ce = cross_entropy_sum(gather_rows(pass.logits, local), tgt);
    total = total ? add(*total, ce) : ce;
  }
  out.loss = scale(*total, static_cast<T>(1.0 / static_cast<double>(b.supervised)));
  return out;
}

/// Validation pass: mean cross-entropy at the assigned depth over every
/// supervised position of `pool`.
template <class T>
TrainRecord evaluate_loss(const Backbone<T>& model, const TokenizedCorpus& corpus, const std::vector<std::size_t>& pool,
                          Policy policy, const LabelIndex& labels, std::size_t batch_size, std::size_t max_len) {
  NoGradGuard no_grad;
  const int dmax = model.config().max_depth;
  TrainRecord rec;
  rec.split = "validation";
  rec.tokens_at_depth.assign(static_cast<std::size_t>(dmax), 0);
  double ce = 0.0;
  std::size_t n = 0;
  std::vector<std::size_t> kept;
  for (auto s : pool)
    if (corpus.sequences.at(s).ids.size() <= max_len) kept.push_back(s);
  for (std::size_t start = 0; start < kept.size(); start += batch_size) {
    std::vector<std::size_t> ids(kept.begin() + static_cast<std::ptrdiff_t>(start),
                                 kept.begin() + static_cast<std::ptrdiff_t>(std::min(kept.size(), start + batch_size)));
    auto b = assemble_batch(corpus, ids, policy, dmax, labels);
    if (b.supervised == 0) continue;
    auto l = depth_loss(model, b, policy);
    ce += l.final_ce_sum;
    n += l.supervised;
    for (std::size_t d = 0; d < l.tokens_at_depth.size(); ++d) rec.tokens_at_depth[d] += l.tokens_at_depth[d];
  }
  if (n == 0) throw EmptyCorpusError("validation split has no supervised positions");
  rec.loss = ce / static_cast<double>(n);
  rec.perplexity = std::exp(rec.loss);
  return rec;
}

/// Writes `ck` under dir/checkpoints with a content-addressed name and
/// returns the path.
inline std::filesystem::path save_content_addressed(const Checkpoint& ck, const std::filesystem::path& dir,
                                                    const std::string& stem) {
  const auto bytes = serialize(ck);
  const auto path = dir / "checkpoints" / content_name(bytes, stem);
  std::filesystem::create_directories(path.parent_path());
  if (!std::filesystem::exists(path)) {
    const auto tmp = path.string() + ".tmp";
    {
      std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
      if (!f) throw IoError("cannot write " + tmp);
      f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (!f) throw IoError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
  }
  return path;
}

template <class T>
void put_optimizer(Checkpoint& ck, const AdamW<T>& opt) {
  const auto& ps = opt.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& shape = ps[i].tensor.shape();
    ck.put(TensorRecord::from<T>("optim.m." + ps[i].name, shape, opt.first_moments()[i]));
    ck.put(TensorRecord::from<T>("optim.v." + ps[i].name, shape, opt.second_moments()[i]));
  }
  ck.meta["optim_step"] = opt.step_count();
}

template <class T>
void load_optimizer(const Checkpoint& ck, AdamW<T>& opt) {
  std::vector<std::vector<T>> m, v;
  for (const auto& p : opt.params()) {
    m.push_back(ck.at("optim.m." + p.name).template values<T>());
    v.push_back(ck.at("optim.v." + p.name).template values<T>());
  }
  opt.restore(ck.meta.at("optim_step").get<std::int64_t>(), std::move(m), std::move(v));
}

/// Joint training of θ (and Δ when max_depth > 1) under one of the depth
/// policies. The batch at step s depends only on (seed, s), so a run
/// resumed from its state checkpoint reproduces the uninterrupted losses.
template <class T>
class BackboneTrainer {
 public:
  BackboneTrainer(Backbone<T> model, const TokenizedCorpus& corpus, TrainConfig cfg,
                  const IterationLabels* labels = nullptr, std::filesystem::path out_dir = {})
      : model_(std::move(model)), corpus_(&corpus), cfg_(std::move(cfg)), out_dir_(std::move(out_dir)) {
    cfg_.validate();
    if (labels) labels_ = LabelIndex(*labels);
    if (needs_labels(cfg_.policy) && !labels) {
      throw DependencyError("policy '" + to_string(cfg_.policy) + "' needs an iteration label file");
    }
    if (cfg_.policy != Policy::standard && model_.config().max_depth < 2) {
      throw ConfigError("policy '" + to_string(cfg_.policy) + "' needs max_depth >= 2");
    }
    train_pool_ = corpus.indices(Split::train);
    val_pool_ = corpus.indices(Split::validation);
    if (train_pool_.empty()) throw EmptyCorpusError("no training sequences");
    batches_per_epoch_ = make_batches(corpus, train_pool_, cfg_.batch_size, cfg_.max_len, cfg_.seed, 0).size();
    total_steps_ = cfg_.steps > 0 ? cfg_.steps
                                  : static_cast<std::int64_t>(batches_per_epoch_) * static_cast<std::int64_t>(cfg_.epochs);
    auto ocfg = cfg_.optim;
    ocfg.total_steps = total_steps_;
    model_.set_trainable(true);
    optim_.emplace(model_.params(), ocfg);
  }

  std::int64_t total_steps() const { return total_steps_; }
  std::int64_t step() const { return step_; }
  std::size_t batches_per_epoch() const { return batches_per_epoch_; }
  const Backbone<T>& model() const { return model_; }
  const Backbone<T>& best_model() const { return best_ ? *best_ : model_; }
  const TrainReport& report() const { return report_; }
  const TrainConfig& config() const { return cfg_; }

  /// One optimizer step; returns the training loss.
  double train_step() {
    if (step_ >= total_steps_) throw ContractError("training already finished");
    const auto epoch = static_cast<std::uint64_t>(step_) / batches_per_epoch_;
    if (!epoch_batches_ || cached_epoch_ != epoch) {
      epoch_batches_ = make_batches(*corpus_, train_pool_, cfg_.batch_size, cfg_.max_len, cfg_.seed, epoch);
      cached_epoch_ = epoch;
    }
    const auto& batch = (*epoch_batches_)[static_cast<std::size_t>(step_) % batches_per_epoch_];
    auto b = assemble_batch(*corpus_, batch.sequence_ids, cfg_.policy, model_.config().max_depth, labels_);
    optim_->zero_grad();
    auto l = depth_loss(model_, b, cfg_.policy);
    const double loss = static_cast<double>(l.loss.item());
    TrainRecord rec;
    rec.step = step_;
    rec.split = "train";
    rec.loss = loss;
    rec.perplexity = std::exp(loss);
    rec.tokens_at_depth = l.tokens_at_depth;
    report_.records.push_back(rec);
    if (!std::isfinite(loss)) {
      if (!out_dir_.empty()) report_.write_jsonl(out_dir_ / "report.jsonl");
      throw NumericError("training diverged: non-finite loss at step " + std::to_string(step_));
    }
    l.loss.backward();
    optim_->step();
    ++step_;
    if (step_ % cfg_.eval_every == 0 || step_ == total_steps_) validate();
    if (cfg_.checkpoint_every > 0 && !out_dir_.empty() && step_ % cfg_.checkpoint_every == 0) {
      save_checkpoint(state_checkpoint(), out_dir_ / "state.tah");
    }
    return loss;
  }

  void run_until(std::int64_t step) {
    step = std::min(step, total_steps_);
    while (step_ < step) train_step();
    if (!out_dir_.empty()) report_.write_jsonl(out_dir_ / "report.jsonl");
  }
  void run() { run_until(total_steps_); }

  /// Validation loss at the current parameters; updates the best
  /// checkpoint when perplexity improves.
  TrainRecord validate() {
    const auto& pool = val_pool_.empty() ? train_pool_ : val_pool_;
    auto rec = evaluate_loss(model_, *corpus_, pool, cfg_.policy, labels_, cfg_.batch_size, cfg_.max_len);
    rec.step = step_;
    report_.records.push_back(rec);
    if (rec.perplexity < report_.best_value) {
      report_.best_value = rec.perplexity;
      report_.best_step = step_;
      best_ = model_.clone();
      best_->set_trainable(false);
      if (!out_dir_.empty()) {
        auto ck = backbone_checkpoint(*best_);
        ck.meta["step"] = step_;
        ck.meta["policy"] = to_string(cfg_.policy);
        report_.best_checkpoint = save_content_addressed(ck, out_dir_, "backbone").string();
      }
    }
    return rec;
  }

  /// Everything needed to continue this run: parameters, optimizer
  /// moments, step, report and the best parameters so far.
  Checkpoint state_checkpoint() const {
    auto ck = backbone_checkpoint(model_);
    ck.meta["kind"] = "backbone_train_state";
    ck.meta["step"] = step_;
    ck.meta["train"] = cfg_;
    ck.meta["report"] = report_;
    put_optimizer(ck, *optim_);
    if (best_) put_params(ck, best_->params(), "best.");
    return ck;
  }

  void restore(const Checkpoint& ck) {
    if (ck.meta.value("kind", std::string()) != "backbone_train_state") {
      throw IoError("checkpoint is not a backbone training state");
    }
    auto params = model_.params();
    load_params(ck, params);
    load_optimizer(ck, *optim_);
    step_ = ck.meta.at("step").get<std::int64_t>();
    report_ = ck.meta.at("report").get<TrainReport>();
    if (report_.best_step >= 0) {
      best_ = model_.clone();
      auto bp = best_->params();
      load_params(ck, bp, "best.");
      best_->set_trainable(false);
    }
  }

 private:
  Backbone<T> model_;
  const TokenizedCorpus* corpus_;
  TrainConfig cfg_;
  std::filesystem::path out_dir_;
  LabelIndex labels_;
  std::vector<std::size_t> train_pool_, val_pool_;
  std::size_t batches_per_epoch_ = 0;
  std::int64_t total_steps_ = 0;
  std::int64_t step_ = 0;
  std::optional<AdamW<T>> optim_;
  std::optional<std::vector<Batch>> epoch_batches_;
  std::uint64_t cached_epoch_ = 0;
  std::optional<Backbone<T>> best_;
  TrainReport report_;
};

/// Single-pass reference training (max_depth forced to 1).
template <class T>
BackboneTrainer<T> reference_trainer(ModelConfig mcfg, const TokenizedCorpus& corpus, TrainConfig cfg,
                                     std::filesystem::path out_dir = {}) {
  mcfg.max_depth = 1;
  mcfg.vocab_size = static_cast<int>(corpus.vocab.size());
  cfg.policy = Policy::standard;
  return BackboneTrainer<T>(Backbone<T>::init(mcfg, derive_seed(cfg.seed, "reference-init")), corpus, cfg, nullptr,
                            std::move(out_dir));
}

/// A max_depth model whose θ is copied from `reference` and whose Δ is
/// freshly initialised (so depth 1 reproduces the reference exactly).
template <class T>
Backbone<T> deepen(const Backbone<T>& reference, int max_depth, std::uint64_t seed) {
  auto cfg = reference.config();
  cfg.max_depth = max_depth;
  auto m = Backbone<T>::init(cfg, derive_seed(seed, "deepen"));
  auto src = reference.base_params();
  auto dst = m.base_params();
  if (src.size() != dst.size()) throw ContractError("deepen: parameter layout mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto out = dst[i].tensor.mutable_data();
    const auto& in = src[i].tensor.vec();
    std::copy(in.begin(), in.end(), out.begin());
  }
  return m;
}

}  // namespace tah
