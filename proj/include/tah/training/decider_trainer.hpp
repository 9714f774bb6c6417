#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "tah/decider/decider.hpp"
#include "tah/training/trainer.hpp"

namespace tah {

/// Supervised gate decisions: one feature row per (token, depth d) with
/// d <= min(max_depth - 1, oracle depth), labelled c^(d) = [d < depth].
template <class T>
struct DecisionSet {
  Tensor<T> features;  // [n x 3h]
  std::vector<std::uint8_t> labels;
  std::vector<int> gate_depth;
  std::vector<std::size_t> sequence;
  std::vector<std::size_t> index;

  std::size_t size() const { return labels.size(); }
};

/// Runs the frozen backbone at oracle depths over `pool` and collects the
/// tap features of every consulted gate.
template <class T>
DecisionSet<T> collect_decisions(const Backbone<T>& model, const TokenizedCorpus& corpus,
                                 const std::vector<std::size_t>& pool, const IterationLabels& labels,
                                 std::size_t batch_size, std::size_t max_len) {
  NoGradGuard no_grad;
  const int dmax = model.config().max_depth;
  if (dmax < 2) throw ConfigError("decider training needs max_depth >= 2");
  LabelIndex index(labels);
  const auto h = static_cast<std::size_t>(model.config().hidden_dim);
  DecisionSet<T> out;
  std::vector<T> feats;
  std::vector<std::size_t> kept;
  for (auto s : pool)
    if (corpus.sequences.at(s).ids.size() <= max_len) kept.push_back(s);
  for (std::size_t start = 0; start < kept.size(); start += batch_size) {
    std::vector<std::size_t> ids(kept.begin() + static_cast<std::ptrdiff_t>(start),
                                 kept.begin() + static_cast<std::ptrdiff_t>(std::min(kept.size(), start + batch_size)));
    auto b = assemble_batch(corpus, ids, Policy::oracle, dmax, index);
    auto trace = run_passes(model, b.rows, fixed_depths<T>(b.depth));
    for (const auto& pass : trace.passes) {
      if (pass.depth >= dmax) break;
      for (std::size_t li = 0; li < pass.rows.size(); ++li) {
        const auto r = pass.rows[li];
        if (b.targets[r] < 0) continue;
        for (const auto& t : pass.taps) {
          const auto* p = t.vec().data() + li * h;
          feats.insert(feats.end(), p, p + h);
        }
        out.labels.push_back(pass.depth < b.depth[r] ? 1 : 0);
        out.gate_depth.push_back(pass.depth);
        out.sequence.push_back(b.sequence_ids[b.rows[r].segment]);
        out.index.push_back(static_cast<std::size_t>(b.rows[r].position));
      }
    }
  }
  if (out.labels.empty()) throw EmptyCorpusError("no gate decisions to learn from");
  out.features = Tensor<T>({out.labels.size(), 3 * h}, std::move(feats));
  return out;
}

/// Continuation probabilities for every row of a decision set.
template <class T>
std::vector<double> predict(const Decider<T>& decider, const DecisionSet<T>& set) {
  NoGradGuard no_grad;
  auto p = decider.forward(set.features);
  return std::vector<double>(p.vec().begin(), p.vec().end());
}

/// Stage 2: trains the decider on a frozen backbone with weighted BCE.
/// Class weights come from the training split only.
template <class T>
class DeciderTrainer {
 public:
  DeciderTrainer(const Backbone<T>& backbone, const TokenizedCorpus& corpus, const IterationLabels& labels,
                 TrainConfig cfg, std::filesystem::path out_dir = {})
      : cfg_(std::move(cfg)), out_dir_(std::move(out_dir)) {
    cfg_.validate();
    if (backbone.any_trainable()) throw ContractError("decider training requires a frozen backbone");
    if (labels.max_depth != backbone.config().max_depth) {
      throw AlignmentError("label max_depth does not match the backbone");
    }
    const auto train_pool = corpus.indices(Split::train);
    auto val_pool = corpus.indices(Split::validation);
    if (train_pool.empty()) throw EmptyCorpusError("no training sequences");
    if (val_pool.empty()) val_pool = train_pool;
    IterationLabels train_labels;
    train_labels.max_depth = labels.max_depth;
    for (const auto& t : labels.tokens)
      if (corpus.split.at(t.sequence) == Split::train) train_labels.tokens.push_back(t);
    weights_ = class_weights(train_labels, cfg_.max_class_weight);
    train_ = collect_decisions(backbone, corpus, train_pool, labels, 64, cfg_.max_len);
    val_ = collect_decisions(backbone, corpus, val_pool, labels, 64, cfg_.max_len);
    per_epoch_ = (train_.size() + cfg_.batch_size - 1) / cfg_.batch_size;
    total_steps_ = cfg_.steps > 0 ? cfg_.steps
                                  : static_cast<std::int64_t>(per_epoch_) * static_cast<std::int64_t>(cfg_.epochs);
    decider_ = Decider<T>::init(static_cast<std::size_t>(backbone.config().hidden_dim), cfg_.decider_widths,
                                derive_seed(cfg_.seed, "decider-init"));
    auto ocfg = cfg_.optim;
    ocfg.total_steps = total_steps_;
    optim_.emplace(decider_.params(), ocfg);
  }

  std::int64_t total_steps() const { return total_steps_; }
  std::int64_t step() const { return step_; }
  const Decider<T>& decider() const { return decider_; }
  const Decider<T>& best_decider() const { return best_ ? *best_ : decider_; }
  const TrainReport& report() const { return report_; }
  const TrainConfig& config() const { return cfg_; }
  const ClassWeights& weights() const { return weights_; }
  const DecisionSet<T>& train_set() const { return train_; }
  const DecisionSet<T>& validation_set() const { return val_; }

  double train_step() {
    if (step_ >= total_steps_) throw ContractError("training already finished");
    const auto epoch = static_cast<std::uint64_t>(step_) / per_epoch_;
    if (!order_ || cached_epoch_ != epoch) {
      order_.emplace(train_.size());
      std::iota(order_->begin(), order_->end(), std::size_t{0});
      Rng rng(derive_seed(cfg_.seed, "decider-order", epoch));
      std::shuffle(order_->begin(), order_->end(), rng);
      cached_epoch_ = epoch;
    }
    const std::size_t k = static_cast<std::size_t>(step_) % per_epoch_;
    const std::size_t lo = k * cfg_.batch_size, hi = std::min(train_.size(), lo + cfg_.batch_size);
    std::vector<std::size_t> idx(order_->begin() + static_cast<std::ptrdiff_t>(lo),
                                 order_->begin() + static_cast<std::ptrdiff_t>(hi));
    std::vector<T> lab, w;
    for (auto i : idx) {
      lab.push_back(static_cast<T>(train_.labels[i]));
      w.push_back(static_cast<T>(train_.labels[i] ? weights_.weight[static_cast<std::size_t>(train_.gate_depth[i] - 1)]
                                                  : 1.0));
    }
    optim_->zero_grad();
    auto probs = decider_.forward(gather_rows(train_.features, idx));
    auto loss = scale(decider_loss<T>(probs, lab, w), static_cast<T>(1.0 / static_cast<double>(idx.size())));
    const double value = static_cast<double>(loss.item());
    TrainRecord rec;
    rec.step = step_;
    rec.split = "train";
    rec.loss = value;
    rec.perplexity = std::exp(value);
    report_.records.push_back(rec);
    if (!std::isfinite(value)) {
      if (!out_dir_.empty()) report_.write_jsonl(out_dir_ / "report.jsonl");
      throw NumericError("decider training diverged at step " + std::to_string(step_));
    }
    loss.backward();
    optim_->step();
    ++step_;
    if (step_ % cfg_.eval_every == 0 || step_ == total_steps_) validate();
    if (cfg_.checkpoint_every > 0 && !out_dir_.empty() && step_ % cfg_.checkpoint_every == 0) {
      save_checkpoint(state_checkpoint(), out_dir_ / "state.tah");
    }
    return value;
  }

  void run_until(std::int64_t step) {
    step = std::min(step, total_steps_);
    while (step_ < step) train_step();
    if (!out_dir_.empty()) report_.write_jsonl(out_dir_ / "report.jsonl");
  }
  void run() { run_until(total_steps_); }

  /// Weighted BCE and accuracy (threshold 0.5) on the validation
  /// decisions; keeps the decider with the lowest validation loss.
  TrainRecord validate() {
    const auto p = predict(decider_, val_);
    double loss = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double c = std::clamp(p[i], 1e-7, 1.0 - 1e-7);
      const double w = weights_.weight[static_cast<std::size_t>(val_.gate_depth[i] - 1)];
      loss -= val_.labels[i] ? w * std::log(c) : std::log(1.0 - c);
    }
    loss /= static_cast<double>(p.size());
    const auto acc = decider_accuracy(p, val_.labels, 0.5);
    TrainRecord rec;
    rec.step = step_;
    rec.split = "validation";
    rec.loss = loss;
    rec.perplexity = std::exp(loss);
    rec.extra = {{"accuracy", acc.accuracy}, {"balanced_accuracy", acc.balanced_accuracy}};
    report_.records.push_back(rec);
    if (loss < report_.best_value) {
      report_.best_value = loss;
      report_.best_step = step_;
      best_ = clone_decider(decider_);
      if (!out_dir_.empty()) {
        auto ck = decider_checkpoint(*best_);
        ck.meta["step"] = step_;
        report_.best_checkpoint = save_content_addressed(ck, out_dir_, "decider").string();
      }
    }
    return rec;
  }

  static Checkpoint decider_checkpoint(const Decider<T>& d) {
    Checkpoint ck;
    ck.meta["decider"] = {{"hidden_dim", d.hidden_dim()}, {"widths", d.widths()}};
    put_params(ck, d.params());
    return ck;
  }

  Checkpoint state_checkpoint() const {
    auto ck = decider_checkpoint(decider_);
    ck.meta["kind"] = "decider_train_state";
    ck.meta["step"] = step_;
    ck.meta["train"] = cfg_;
    ck.meta["report"] = report_;
    put_optimizer(ck, *optim_);
    if (best_) put_params(ck, best_->params(), "best.");
    return ck;
  }

  void restore(const Checkpoint& ck) {
    if (ck.meta.value("kind", std::string()) != "decider_train_state") {
      throw IoError("checkpoint is not a decider training state");
    }
    auto params = decider_.params();
    load_params(ck, params);
    load_optimizer(ck, *optim_);
    step_ = ck.meta.at("step").get<std::int64_t>();
    report_ = ck.meta.at("report").get<TrainReport>();
    if (report_.best_step >= 0) {
      best_ = clone_decider(decider_);
      auto bp = best_->params();
      load_params(ck, bp, "best.");
    }
  }

 private:
  static Decider<T> clone_decider(const Decider<T>& d) {
    auto c = Decider<T>::init(d.hidden_dim(), d.widths(), 0);
    auto dst = c.params();
    const auto src = d.params();
    for (std::size_t i = 0; i < src.size(); ++i) {
      auto out = dst[i].tensor.mutable_data();
      std::copy(src[i].tensor.vec().begin(), src[i].tensor.vec().end(), out.begin());
    }
    c.set_trainable(false);
    return c;
  }

  TrainConfig cfg_;
  std::filesystem::path out_dir_;
  ClassWeights weights_;
  DecisionSet<T> train_, val_;
  std::size_t per_epoch_ = 1;
  std::int64_t total_steps_ = 0;
  std::int64_t step_ = 0;
  Decider<T> decider_;
  std::optional<AdamW<T>> optim_;
  std::optional<std::vector<std::size_t>> order_;
  std::uint64_t cached_epoch_ = 0;
  std::optional<Decider<T>> best_;
  TrainReport report_;
};

template <class T>
Decider<T> decider_from_checkpoint(const Checkpoint& ck) {
  if (!ck.meta.contains("decider")) throw IoError("checkpoint: no decider header");
  const auto& m = ck.meta.at("decider");
  auto d = Decider<T>::init(m.at("hidden_dim").get<std::size_t>(), m.at("widths").get<std::vector<std::size_t>>(), 0);
  auto params = d.params();
  load_params(ck, params);
  d.set_trainable(false);
  return d;
}

}  // namespace tah
