// Copyright 2026 The lka-adapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "lka/data.hpp"
#include "lka/model.hpp"
#include "lka/ops.hpp"
#include "lka/optim.hpp"
#include "lka/rng.hpp"

namespace lka {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double lr_max = 1e-3;
  double lr_min = 1e-5;
  double warmup_frac = 0.05;  // of total steps
  AdamWConfig adam;
  std::uint64_t seed = 0;  // mini-batch order

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(lr_min >= 0.0) || !(lr_max >= lr_min))
      throw ConfigError("need 0 <= lr_min <= lr_max, got lr_min=" + std::to_string(lr_min) +
                        " lr_max=" + std::to_string(lr_max));
    if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) throw ConfigError("warmup_frac must lie in [0, 1)");
    adam.validate();
  }

  std::uint64_t warmup_steps(std::uint64_t total) const {
    return static_cast<std::uint64_t>(std::floor(warmup_frac * static_cast<double>(total)));
  }
};

struct StepRecord {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::size_t correct = 0;
  std::size_t count = 0;

  bool operator==(const StepRecord&) const = default;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0.0;  // sample-weighted mean
  double train_top1 = 0.0;

  bool operator==(const EpochMetrics&) const = default;
};

// Index of the largest value; the first one wins ties.
inline std::size_t argmax_lowest(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

inline std::size_t count_correct(const Tensor& logits, std::span<const std::size_t> labels) {
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  if (labels.size() != B) throw ContractError("label count does not match logits batch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < B; ++i)
    if (argmax_lowest(logits.data().subspan(i * K, K)) == labels[i]) ++hits;
  return hits;
}

inline void check_compatible(const Model& m, const Dataset& ds) {
  const auto& c = m.cfg;
  if (ds.channels != c.channels || ds.height != c.image_size || ds.width != c.image_size)
    throw ContractError("dataset images are " + std::to_string(ds.channels) + "x" + std::to_string(ds.height) +
                        "x" + std::to_string(ds.width) + " but the model expects " + std::to_string(c.channels) +
                        "x" + std::to_string(c.image_size) + "x" + std::to_string(c.image_size));
  if (ds.classes > c.classes)
    throw ContractError("dataset has " + std::to_string(ds.classes) + " classes, model head has " +
                        std::to_string(c.classes));
}

// Stepwise trainer. The batch order of epoch e depends only on (seed, e), so
// a run can be resumed at any step from the parameters and optimizer state.
class Trainer {
 public:
  Trainer(Model& model, const Dataset& data, TrainConfig cfg) : model_(&model), data_(&data), cfg_(cfg) {
    cfg_.validate();
    if (data.empty()) throw ContractError("cannot train on an empty dataset");
    check_compatible(model, data);
    for (const auto& p : model.registry)
      if (p.trainable) params_.push_back(p.tensor);
  }

  std::size_t steps_per_epoch() const { return (data_->size() + cfg_.batch_size - 1) / cfg_.batch_size; }
  std::uint64_t total_steps() const { return static_cast<std::uint64_t>(steps_per_epoch()) * cfg_.epochs; }
  std::uint64_t step() const { return state_.step; }
  bool done() const { return step() >= total_steps(); }
  const TrainConfig& config() const { return cfg_; }
  const AdamWState& optimizer() const { return state_; }

  void restore(AdamWState state) {
    if (state.step > total_steps()) throw ContractError("resume step lies beyond the schedule");
    state_ = std::move(state);
  }

  std::vector<std::size_t> batch_indices(std::uint64_t step) const {
    const std::size_t epoch = static_cast<std::size_t>(step / steps_per_epoch());
    const std::size_t b = static_cast<std::size_t>(step % steps_per_epoch());
    const auto& perm = permutation(epoch);
    const std::size_t lo = b * cfg_.batch_size, hi = std::min(perm.size(), lo + cfg_.batch_size);
    return {perm.begin() + static_cast<std::ptrdiff_t>(lo), perm.begin() + static_cast<std::ptrdiff_t>(hi)};
  }

  StepRecord step_once() {
    if (done()) throw ContractError("training schedule already finished");
    StepRecord rec;
    rec.step = state_.step;
    rec.epoch = static_cast<std::size_t>(rec.step / steps_per_epoch());
    const auto idx = batch_indices(rec.step);
    const auto labels = data_->label_values(idx);

    Tape::current().clear();
    for (auto& p : params_) p.zero_grad();
    Tensor logits = model_forward(*model_, data_->images(idx));
    Tensor loss = cross_entropy(logits, labels);
    rec.loss = loss.item();
    rec.correct = count_correct(logits, labels);
    rec.count = labels.size();
    if (!std::isfinite(rec.loss)) throw Error("non-finite loss at step " + std::to_string(rec.step));
    backward(loss);

    const auto total = total_steps();
    rec.lr = cosine_lr(rec.step, total, cfg_.warmup_steps(total), cfg_.lr_max, cfg_.lr_min);
    adamw_step(params_, state_, rec.lr, cfg_.adam);
    return rec;
  }

  // Runs to the end of the schedule and summarizes each completed epoch.
  std::vector<EpochMetrics> run() {
    std::vector<EpochMetrics> history;
    EpochMetrics cur;
    std::size_t seen = 0, hits = 0;
    double loss_sum = 0.0;
    while (!done()) {
      const auto rec = step_once();
      loss_sum += rec.loss * static_cast<double>(rec.count);
      seen += rec.count;
      hits += rec.correct;
      if (step() % steps_per_epoch() == 0) {
        cur.epoch = rec.epoch;
        cur.loss = loss_sum / static_cast<double>(seen);
        cur.train_top1 = static_cast<double>(hits) / static_cast<double>(seen);
        history.push_back(cur);
        seen = hits = 0;
        loss_sum = 0.0;
      }
    }
    return history;
  }

 private:
  const std::vector<std::size_t>& permutation(std::size_t epoch) const {
    if (perm_epoch_ != epoch || perm_.empty()) {
      perm_ = data_->all_indices();
      Rng rng(derive_seed(cfg_.seed, 0x73687566, epoch));
      for (std::size_t i = perm_.size() - 1; i > 0; --i) std::swap(perm_[i], perm_[rng.below(i + 1)]);
      perm_epoch_ = epoch;
    }
    return perm_;
  }

  Model* model_;
  const Dataset* data_;
  TrainConfig cfg_;
  std::vector<Tensor> params_;
  AdamWState state_;
  mutable std::vector<std::size_t> perm_;
  mutable std::size_t perm_epoch_ = 0;
};

inline std::vector<EpochMetrics> train(Model& model, const Dataset& data, const TrainConfig& cfg) {
  Trainer t(model, data, cfg);
  return t.run();
}

// Top-1 accuracy over the whole set, in batches, without recording a tape.
inline double evaluate(const Model& model, const Dataset& data, std::size_t batch_size = 64) {
  if (data.empty()) throw ContractError("cannot evaluate on an empty dataset");
  check_compatible(model, data);
  NoGradGuard guard;
  std::size_t hits = 0;
  const auto all = data.all_indices();
  for (std::size_t lo = 0; lo < all.size(); lo += batch_size) {
    std::span<const std::size_t> idx(all.data() + lo, std::min(batch_size, all.size() - lo));
    hits += count_correct(model_forward(model, data.images(idx)), data.label_values(idx));
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

}  // namespace lka
