#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lcforge/common.hpp"
#include "lcforge/data.hpp"
#include "lcforge/model.hpp"
#include "lcforge/ops.hpp"

namespace lcforge {

struct TrainConfig {
  int64_t epochs = 75;
  double lr0 = 1e-2;
  double momentum = 0.9;        // Nesterov
  double weight_decay = 1e-2;   // coupled L2, trainable params only
  int64_t batch_size = 256;
  double label_smoothing = 0.1;
  uint64_t seed = 0;
  int64_t eval_every = 1;
  int64_t train_subset = 0;     // 0 = full train split, else first-k samples
  bool augment_enabled = true;
  AugmentPolicy augment{};

  void validate() const {
    if (epochs < 1 || batch_size < 1 || eval_every < 1) {
      throw ValidationError("epochs, batch_size and eval_every must be positive");
    }
    if (lr0 <= 0 || momentum < 0 || weight_decay < 0) {
      throw ValidationError("lr0 must be positive; momentum and weight_decay non-negative");
    }
    if (label_smoothing < 0 || label_smoothing >= 1) {
      throw ValidationError("label_smoothing must be in [0,1)");
    }
    if (train_subset < 0) throw ValidationError("train_subset must be >= 0");
  }
};

/// Per-step cosine annealing from lr0 down to 0 over total_steps.
inline double cosine_lr(int64_t step, int64_t total_steps, double lr0) {
  if (total_steps < 1) throw ValidationError("cosine_lr needs total_steps >= 1");
  if (step < 0 || step > total_steps) {
    throw ValidationError("cosine_lr step " + std::to_string(step) + " outside [0," +
                          std::to_string(total_steps) + "]");
  }
  if (step == 0) return lr0;
  if (step == total_steps) return 0.0;
  return lr0 * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total_steps)));
}

/// Momentum buffers, index-aligned with the model registry (empty slots for
/// frozen params and buffers).
template <typename T>
struct SgdState {
  std::vector<Tensor<T>> velocity;

  template <typename M>
  void init(const M& model) {
    velocity.clear();
    for (const auto& e : model.registry()) {
      if (e.is_buffer || e.frozen) {
        velocity.emplace_back();
      } else {
        velocity.emplace_back(e.tensor.shape());
      }
    }
  }
};

/// One SGD step with Nesterov momentum and coupled weight decay:
///   g <- grad + wd*w;  v <- mu*v + g;  w <- w - lr*(g + mu*v)
/// Frozen params are excluded entirely (no decay, no update).
template <typename T>
void sgd_nesterov_step(std::vector<ParamEntry<T>>& registry, SgdState<T>& state, double lr,
                       double mu, double wd) {
  if (state.velocity.size() != registry.size()) {
    throw Error("optimizer state does not match the model registry");
  }
  for (size_t i = 0; i < registry.size(); ++i) {
    auto& e = registry[i];
    if (e.is_buffer || e.frozen) continue;
    if (!e.tensor.has_grad()) {
      throw Error("missing gradient for trainable parameter " + e.name);
    }
    auto w = e.tensor.values();
    auto g = e.tensor.grad();
    auto v = state.velocity[i].values();
    const T lrT = static_cast<T>(lr), muT = static_cast<T>(mu), wdT = static_cast<T>(wd);
    for (size_t j = 0; j < w.size(); ++j) {
      if (!std::isfinite(static_cast<double>(g[j]))) {
        throw Error("NaN/Inf gradient in parameter " + e.name + " at index " + std::to_string(j));
      }
      const T gj = g[j] + wdT * w[j];
      v[j] = muT * v[j] + gj;
      w[j] -= lrT * (gj + muT * v[j]);
    }
  }
}

template <typename T>
void drop_param_grads(std::vector<ParamEntry<T>>& registry) {
  for (auto& e : registry) {
    if (!e.is_buffer) e.tensor.drop_grad();
  }
}

struct EpochRecord {
  int64_t epoch = 0;
  double train_loss = 0;
  double val_acc = -1;  // -1 until first evaluation
  double lr = 0;
};
using History = std::vector<EpochRecord>;

inline void write_history_csv(const std::string& path, const History& history) {
  std::ofstream out(path, std::ios::binary);  // binary keeps LF endings everywhere
  if (!out) throw Error("cannot write " + path);
  out << "epoch,train_loss,val_acc,lr\n";
  char line[160];
  for (const auto& r : history) {
    std::snprintf(line, sizeof(line), "%lld,%.10g,%.10g,%.10g\n",
                  static_cast<long long>(r.epoch), r.train_loss, r.val_acc, r.lr);
    out << line;
  }
  if (!out.flush()) throw Error("failed flushing " + path);
}

/// Argmax with ties broken toward the lower class index.
template <typename T>
int32_t argmax_row(const T* row, int64_t n) {
  int32_t best = 0;
  for (int64_t j = 1; j < n; ++j) {
    if (row[j] > row[best]) best = static_cast<int32_t>(j);
  }
  return best;
}

template <typename T>
std::vector<int32_t> predictions(ResNetLC<T>& model, const Dataset& ds, int64_t batch_size) {
  std::vector<int32_t> preds;
  preds.reserve(static_cast<size_t>(ds.count));
  Batcher<T> batcher(ds, batch_size, 0, /*training=*/false);
  batcher.begin_epoch(0);
  while (auto batch = batcher.next()) {
    Tape<T> tape(false);
    auto logits = model.forward(tape, batch->x, Mode::kEval);
    const int64_t n = logits.dim(0), c = logits.dim(1);
    for (int64_t i = 0; i < n; ++i) {
      preds.push_back(argmax_row(logits.values().data() + i * c, c));
    }
  }
  return preds;
}

/// Fraction of correct argmax predictions, evaluated with running BN stats.
template <typename T>
double evaluate(ResNetLC<T>& model, const Dataset& ds, int64_t batch_size) {
  auto preds = predictions(model, ds, batch_size);
  int64_t correct = 0;
  for (int64_t i = 0; i < ds.count; ++i) {
    correct += (preds[static_cast<size_t>(i)] == ds.labels[static_cast<size_t>(i)]);
  }
  return static_cast<double>(correct) / static_cast<double>(ds.count);
}

/// Full training loop: augment -> forward -> loss -> backward -> step with
/// a per-step cosine schedule. The final model is simply the last epoch's.
/// start_epoch > 0 resumes a run; the schedule and data streams depend only
/// on (seed, epoch, batch), so a resumed run replays the uninterrupted one.
/// stop_after (when >= 0) ends the run early without shortening the
/// schedule horizon, for checkpoint-and-resume.
template <typename T>
History train_loop(ResNetLC<T>& model, SgdState<T>& opt, const Dataset& train_ds,
                   const Dataset& val_ds, const TrainConfig& cfg, int64_t start_epoch = 0,
                   History history = {},
                   const std::function<void(const EpochRecord&)>& on_epoch = nullptr,
                   const std::function<void(int64_t, double)>& on_step = nullptr,
                   int64_t stop_after = -1) {
  cfg.validate();
  if (opt.velocity.empty()) opt.init(model);
  AugmentPolicy policy =
      cfg.augment_enabled ? cfg.augment : AugmentPolicy{0, train_ds.height, 0.0};
  Batcher<T> batcher(train_ds, cfg.batch_size, cfg.seed, /*training=*/true, policy);
  const int64_t steps_per_epoch = batcher.batches_per_epoch();
  const int64_t total_steps = cfg.epochs * steps_per_epoch;
  const int64_t last_epoch = stop_after < 0 ? cfg.epochs : std::min(stop_after, cfg.epochs);

  for (int64_t epoch = start_epoch; epoch < last_epoch; ++epoch) {
    batcher.begin_epoch(epoch);
    double loss_sum = 0;
    const double lr_first = cosine_lr(epoch * steps_per_epoch, total_steps, cfg.lr0);
    int64_t step = epoch * steps_per_epoch;
    while (auto batch = batcher.next()) {
      const double lr = cosine_lr(step, total_steps, cfg.lr0);
      drop_param_grads(model.registry());
      Tape<T> tape;
      auto logits = model.forward(tape, batch->x, Mode::kTrain);
      auto loss = softmax_cross_entropy(tape, logits, std::span<const int32_t>(batch->labels),
                                        cfg.label_smoothing);
      tape.backward(loss);
      sgd_nesterov_step(model.registry(), opt, lr, cfg.momentum, cfg.weight_decay);
      loss_sum += static_cast<double>(loss.values()[0]) * static_cast<double>(batch->labels.size());
      if (on_step) on_step(step, static_cast<double>(loss.values()[0]));
      ++step;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train_ds.count);
    rec.lr = lr_first;
    const bool eval_now = ((epoch + 1) % cfg.eval_every == 0) || (epoch + 1 == cfg.epochs);
    if (eval_now) {
      rec.val_acc = evaluate(model, val_ds, cfg.batch_size);
    } else if (!history.empty()) {
      rec.val_acc = history.back().val_acc;  // carry the last measurement
    }
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return history;
}

}  // namespace lcforge
