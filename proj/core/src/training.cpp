#include "nodulenet/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "json.hpp"
#include "nodulenet/error.hpp"
#include "nodulenet/evaluation.hpp"
#include "nodulenet/parallel.hpp"
#include "nodulenet/volume.hpp"

namespace nodulenet {

void TrainConfig::validate() const {
  if (!(lr_start > lr_end && lr_end > 0.0)) throw ValidationError("learning rates must satisfy lr_start > lr_end > 0");
  if (max_epochs < 1) throw ValidationError("max_epochs must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (early_stop_patience < 0) throw ValidationError("early_stop_patience must be >= 0");
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_start, double lr_end) {
  if (total_steps < 1) throw ValidationError("total_steps must be >= 1");
  step = std::clamp<std::int64_t>(step, 0, total_steps);
  // The endpoints are returned verbatim; lr_end + (lr_start - lr_end) need
  // not round back to lr_start.
  if (step == 0) return lr_start;
  if (step == total_steps) return lr_end;
  const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + std::cos(phase));
}

template <typename T>
bool adam_step(std::vector<NamedTensor<T>>& params, const Gradients<T>& grads, OptimizerState<T>& state, double lr) {
  if (grads.size() != params.size()) throw ValidationError("gradient count does not match parameter count");
  if (!(lr > 0.0)) throw ValidationError("learning rate must be positive");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape != params[i].value.shape) throw ValidationError("gradient shape mismatch for " + params[i].name);
  }
  for (const auto& g : grads) {
    for (T v : g.data) {
      if (!std::isfinite(static_cast<double>(v))) {
        ++state.skipped;
        return false;
      }
    }
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.value.shape);
      state.v.emplace_back(p.value.shape);
    }
  }
  state.t += 1;
  const double b1 = state.beta1;
  const double b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].value.data;
    auto& m = state.m[i].data;
    auto& v = state.v[i].data;
    const auto& g = grads[i].data;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * gj;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double m_hat = mj / c1;
      const double v_hat = vj / c2;
      p[j] = static_cast<T>(static_cast<double>(p[j]) - lr * m_hat / (std::sqrt(v_hat) + state.eps));
    }
  }
  return true;
}

template <typename T>
LossResult<T> compute_loss(const Tensor<T>& logits, std::span<const int> targets, Task task) {
  if (logits.rank() != 2) throw ValidationError("logits must be [N, outputs]");
  const std::size_t n = logits.dim(0);
  const std::size_t k = logits.dim(1);
  if (n == 0) throw ValidationError("empty batch");
  if (targets.size() != n) throw ValidationError("target count does not match batch size");
  if (k != static_cast<std::size_t>(num_outputs(task))) throw ValidationError("logit width does not match task");

  LossResult<T> out;
  out.grad = Tensor<T>(logits.shape);
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = logits.sample(i);
    auto grow = out.grad.sample(i);
    const int t = targets[i];
    if (task == Task::binary) {
      if (t != 0 && t != 1) throw ValidationError("binary targets must be 0 or 1");
      const double z = static_cast<double>(row[0]);
      // log(1 + exp(-|z|)) form keeps large logits finite.
      total += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
      const double p = 1.0 / (1.0 + std::exp(-z));
      grow[0] = static_cast<T>((p - t) * inv_n);
    } else {
      if (t < 0 || static_cast<std::size_t>(t) >= k) throw ValidationError("class index out of range");
      double peak = static_cast<double>(row[0]);
      for (std::size_t c = 1; c < k; ++c) peak = std::max(peak, static_cast<double>(row[c]));
      double z = 0.0;
      for (std::size_t c = 0; c < k; ++c) z += std::exp(static_cast<double>(row[c]) - peak);
      const double log_z = std::log(z) + peak;
      total += log_z - static_cast<double>(row[t]);
      for (std::size_t c = 0; c < k; ++c) {
        const double p = std::exp(static_cast<double>(row[c]) - log_z);
        grow[c] = static_cast<T>((p - (static_cast<int>(c) == t ? 1.0 : 0.0)) * inv_n);
      }
    }
  }
  out.loss = total * inv_n;
  return out;
}

Patch make_training_patch(const TrainSample& s, const AugmentConfig& aug, int crop_size, RngStream rng) {
  if (!s.volume) throw ValidationError("training sample without a volume: " + s.nodule_id);
  // Separate child streams per stage so toggling one stage never shifts the
  // draws of another.
  RngStream jitter_rng = rng.fork(0);
  RngStream dropout_rng = rng.fork(1);
  RngStream geometric_rng = rng.fork(2);
  RngStream intensity_rng = rng.fork(3);
  const BoundingBox box = aug.jitter_enabled ? jitter_box(s.bbox, s.volume->dims, aug.jitter, jitter_rng) : s.bbox;
  Patch p = extract_patch(*s.volume, box, crop_size);
  p.nodule_id = s.nodule_id;
  mask_dropout(p, aug.mask_dropout_p, dropout_rng);
  geometric_augs(p, aug, geometric_rng);
  intensity_augs(p, aug, intensity_rng);
  return p;
}

std::string TrainLog::to_jsonl() const {
  std::string out;
  for (const auto& e : epochs) {
    nlohmann::json j{{"epoch", e.epoch},         {"lr", e.lr},       {"train_loss", e.train_loss},
                     {"val_f1", e.val_f1},       {"best", e.best},   {"steps", e.steps},
                     {"skipped_steps", e.skipped_steps}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

namespace {

enum StreamId : std::uint64_t { kInitStream = 1, kShuffleStream = 2, kAugmentStream = 3 };

double validation_f1(const ModelParams<float>& params, std::span<const Patch> patches, std::span<const int> targets,
                     Task task, int batch_size) {
  const auto probs = predict_single_view(params, patches, batch_size);
  std::vector<Prediction> preds(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) preds[i] = {patches[i].nodule_id, probs[i], targets[i]};
  return classification_metrics(preds, task).f1;
}

}  // namespace

TrainResult train_fold(std::span<const TrainSample> train_set, std::span<const TrainSample> val_set,
                       const ModelConfig& model_cfg, const TrainConfig& cfg, const AugmentConfig& aug, int crop_size,
                       const EpochCallback& on_epoch) {
  cfg.validate();
  aug.validate();
  model_cfg.validate();
  if (train_set.empty()) throw ValidationError("empty training set");
  if (val_set.empty()) throw ValidationError("empty validation set");
  if (model_cfg.num_outputs != num_outputs(cfg.task)) throw ValidationError("model outputs do not match the task");

  const RngStream root(cfg.seed);
  RngStream init_rng = root.fork(kInitStream);
  ModelParams<float> params = build_model<float>(model_cfg, init_rng);
  OptimizerState<float> opt;

  // Validation patches are canonical and fixed for the whole run.
  std::vector<Patch> val_patches(val_set.size());
  std::vector<int> val_targets(val_set.size());
  parallel_for(val_set.size(), [&](std::size_t i) {
    val_patches[i] = extract_patch(*val_set[i].volume, val_set[i].bbox, crop_size);
    val_patches[i].nodule_id = val_set[i].nodule_id;
  });
  for (std::size_t i = 0; i < val_set.size(); ++i) val_targets[i] = val_set[i].target;

  const std::size_t n = train_set.size();
  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
  const std::int64_t steps_per_epoch = static_cast<std::int64_t>((n + batch - 1) / batch);
  // Updates are numbered 0..n-1; the last one runs at lr_end.
  const std::int64_t schedule_span = std::max<std::int64_t>(1, steps_per_epoch * cfg.max_epochs - 1);
  const std::size_t per_sample = 2 * Patch::voxels_per_channel(crop_size);
  const std::size_t e = static_cast<std::size_t>(crop_size);

  TrainResult result;
  int since_best = 0;
  std::int64_t step = 0;
  std::vector<std::size_t> order(n);

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    RngStream shuffle_rng = root.fork(kShuffleStream).fork(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.index(i)]);
    const RngStream epoch_aug = root.fork(kAugmentStream).fork(static_cast<std::uint64_t>(epoch));

    EpochLog log;
    log.epoch = epoch;
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t b = std::min(batch, n - start);
      Tensor<float> x({b, 2, e, e, e});
      std::vector<int> targets(b);
      parallel_for(b, [&](std::size_t i) {
        const std::size_t pos = start + i;
        const Patch p = make_training_patch(train_set[order[pos]], aug, crop_size, epoch_aug.fork(pos));
        std::copy(p.data.begin(), p.data.end(), x.data.begin() + static_cast<std::ptrdiff_t>(i * per_sample));
      });
      for (std::size_t i = 0; i < b; ++i) targets[i] = train_set[order[start + i]].target;

      auto tape = make_tape<float>();
      const Tensor<float> logits = forward(params, x, Mode::train, tape.get());
      const LossResult<float> loss = compute_loss(logits, targets, cfg.task);
      const Gradients<float> grads = backward(params, *tape, loss.grad);
      const double lr = cosine_lr(step, schedule_span, cfg.lr_start, cfg.lr_end);
      if (adam_step(params.tensors, grads, opt, lr)) {
        update_running_stats(params, *tape);
      } else {
        ++log.skipped_steps;
      }
      loss_sum += loss.loss * static_cast<double>(b);
      log.lr = lr;
      ++log.steps;
      ++step;
    }
    log.train_loss = loss_sum / static_cast<double>(n);
    log.val_f1 = validation_f1(params, val_patches, val_targets, cfg.task, cfg.batch_size);

    if (result.log.best_epoch < 0 || log.val_f1 > result.log.best_f1) {
      log.best = true;
      result.log.best_epoch = epoch;
      result.log.best_f1 = log.val_f1;
      result.best = params;
      since_best = 0;
    } else {
      ++since_best;
    }
    result.log.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
    if (!log.best && since_best >= cfg.early_stop_patience) {
      result.log.early_stopped = epoch + 1 < cfg.max_epochs;
      break;
    }
  }
  return result;
}

template bool adam_step<float>(std::vector<NamedTensor<float>>&, const Gradients<float>&, OptimizerState<float>&,
                               double);
template bool adam_step<double>(std::vector<NamedTensor<double>>&, const Gradients<double>&, OptimizerState<double>&,
                                double);
template LossResult<float> compute_loss<float>(const Tensor<float>&, std::span<const int>, Task);
template LossResult<double> compute_loss<double>(const Tensor<double>&, std::span<const int>, Task);

}  // namespace nodulenet
