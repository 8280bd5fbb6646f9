#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "nodulenet/augment.hpp"
#include "nodulenet/cropping.hpp"
#include "nodulenet/model.hpp"
#include "nodulenet/task.hpp"

namespace nodulenet {

struct CtVolume;

struct TrainConfig {
  int max_epochs = 75;
  int batch_size = 64;
  double lr_start = 1e-3;
  double lr_end = 1e-5;
  Task task = Task::multiclass4;
  int early_stop_patience = 15;
  std::uint64_t seed = 0;

  void validate() const;
};

template <typename T>
struct OptimizerState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Steps rejected for non-finite gradients.
  std::int64_t skipped = 0;
};

/// lr_end + (lr_start - lr_end) * (1 + cos(pi * step / total)) / 2.
double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_start, double lr_end);

/// Bias-corrected Adam. Moments are created on the first call. Returns false
/// (and leaves params and moments untouched) when any gradient is non-finite.
template <typename T>
bool adam_step(std::vector<NamedTensor<T>>& params, const Gradients<T>& grads, OptimizerState<T>& state, double lr);

template <typename T>
struct LossResult {
  double loss = 0.0;
  Tensor<T> grad;  // d loss / d logits, same shape as logits
};

/// Mean softmax cross-entropy (class-index targets) or, for the binary task,
/// mean sigmoid BCE against {0,1} targets.
template <typename T>
LossResult<T> compute_loss(const Tensor<T>& logits, std::span<const int> targets, Task task);

/// A nodule as seen by the trainer: the cached normalized volume it lives in,
/// its box and its class index for the task.
struct TrainSample {
  const CtVolume* volume = nullptr;
  BoundingBox bbox;
  int target = 0;
  std::string nodule_id;
};

/// Jitter, extract, mask dropout, geometric then intensity transforms.
Patch make_training_patch(const TrainSample& s, const AugmentConfig& aug, int crop_size, RngStream rng);

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;  // at the last step of the epoch
  double train_loss = 0.0;
  double val_f1 = 0.0;
  bool best = false;
  int steps = 0;
  int skipped_steps = 0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  int best_epoch = -1;
  double best_f1 = 0.0;
  bool early_stopped = false;

  std::string to_jsonl() const;
};

struct TrainResult {
  ModelParams<float> best;
  TrainLog log;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains from scratch and keeps the parameters of the epoch with the best
/// validation F1 (single view, argmax or threshold 0.5).
TrainResult train_fold(std::span<const TrainSample> train_set, std::span<const TrainSample> val_set,
                       const ModelConfig& model_cfg, const TrainConfig& cfg, const AugmentConfig& aug,
                       int crop_size = kCropSize, const EpochCallback& on_epoch = {});

}  // namespace nodulenet
