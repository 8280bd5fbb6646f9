#pragma once

#include <array>
#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nodulenet/layers.hpp"
#include "nodulenet/rng.hpp"
#include "nodulenet/tensor.hpp"

namespace nodulenet {

enum class BlockKind { basic, bottleneck };

/// 3D residual network: stem conv (kernel 3, stride 1) + norm + ReLU,
/// optional stem max-pool, four stages of residual blocks (stride 2 at the
/// entry of stages 2-4, projection shortcuts only where the shape changes),
/// global average pool and a fully-connected head.
struct ModelConfig {
  BlockKind block_kind = BlockKind::bottleneck;
  std::array<int, 4> blocks_per_stage{3, 4, 6, 3};
  int base_width = 64;
  int num_outputs = 4;
  int input_channels = 2;
  nn::NormKind norm = nn::NormKind::batch;
  bool stem_pool = false;

  void validate() const;

  /// Output channels of the last stage (the head's input width).
  int feature_channels() const;
  /// Total spatial downsampling factor before global pooling.
  int downsampling() const;

  static ModelConfig resnet50(int num_outputs);
  /// Basic blocks [1,1,1,1], width 8.
  static ModelConfig tiny(int num_outputs = 1);

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

/// Learnable tensors plus batch-norm running statistics ("buffers"), in a
/// fixed order determined by the config.
template <typename T>
struct ModelParams {
  ModelConfig config;
  std::vector<NamedTensor<T>> tensors;
  std::vector<NamedTensor<T>> buffers;

  std::size_t parameter_count() const;
  const Tensor<T>& tensor(std::string_view name) const;
  Tensor<T>& tensor(std::string_view name);
};

template <typename T>
using Gradients = std::vector<Tensor<T>>;

template <typename To, typename From>
ModelParams<To> params_cast(const ModelParams<From>& p) {
  ModelParams<To> out;
  out.config = p.config;
  for (const auto& t : p.tensors) out.tensors.push_back({t.name, tensor_cast<To>(t.value)});
  for (const auto& t : p.buffers) out.buffers.push_back({t.name, tensor_cast<To>(t.value)});
  return out;
}

/// Kaiming fan-in normal for convs, ones/zeros for norm scale/bias,
/// U(-1/sqrt(in), 1/sqrt(in)) for the head weight, zero head bias.
template <typename T>
ModelParams<T> build_model(const ModelConfig& cfg, RngStream& rng);

enum class Mode { train, eval };

/// Intermediates kept by a forward pass for the backward pass.
template <typename T>
struct ForwardTape;

template <typename T>
struct ForwardTapeDeleter {
  void operator()(ForwardTape<T>* t) const;
};

template <typename T>
using TapePtr = std::unique_ptr<ForwardTape<T>, ForwardTapeDeleter<T>>;

template <typename T>
TapePtr<T> make_tape();

/// logits [N, num_outputs]. In eval mode rows are independent of each other.
/// Spatial extents need not divide the downsampling factor. With a tape, the
/// tape keeps a reference to x, which must outlive the backward pass.
template <typename T>
Tensor<T> forward(const ModelParams<T>& params, const Tensor<T>& x, Mode mode = Mode::eval,
                  ForwardTape<T>* tape = nullptr);

/// Reverse-mode gradients of the loss wrt every learnable tensor, given
/// d loss / d logits. Uses intermediates recorded by forward().
template <typename T>
Gradients<T> backward(const ModelParams<T>& params, const ForwardTape<T>& tape, const Tensor<T>& loss_grad);

/// Recomputing variant: runs forward in `mode` and then backward.
template <typename T>
Gradients<T> backward(const ModelParams<T>& params, const Tensor<T>& x, const Tensor<T>& loss_grad,
                      Mode mode = Mode::train);

/// Folds the batch statistics of a training-mode forward into the running
/// statistics (exponential average with `momentum`).
template <typename T>
void update_running_stats(ModelParams<T>& params, const ForwardTape<T>& tape, double momentum = 0.1);

}  // namespace nodulenet
