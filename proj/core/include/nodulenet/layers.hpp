#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "nodulenet/tensor.hpp"

// Layer kernels for [N, C, D, H, W] activations. Instantiated for float
// (training) and double (finite-difference checks).
namespace nodulenet::nn {

/// Cubic kernel, symmetric zero padding, no bias.
struct ConvSpec {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;
  int stride = 1;
  int padding = 1;

  std::size_t fan_in() const { return static_cast<std::size_t>(in_channels) * kernel * kernel * kernel; }
  Shape weight_shape() const {
    return {static_cast<std::size_t>(out_channels), static_cast<std::size_t>(in_channels),
            static_cast<std::size_t>(kernel), static_cast<std::size_t>(kernel), static_cast<std::size_t>(kernel)};
  }
};

int conv_output_extent(int n, const ConvSpec& spec);
Shape conv_output_shape(const Shape& input, const ConvSpec& spec);

template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& weight, const ConvSpec& spec);

/// dx is skipped when null. dweight is overwritten.
template <typename T>
void conv3d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy, const ConvSpec& spec,
                     Tensor<T>* dx, Tensor<T>& dweight);

enum class NormKind { batch, group };

struct NormSpec {
  NormKind kind = NormKind::batch;
  int channels = 1;
  int groups = 1;  // group norm only
  double eps = 1e-5;
};

/// Group count used for group norm: min(8, channels), reduced until it
/// divides the channel count.
int default_groups(int channels);

template <typename T>
struct NormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;     // per channel (batch) or per sample-group (group)
  std::vector<T> batch_mean;  // batch norm in training mode only
  std::vector<T> batch_var;   // unbiased
  bool used_batch_stats = false;
};

/// Batch norm uses batch statistics when `training` and running statistics
/// otherwise; group norm always normalizes per sample and group.
template <typename T>
Tensor<T> norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       const Tensor<T>& running_mean, const Tensor<T>& running_var, const NormSpec& spec,
                       bool training, NormCache<T>* cache);

template <typename T>
Tensor<T> norm_backward(const Tensor<T>& dy, const Tensor<T>& gamma, const NormCache<T>& cache, const NormSpec& spec,
                        Tensor<T>& dgamma, Tensor<T>& dbeta);

template <typename T>
void update_running_stats(Tensor<T>& running_mean, Tensor<T>& running_var, const NormCache<T>& cache,
                          double momentum);

template <typename T>
void relu_inplace(Tensor<T>& x);

/// Zeroes dy wherever the ReLU output y was not positive.
template <typename T>
void relu_backward_inplace(Tensor<T>& dy, const Tensor<T>& y);

/// 3x3x3 window, stride 2, padding 1 (padding never wins the max). Ties go
/// to the lowest x, then y, then z.
template <typename T>
Tensor<T> maxpool3d_forward(const Tensor<T>& x, std::vector<std::uint32_t>* argmax);

template <typename T>
Tensor<T> maxpool3d_backward(const Tensor<T>& dy, const std::vector<std::uint32_t>& argmax, const Shape& input_shape);

/// [N, C, D, H, W] -> [N, C]
template <typename T>
Tensor<T> global_avg_pool_forward(const Tensor<T>& x);

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& dy, const Shape& input_shape);

/// y = x W^T + b with W [out, in].
template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy, Tensor<T>* dx,
                     Tensor<T>& dweight, Tensor<T>& dbias);

}  // namespace nodulenet::nn
