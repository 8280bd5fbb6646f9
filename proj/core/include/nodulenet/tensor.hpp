#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace nodulenet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape);

/// Dense row-major tensor. Activations use [N, C, D, H, W] with W (the X
/// axis) fastest.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T{}) : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {}

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  /// Elements per leading-axis slice (e.g. one sample of a batch).
  std::size_t stride0() const { return shape.empty() ? 1 : numel() / shape[0]; }

  std::span<T> sample(std::size_t n) { return {data.data() + n * stride0(), stride0()}; }
  std::span<const T> sample(std::size_t n) const { return {data.data() + n * stride0(), stride0()}; }

  bool operator==(const Tensor&) const = default;
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  Tensor<To> out;
  out.shape = t.shape;
  out.data.assign(t.data.begin(), t.data.end());
  return out;
}

}  // namespace nodulenet
