#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

#include "nodulenet/model.hpp"

namespace nodulenet::testing {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_tensor;
  int checked = 0;
  int skipped_kinks = 0;
};

/// Central-difference check of backward() on `count` random parameters
/// against the scalar loss sum(logits * r). A parameter whose difference
/// quotients at h and h/2 disagree has a ReLU or max-pool switch inside
/// [w - h, w + h]; it is replaced by a fresh draw and counted as skipped.
template <typename T>
GradCheckResult check_gradients(ModelParams<T> params, const Tensor<T>& x, const Tensor<T>& r, Mode mode, double h,
                                int count, RngStream& rng) {
  const Gradients<T> grads = backward(params, x, r, mode);
  auto loss = [&] {
    const Tensor<T> y = forward(params, x, mode);
    double s = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += static_cast<double>(y.data[i]) * static_cast<double>(r.data[i]);
    return s;
  };
  auto quotient = [&](T& w, double step) {
    const T keep = w;
    w = static_cast<T>(keep + step);
    const double up = loss();
    w = static_cast<T>(keep - step);
    const double down = loss();
    w = keep;
    return (up - down) / (2 * step);
  };

  GradCheckResult out;
  int draws = 0;
  while (out.checked < count && draws < 20 * count) {
    const std::size_t t = static_cast<std::size_t>(draws++) % params.tensors.size();
    const std::size_t i = rng.index(params.tensors[t].value.numel());
    T& w = params.tensors[t].value.data[i];
    const double fd = quotient(w, h);
    const double fd_half = quotient(w, h / 2);
    const double scale = std::max({std::abs(fd), std::abs(fd_half), 1e-6});
    if (std::abs(fd - fd_half) > 1e-6 * scale) {
      ++out.skipped_kinks;
      continue;
    }
    const double an = static_cast<double>(grads[t].data[i]);
    const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
    if (rel > out.max_relative_error) {
      out.max_relative_error = rel;
      out.worst_tensor = params.tensors[t].name + "[" + std::to_string(i) + "]";
    }
    ++out.checked;
  }
  return out;
}

}  // namespace nodulenet::testing
