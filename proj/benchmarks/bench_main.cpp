#include <benchmark/benchmark.h>

#include <vector>

#include "nodulenet/cropping.hpp"
#include "nodulenet/evaluation.hpp"
#include "nodulenet/layers.hpp"
#include "nodulenet/model.hpp"
#include "nodulenet/rng.hpp"
#include "nodulenet/training.hpp"
#include "nodulenet/volume.hpp"

namespace {

using namespace nodulenet;

Tensor<float> random_tensor(Shape shape, RngStream& rng) {
  Tensor<float> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return t;
}

// Args: batch, channels, edge.
void BM_Conv3dForward(benchmark::State& state) {
  RngStream rng(1);
  const auto n = static_cast<std::size_t>(state.range(0));
  const int c = static_cast<int>(state.range(1));
  const auto e = static_cast<std::size_t>(state.range(2));
  const nn::ConvSpec spec{c, c, 3, 1, 1};
  const auto x = random_tensor({n, static_cast<std::size_t>(c), e, e, e}, rng);
  const auto w = random_tensor(spec.weight_shape(), rng);
  for (auto _ : state) benchmark::DoNotOptimize(nn::conv3d_forward(x, w, spec));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(x.numel()));
}
BENCHMARK(BM_Conv3dForward)->Args({4, 8, 32})->Args({4, 16, 16})->Args({16, 8, 32})->Unit(benchmark::kMillisecond);

void BM_Conv3dBackward(benchmark::State& state) {
  RngStream rng(2);
  const auto n = static_cast<std::size_t>(state.range(0));
  const int c = static_cast<int>(state.range(1));
  const auto e = static_cast<std::size_t>(state.range(2));
  const nn::ConvSpec spec{c, c, 3, 1, 1};
  const auto x = random_tensor({n, static_cast<std::size_t>(c), e, e, e}, rng);
  const auto w = random_tensor(spec.weight_shape(), rng);
  const auto dy = random_tensor(nn::conv_output_shape(x.shape, spec), rng);
  Tensor<float> dx, dw;
  for (auto _ : state) {
    nn::conv3d_backward(x, w, dy, spec, &dx, dw);
    benchmark::DoNotOptimize(dx.data.data());
  }
}
BENCHMARK(BM_Conv3dBackward)->Args({4, 8, 32})->Args({4, 16, 16})->Unit(benchmark::kMillisecond);

// One optimizer step of the tiny network on a [batch, 2, 64, 64, 64] batch.
void BM_TrainingStep(benchmark::State& state) {
  RngStream rng(3);
  auto cfg = ModelConfig::tiny(1);
  cfg.stem_pool = state.range(1) != 0;
  auto params = build_model<float>(cfg, rng);
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = random_tensor({n, 2, 64, 64, 64}, rng);
  std::vector<int> targets(n);
  for (std::size_t i = 0; i < n; ++i) targets[i] = static_cast<int>(i % 2);
  OptimizerState<float> opt;
  for (auto _ : state) {
    auto tape = make_tape<float>();
    const auto logits = forward(params, x, Mode::train, tape.get());
    const auto loss = compute_loss(logits, targets, Task::binary);
    const auto grads = backward(params, *tape, loss.grad);
    update_running_stats(params, *tape);
    adam_step(params.tensors, grads, opt, 1e-3);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_TrainingStep)->Args({16, 1})->Args({4, 0})->Unit(benchmark::kMillisecond);

void BM_TtaPredict(benchmark::State& state) {
  RngStream rng(4);
  auto cfg = ModelConfig::tiny(4);
  cfg.stem_pool = true;
  const auto params = build_model<float>(cfg, rng);
  Patch p(64);
  for (auto& v : p.data) v = static_cast<float>(rng.uniform());
  for (auto _ : state) benchmark::DoNotOptimize(tta_predict(params, p));
}
BENCHMARK(BM_TtaPredict)->Unit(benchmark::kMillisecond);

// Arg: box side; 96 takes the resize path.
void BM_ExtractPatch(benchmark::State& state) {
  RngStream rng(5);
  CtVolume v;
  v.dims = {256, 256, 160};
  v.voxels.resize(v.dims.count());
  for (auto& x : v.voxels) x = static_cast<float>(rng.uniform());
  v.normalized = true;
  const int side = static_cast<int>(state.range(0));
  const BoundingBox b{100, 100, 60, 100 + side, 100 + side, 60 + side};
  for (auto _ : state) benchmark::DoNotOptimize(extract_patch(v, b));
}
BENCHMARK(BM_ExtractPatch)->Arg(12)->Arg(40)->Arg(96)->Unit(benchmark::kMicrosecond);

void BM_RocAuc(benchmark::State& state) {
  RngStream rng(6);
  const auto n = static_cast<std::size_t>(state.range(0));
  std::vector<double> scores(n);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    scores[i] = rng.uniform();
    labels[i] = static_cast<int>(i % 2);
  }
  for (auto _ : state) benchmark::DoNotOptimize(roc_auc(scores, labels));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_RocAuc)->Arg(1348)->Arg(100000);

}  // namespace

BENCHMARK_MAIN();
