#include "nodulenet/model.hpp"

#include <cmath>

#include "nodulenet/error.hpp"

namespace nodulenet {

using nn::ConvSpec;
using nn::NormKind;
using nn::NormSpec;

void ModelConfig::validate() const {
  for (int b : blocks_per_stage) {
    if (b < 1) throw ValidationError("blocks_per_stage entries must be >= 1");
  }
  if (base_width < 1) throw ValidationError("base_width must be >= 1");
  if (num_outputs != 1 && num_outputs != 4 && num_outputs != 5) throw ValidationError("num_outputs must be 1, 4 or 5");
  if (input_channels < 1) throw ValidationError("input_channels must be >= 1");
}

int ModelConfig::feature_channels() const {
  const int expansion = block_kind == BlockKind::bottleneck ? 4 : 1;
  return base_width * 8 * expansion;
}

int ModelConfig::downsampling() const { return stem_pool ? 16 : 8; }

ModelConfig ModelConfig::resnet50(int num_outputs) {
  ModelConfig c;
  c.block_kind = BlockKind::bottleneck;
  c.blocks_per_stage = {3, 4, 6, 3};
  c.base_width = 64;
  c.num_outputs = num_outputs;
  return c;
}

ModelConfig ModelConfig::tiny(int num_outputs) {
  ModelConfig c;
  c.block_kind = BlockKind::basic;
  c.blocks_per_stage = {1, 1, 1, 1};
  c.base_width = 8;
  c.num_outputs = num_outputs;
  return c;
}

namespace {

enum class Init { kaiming, ones, zeros, head_uniform };

struct TensorSpec {
  std::string name;
  Shape shape;
  Init init;
  std::size_t fan_in = 1;
};

/// conv -> norm, with the ReLU (when present) applied by the owner.
struct UnitPlan {
  ConvSpec conv;
  std::size_t weight = 0;
  NormSpec norm;
  std::size_t gamma = 0, beta = 0;
  std::size_t running_mean = 0, running_var = 0;
};

struct BlockPlan {
  std::vector<UnitPlan> units;  // ReLU after every unit except the last
  std::optional<UnitPlan> projection;
};

struct NetworkPlan {
  UnitPlan stem;
  bool stem_pool = false;
  std::vector<BlockPlan> blocks;
  std::size_t fc_weight = 0, fc_bias = 0;
  int features = 0;
  int outputs = 0;
};

class PlanBuilder {
 public:
  explicit PlanBuilder(const ModelConfig& cfg) : cfg_(cfg) {}

  UnitPlan unit(const std::string& prefix, int in, int out, int kernel, int stride) {
    UnitPlan u;
    u.conv = {in, out, kernel, stride, kernel / 2};
    u.weight = add_param(prefix + ".conv.weight", u.conv.weight_shape(), Init::kaiming, u.conv.fan_in());
    u.norm.kind = cfg_.norm;
    u.norm.channels = out;
    u.norm.groups = cfg_.norm == NormKind::group ? nn::default_groups(out) : 1;
    const Shape cshape{static_cast<std::size_t>(out)};
    u.gamma = add_param(prefix + ".norm.gamma", cshape, Init::ones);
    u.beta = add_param(prefix + ".norm.beta", cshape, Init::zeros);
    u.running_mean = add_buffer(prefix + ".norm.running_mean", cshape, Init::zeros);
    u.running_var = add_buffer(prefix + ".norm.running_var", cshape, Init::ones);
    return u;
  }

  std::size_t add_param(std::string name, Shape shape, Init init, std::size_t fan_in = 1) {
    params.push_back({std::move(name), std::move(shape), init, fan_in});
    return params.size() - 1;
  }
  std::size_t add_buffer(std::string name, Shape shape, Init init) {
    buffers.push_back({std::move(name), std::move(shape), init, 1});
    return buffers.size() - 1;
  }

  std::vector<TensorSpec> params;
  std::vector<TensorSpec> buffers;

 private:
  const ModelConfig& cfg_;
};

NetworkPlan make_plan(const ModelConfig& cfg, std::vector<TensorSpec>* params = nullptr,
                      std::vector<TensorSpec>* buffers = nullptr) {
  cfg.validate();
  PlanBuilder b(cfg);
  NetworkPlan plan;
  plan.stem = b.unit("stem", cfg.input_channels, cfg.base_width, 3, 1);
  plan.stem_pool = cfg.stem_pool;

  const bool bottleneck = cfg.block_kind == BlockKind::bottleneck;
  const int expansion = bottleneck ? 4 : 1;
  int channels = cfg.base_width;
  for (int stage = 0; stage < 4; ++stage) {
    const int width = cfg.base_width << stage;
    const int out_channels = width * expansion;
    for (int blk = 0; blk < cfg.blocks_per_stage[static_cast<std::size_t>(stage)]; ++blk) {
      const int stride = (stage > 0 && blk == 0) ? 2 : 1;
      const std::string prefix = "stage" + std::to_string(stage + 1) + ".block" + std::to_string(blk);
      BlockPlan bp;
      if (bottleneck) {
        bp.units.push_back(b.unit(prefix + ".unit1", channels, width, 1, 1));
        bp.units.push_back(b.unit(prefix + ".unit2", width, width, 3, stride));
        bp.units.push_back(b.unit(prefix + ".unit3", width, out_channels, 1, 1));
      } else {
        bp.units.push_back(b.unit(prefix + ".unit1", channels, width, 3, stride));
        bp.units.push_back(b.unit(prefix + ".unit2", width, out_channels, 3, 1));
      }
      if (stride != 1 || channels != out_channels) {
        bp.projection = b.unit(prefix + ".projection", channels, out_channels, 1, stride);
      }
      plan.blocks.push_back(std::move(bp));
      channels = out_channels;
    }
  }
  plan.features = channels;
  plan.outputs = cfg.num_outputs;
  plan.fc_weight = b.add_param("head.weight", {static_cast<std::size_t>(cfg.num_outputs), static_cast<std::size_t>(channels)},
                               Init::head_uniform, static_cast<std::size_t>(channels));
  plan.fc_bias = b.add_param("head.bias", {static_cast<std::size_t>(cfg.num_outputs)}, Init::zeros);
  if (params) *params = std::move(b.params);
  if (buffers) *buffers = std::move(b.buffers);
  return plan;
}

template <typename T>
Tensor<T> materialize(const TensorSpec& spec, RngStream& rng) {
  Tensor<T> t(spec.shape);
  switch (spec.init) {
    case Init::kaiming: {
      const double stddev = std::sqrt(2.0 / static_cast<double>(spec.fan_in));
      for (T& v : t.data) v = static_cast<T>(stddev * rng.normal());
      break;
    }
    case Init::head_uniform: {
      const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
      for (T& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
      break;
    }
    case Init::ones:
      std::fill(t.data.begin(), t.data.end(), T{1});
      break;
    case Init::zeros:
      break;
  }
  return t;
}

template <typename T>
using Activation = std::shared_ptr<const Tensor<T>>;

}  // namespace

template <typename T>
struct UnitTape {
  Activation<T> input;
  nn::NormCache<T> norm;
};

template <typename T>
struct BlockTape {
  Activation<T> input;
  std::vector<UnitTape<T>> units;
  std::vector<Activation<T>> relu_outputs;  // after units[0..n-2]
  std::optional<UnitTape<T>> projection;
  Activation<T> output;                      // after the final ReLU
};

template <typename T>
struct ForwardTape {
  Mode mode = Mode::eval;
  Shape input_shape;
  UnitTape<T> stem;
  Activation<T> stem_out;
  std::vector<std::uint32_t> pool_argmax;
  std::vector<BlockTape<T>> blocks;
  Shape pooled_input_shape;
  Tensor<T> features;
};

template <typename T>
void ForwardTapeDeleter<T>::operator()(ForwardTape<T>* t) const {
  delete t;
}

template <typename T>
TapePtr<T> make_tape() {
  return TapePtr<T>(new ForwardTape<T>());
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.value.numel();
  return n;
}

template <typename T>
const Tensor<T>& ModelParams<T>::tensor(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t.value;
  for (const auto& t : buffers)
    if (t.name == name) return t.value;
  throw ValidationError("unknown tensor: " + std::string(name));
}

template <typename T>
Tensor<T>& ModelParams<T>::tensor(std::string_view name) {
  return const_cast<Tensor<T>&>(static_cast<const ModelParams<T>&>(*this).tensor(name));
}

template <typename T>
ModelParams<T> build_model(const ModelConfig& cfg, RngStream& rng) {
  std::vector<TensorSpec> params, buffers;
  make_plan(cfg, &params, &buffers);
  ModelParams<T> out;
  out.config = cfg;
  for (const auto& s : params) out.tensors.push_back({s.name, materialize<T>(s, rng)});
  for (const auto& s : buffers) out.buffers.push_back({s.name, materialize<T>(s, rng)});
  return out;
}

namespace {

template <typename T>
void check_layout(const ModelParams<T>& p, const std::vector<TensorSpec>& params, const std::vector<TensorSpec>& buffers) {
  if (p.tensors.size() != params.size() || p.buffers.size() != buffers.size()) {
    throw ValidationError("model parameters do not match their config");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (p.tensors[i].value.shape != params[i].shape) throw ValidationError("parameter shape mismatch: " + params[i].name);
  }
  for (std::size_t i = 0; i < buffers.size(); ++i) {
    if (p.buffers[i].value.shape != buffers[i].shape) throw ValidationError("buffer shape mismatch: " + buffers[i].name);
  }
}

template <typename T>
NetworkPlan checked_plan(const ModelParams<T>& p) {
  std::vector<TensorSpec> params, buffers;
  NetworkPlan plan = make_plan(p.config, &params, &buffers);
  check_layout(p, params, buffers);
  return plan;
}

template <typename T>
Tensor<T> run_unit(const ModelParams<T>& p, const UnitPlan& u, Activation<T> input, bool training, UnitTape<T>* tape) {
  Tensor<T> conv = nn::conv3d_forward(*input, p.tensors[u.weight].value, u.conv);
  nn::NormCache<T> local;
  Tensor<T> y = nn::norm_forward(conv, p.tensors[u.gamma].value, p.tensors[u.beta].value,
                                 p.buffers[u.running_mean].value, p.buffers[u.running_var].value, u.norm, training,
                                 tape ? &tape->norm : &local);
  if (tape) tape->input = std::move(input);
  return y;
}

template <typename T>
void add_grad(Gradients<T>& grads, std::size_t index, Tensor<T>&& g) {
  grads[index] = std::move(g);
}

/// Gradient wrt the unit input, given the gradient wrt the norm output.
template <typename T>
Tensor<T> unit_backward(const ModelParams<T>& p, const UnitPlan& u, const UnitTape<T>& tape, const Tensor<T>& dy,
                        Gradients<T>& grads, bool need_dx) {
  Tensor<T> dgamma, dbeta, dweight;
  Tensor<T> dconv = nn::norm_backward(dy, p.tensors[u.gamma].value, tape.norm, u.norm, dgamma, dbeta);
  add_grad(grads, u.gamma, std::move(dgamma));
  add_grad(grads, u.beta, std::move(dbeta));
  Tensor<T> dx;
  nn::conv3d_backward(*tape.input, p.tensors[u.weight].value, dconv, u.conv, need_dx ? &dx : nullptr, dweight);
  add_grad(grads, u.weight, std::move(dweight));
  return dx;
}

}  // namespace

template <typename T>
Tensor<T> forward(const ModelParams<T>& params, const Tensor<T>& x, Mode mode, ForwardTape<T>* tape) {
  const NetworkPlan plan = checked_plan(params);
  const ModelConfig& cfg = params.config;
  if (x.rank() != 5 || x.dim(1) != static_cast<std::size_t>(cfg.input_channels)) {
    throw ValidationError("forward: expected input [N, " + std::to_string(cfg.input_channels) + ", D, H, W], got " +
                          shape_to_string(x.shape));
  }
  // Any extent works; each stride-2 layer maps n to ceil(n / 2).
  for (int a = 2; a < 5; ++a) {
    if (x.dim(static_cast<std::size_t>(a)) < 1) throw ValidationError("forward: empty spatial dims " + shape_to_string(x.shape));
  }
  const bool training = mode == Mode::train;
  if (tape) {
    *tape = ForwardTape<T>{};
    tape->mode = mode;
    tape->input_shape = x.shape;
  }

  // Non-owning alias: the tape refers to the caller's x, which must outlive it.
  Activation<T> input(std::shared_ptr<const Tensor<T>>(), &x);
  Tensor<T> stem = run_unit(params, plan.stem, input, training, tape ? &tape->stem : nullptr);
  nn::relu_inplace(stem);
  auto current = std::make_shared<const Tensor<T>>(std::move(stem));
  if (plan.stem_pool) {
    if (tape) tape->stem_out = current;
    Tensor<T> pooled = nn::maxpool3d_forward(*current, tape ? &tape->pool_argmax : nullptr);
    current = std::make_shared<const Tensor<T>>(std::move(pooled));
  }

  for (const auto& bp : plan.blocks) {
    BlockTape<T>* bt = nullptr;
    if (tape) {
      tape->blocks.emplace_back();
      bt = &tape->blocks.back();
      bt->input = current;
      bt->units.resize(bp.units.size());
    }
    Activation<T> h = current;
    Tensor<T> last;
    for (std::size_t i = 0; i < bp.units.size(); ++i) {
      Tensor<T> y = run_unit(params, bp.units[i], h, training, bt ? &bt->units[i] : nullptr);
      if (i + 1 < bp.units.size()) {
        nn::relu_inplace(y);
        h = std::make_shared<const Tensor<T>>(std::move(y));
        if (bt) bt->relu_outputs.push_back(h);
      } else {
        last = std::move(y);
      }
    }
    if (bp.projection) {
      std::optional<UnitTape<T>> pt;
      if (bt) pt.emplace();
      Tensor<T> s = run_unit(params, *bp.projection, current, training, bt ? &*pt : nullptr);
      if (bt) bt->projection = std::move(pt);
      for (std::size_t i = 0; i < last.numel(); ++i) last.data[i] += s.data[i];
    } else {
      for (std::size_t i = 0; i < last.numel(); ++i) last.data[i] += current->data[i];
    }
    nn::relu_inplace(last);
    current = std::make_shared<const Tensor<T>>(std::move(last));
    if (bt) bt->output = current;
  }

  Tensor<T> features = nn::global_avg_pool_forward(*current);
  Tensor<T> logits = nn::linear_forward(features, params.tensors[plan.fc_weight].value, params.tensors[plan.fc_bias].value);
  if (tape) {
    tape->pooled_input_shape = current->shape;
    tape->features = std::move(features);
  }
  return logits;
}

template <typename T>
Gradients<T> backward(const ModelParams<T>& params, const ForwardTape<T>& tape, const Tensor<T>& loss_grad) {
  const NetworkPlan plan = checked_plan(params);
  if (tape.blocks.size() != plan.blocks.size()) throw ValidationError("backward: missing forward intermediates");
  const std::size_t batch = tape.input_shape.empty() ? 0 : tape.input_shape[0];
  if (loss_grad.shape != Shape{batch, static_cast<std::size_t>(plan.outputs)}) {
    throw ValidationError("backward: loss gradient shape " + shape_to_string(loss_grad.shape));
  }

  Gradients<T> grads(params.tensors.size());
  Tensor<T> dfeat, dw, db;
  nn::linear_backward(tape.features, params.tensors[plan.fc_weight].value, loss_grad, &dfeat, dw, db);
  grads[plan.fc_weight] = std::move(dw);
  grads[plan.fc_bias] = std::move(db);

  Tensor<T> d = nn::global_avg_pool_backward(dfeat, tape.pooled_input_shape);
  for (std::size_t bi = plan.blocks.size(); bi-- > 0;) {
    const BlockPlan& bp = plan.blocks[bi];
    const BlockTape<T>& bt = tape.blocks[bi];
    nn::relu_backward_inplace(d, *bt.output);

    Tensor<T> dshort;
    if (bp.projection) {
      dshort = unit_backward(params, *bp.projection, *bt.projection, d, grads, true);
    } else {
      dshort = d;
    }
    Tensor<T> g = std::move(d);
    for (std::size_t i = bp.units.size(); i-- > 0;) {
      if (i + 1 < bp.units.size()) nn::relu_backward_inplace(g, *bt.relu_outputs[i]);
      g = unit_backward(params, bp.units[i], bt.units[i], g, grads, true);
    }
    for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += dshort.data[i];
    d = std::move(g);
  }

  if (plan.stem_pool) {
    d = nn::maxpool3d_backward(d, tape.pool_argmax, tape.stem_out->shape);
    nn::relu_backward_inplace(d, *tape.stem_out);
  } else {
    nn::relu_backward_inplace(d, *tape.blocks.front().input);
  }
  if (!tape.stem.input) throw ValidationError("backward: missing forward intermediates (stem input)");
  unit_backward(params, plan.stem, tape.stem, d, grads, false);
  return grads;
}

template <typename T>
Gradients<T> backward(const ModelParams<T>& params, const Tensor<T>& x, const Tensor<T>& loss_grad, Mode mode) {
  auto tape = make_tape<T>();
  forward(params, x, mode, tape.get());
  return backward(params, *tape, loss_grad);
}

template <typename T>
void update_running_stats(ModelParams<T>& params, const ForwardTape<T>& tape, double momentum) {
  if (tape.mode != Mode::train) return;
  const NetworkPlan plan = checked_plan(params);
  auto apply = [&](const UnitPlan& u, const UnitTape<T>& t) {
    nn::update_running_stats(params.buffers[u.running_mean].value, params.buffers[u.running_var].value, t.norm, momentum);
  };
  apply(plan.stem, tape.stem);
  for (std::size_t bi = 0; bi < plan.blocks.size(); ++bi) {
    for (std::size_t i = 0; i < plan.blocks[bi].units.size(); ++i) apply(plan.blocks[bi].units[i], tape.blocks[bi].units[i]);
    if (plan.blocks[bi].projection) apply(*plan.blocks[bi].projection, *tape.blocks[bi].projection);
  }
}

#define NODULENET_INSTANTIATE_MODEL(T)                                                                   \
  template struct ModelParams<T>;                                                                        \
  template struct ForwardTapeDeleter<T>;                                                                 \
  template TapePtr<T> make_tape<T>();                                                                    \
  template ModelParams<T> build_model<T>(const ModelConfig&, RngStream&);                                \
  template Tensor<T> forward(const ModelParams<T>&, const Tensor<T>&, Mode, ForwardTape<T>*);            \
  template Gradients<T> backward(const ModelParams<T>&, const ForwardTape<T>&, const Tensor<T>&);        \
  template Gradients<T> backward(const ModelParams<T>&, const Tensor<T>&, const Tensor<T>&, Mode);       \
  template void update_running_stats(ModelParams<T>&, const ForwardTape<T>&, double);

NODULENET_INSTANTIATE_MODEL(float)
NODULENET_INSTANTIATE_MODEL(double)

#undef NODULENET_INSTANTIATE_MODEL

}  // namespace nodulenet
