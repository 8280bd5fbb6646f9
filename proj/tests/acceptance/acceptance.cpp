// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
// failure. `acceptance --only name[,name...]` runs a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "gradcheck.hpp"
#include "nodulenet/annotations.hpp"
#include "nodulenet/augment.hpp"
#include "nodulenet/cropping.hpp"
#include "nodulenet/evaluation.hpp"
#include "nodulenet/layers.hpp"
#include "nodulenet/model.hpp"
#include "nodulenet/parallel.hpp"
#include "nodulenet/pipeline.hpp"
#include "nodulenet/splits.hpp"
#include "nodulenet/synthetic.hpp"
#include "nodulenet/training.hpp"
#include "nodulenet/volume.hpp"
#include "test_util.hpp"

namespace nodulenet {
namespace {

using testing::random_tensor;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  // Records a failed check; only the first few messages are kept.
  void require(bool ok, const std::string& what) {
    if (ok) return;
    if (pass || failures < 5) detail << " FAILED[" << what << "]";
    pass = false;
    ++failures;
  }
  int failures = 0;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a.data[i] * b.data[i];
  return s;
}

// ---------------------------------------------------------------- gradients

constexpr double kFdStep = 1e-4;
constexpr double kFdTol = 1e-4;

// Largest relative error of central differences over every entry of `t`
// (or an evenly spaced subset of at most `max_checks`).
double layer_fd_error(Tensor<double>& t, const Tensor<double>& analytic, const std::function<double()>& f,
                      std::size_t max_checks = 300) {
  double worst = 0;
  const std::size_t step = std::max<std::size_t>(1, t.numel() / max_checks);
  for (std::size_t i = 0; i < t.numel(); i += step) {
    const double keep = t.data[i];
    t.data[i] = keep + kFdStep;
    const double up = f();
    t.data[i] = keep - kFdStep;
    const double down = f();
    t.data[i] = keep;
    const double fd = (up - down) / (2 * kFdStep);
    const double an = analytic.data[i];
    worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
  }
  return worst;
}

// Values spaced at least 1e-2 apart with |v| >= 5e-3, so no +-h step
// crosses a ReLU hinge or reorders a max-pool window.
Tensor<double> separated_tensor(const Shape& shape, RngStream& rng) {
  Tensor<double> t(shape);
  std::vector<std::size_t> order(t.numel());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  const double half = static_cast<double>(t.numel()) / 2;
  for (std::size_t i = 0; i < t.numel(); ++i) t.data[i] = (static_cast<double>(order[i]) - half + 0.5) * 1e-2;
  return t;
}

Outcome criterion_gradients() {
  Outcome out;
  const auto t0 = Clock::now();
  RngStream rng(1001);
  std::map<std::string, double> worst;
  auto note = [&](const std::string& layer, double err) { worst[layer] = std::max(worst[layer], err); };

  for (const auto& spec : {nn::ConvSpec{3, 4, 3, 1, 1}, nn::ConvSpec{3, 4, 3, 2, 1}, nn::ConvSpec{3, 5, 1, 2, 0}}) {
    auto x = random_tensor<double>({2, 3, 5, 6, 7}, rng);
    auto w = random_tensor<double>(spec.weight_shape(), rng);
    const auto y = nn::conv3d_forward(x, w, spec);
    const auto r = random_tensor<double>(y.shape, rng);
    Tensor<double> dx, dw;
    nn::conv3d_backward(x, w, r, spec, &dx, dw);
    auto loss = [&] { return dot(nn::conv3d_forward(x, w, spec), r); };
    const std::string name = spec.kernel == 1 ? "projection" : "conv";
    note(name, layer_fd_error(x, dx, loss));
    note(name, layer_fd_error(w, dw, loss));
  }

  for (nn::NormKind kind : {nn::NormKind::batch, nn::NormKind::group}) {
    for (bool training : {true, false}) {
      if (kind == nn::NormKind::group && !training) continue;
      const nn::NormSpec spec{kind, 4, 2, 1e-5};
      auto x = random_tensor<double>({3, 4, 3, 2, 4}, rng);
      auto gamma = random_tensor<double>({4}, rng, 0.5, 1.5);
      auto beta = random_tensor<double>({4}, rng);
      const auto rm = random_tensor<double>({4}, rng);
      const auto rv = random_tensor<double>({4}, rng, 0.5, 2.0);
      const auto r = random_tensor<double>(x.shape, rng);
      nn::NormCache<double> cache;
      nn::norm_forward(x, gamma, beta, rm, rv, spec, training, &cache);
      Tensor<double> dgamma, dbeta;
      const auto dx = nn::norm_backward(r, gamma, cache, spec, dgamma, dbeta);
      nn::NormCache<double>* const no_cache = nullptr;
      auto loss = [&] { return dot(nn::norm_forward(x, gamma, beta, rm, rv, spec, training, no_cache), r); };
      const std::string name = kind == nn::NormKind::group ? "group_norm" : (training ? "batch_norm" : "batch_norm_eval");
      note(name, layer_fd_error(x, dx, loss));
      note(name, layer_fd_error(gamma, dgamma, loss));
      note(name, layer_fd_error(beta, dbeta, loss));
    }
  }

  {
    auto x = separated_tensor({2, 3, 4, 4, 4}, rng);
    const auto r = random_tensor<double>(x.shape, rng);
    auto y = x;
    nn::relu_inplace(y);
    auto dx = r;
    nn::relu_backward_inplace(dx, y);
    note("relu", layer_fd_error(x, dx, [&] {
           auto z = x;
           nn::relu_inplace(z);
           return dot(z, r);
         }));
  }
  {
    auto x = separated_tensor({2, 2, 5, 6, 7}, rng);
    std::vector<std::uint32_t> argmax;
    const auto y = nn::maxpool3d_forward(x, &argmax);
    const auto r = random_tensor<double>(y.shape, rng);
    const auto dx = nn::maxpool3d_backward(r, argmax, x.shape);
    note("maxpool", layer_fd_error(x, dx, [&] { return dot(nn::maxpool3d_forward(x, nullptr), r); }));
  }
  {
    auto a = random_tensor<double>({2, 3, 3, 3, 3}, rng);
    auto b = random_tensor<double>(a.shape, rng);
    const auto r = random_tensor<double>(a.shape, rng);
    auto loss = [&] {
      auto s = a;
      for (std::size_t i = 0; i < s.numel(); ++i) s.data[i] += b.data[i];
      return dot(s, r);
    };
    note("residual_add", layer_fd_error(a, r, loss));
    note("residual_add", layer_fd_error(b, r, loss));
  }
  {
    auto x = random_tensor<double>({2, 3, 3, 4, 5}, rng);
    const auto r = random_tensor<double>({2, 3}, rng);
    const auto dx = nn::global_avg_pool_backward(r, x.shape);
    note("global_avg_pool", layer_fd_error(x, dx, [&] { return dot(nn::global_avg_pool_forward(x), r); }));
  }
  {
    auto x = random_tensor<double>({3, 6}, rng);
    auto w = random_tensor<double>({4, 6}, rng);
    auto b = random_tensor<double>({4}, rng);
    const auto r = random_tensor<double>({3, 4}, rng);
    Tensor<double> dx, dw, db;
    nn::linear_backward(x, w, r, &dx, dw, db);
    auto loss = [&] { return dot(nn::linear_forward(x, w, b), r); };
    note("linear", layer_fd_error(x, dx, loss));
    note("linear", layer_fd_error(w, dw, loss));
    note("linear", layer_fd_error(b, db, loss));
  }

  // Whole tiny network (residual adds and projection shortcuts included),
  // eval mode with randomized running statistics.
  int checked = 0, skipped = 0;
  for (int outputs : {1, 4}) {
    auto params = build_model<double>(ModelConfig::tiny(outputs), rng);
    for (auto& b : params.buffers) {
      const bool var = b.name.ends_with("running_var");
      for (auto& v : b.value.data) v = var ? rng.uniform(0.5, 2.0) : rng.uniform(-0.2, 0.2);
    }
    for (auto& t : params.tensors)
      if (t.name.ends_with(".beta") || t.name == "head.bias")
        for (auto& v : t.value.data) v = rng.uniform(-0.3, 0.3);
    const auto x = random_tensor<double>({2, 2, 8, 8, 8}, rng, 0.0, 1.0);
    const auto r = random_tensor<double>({2, static_cast<std::size_t>(outputs)}, rng);
    const auto res = testing::check_gradients(params, x, r, Mode::eval, kFdStep, 300, rng);
    note("tiny_model_" + std::to_string(outputs), res.max_relative_error);
    checked += res.checked;
    skipped += res.skipped_kinks;
    out.require(res.checked == 300, "tiny model: too few kink-free parameters");
  }

  double overall = 0;
  for (const auto& [layer, err] : worst) {
    overall = std::max(overall, err);
    out.require(err <= kFdTol, layer + " rel err " + std::to_string(err));
  }
  const double secs = seconds_since(t0);
  out.require(secs < 60.0, "runtime");
  out.detail << " max_rel_err=" << overall << " layers=" << worst.size() << " model_params_checked=" << checked
             << " kink_skips=" << skipped << " h=" << kFdStep << " time=" << secs << "s";
  return out;
}

// ------------------------------------------------------------------ metrics

double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

bool close(double a, double b, double tol = 1e-15) { return std::abs(a - b) <= tol; }

Outcome criterion_metrics() {
  Outcome out;
  RngStream rng(1002);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.index(199);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.index(10)) / 9.0;
      y[i] = static_cast<int>(rng.index(2));
    }
    y[0] = 0;
    y[1] = 1;
    worst = std::max(worst, std::abs(roc_auc(s, y) - pairwise_auc(s, y)));
  }
  out.require(worst <= 1e-12, "auc vs pairwise " + std::to_string(worst));

  // Binary fixture: TP 2, FP 1, FN 1, TN 6.
  {
    const double p[10] = {0.9, 0.8, 0.7, 0.2, 0.1, 0.3, 0.4, 0.2, 0.1, 0.45};
    const int t[10] = {1, 1, 0, 1, 0, 0, 0, 0, 0, 0};
    std::vector<Prediction> preds;
    for (int i = 0; i < 10; ++i) preds.push_back({"b" + std::to_string(i), {p[i]}, t[i]});
    const auto r = classification_metrics(preds, Task::binary);
    out.require(r.confusion == std::vector<std::vector<std::size_t>>{{6, 1}, {1, 2}}, "binary confusion");
    out.require(close(r.precision, 2.0 / 3) && close(r.recall, 2.0 / 3) && close(r.f1, 2.0 / 3), "binary P/R/F1");
  }
  // Four-class fixture. Per class (P, R, F1): (2/3, 2/3, 2/3), (1/3, 1/2, 2/5),
  // (2/3, 2/3, 2/3), (1, 1/2, 2/3).
  {
    const int truth[10] = {0, 0, 0, 1, 1, 2, 2, 2, 3, 3};
    const int pred[10] = {0, 0, 1, 1, 2, 2, 2, 0, 3, 1};
    std::vector<Prediction> preds;
    for (int i = 0; i < 10; ++i) {
      std::vector<double> probs(4, 0.1);
      probs[static_cast<std::size_t>(pred[i])] = 0.7;
      preds.push_back({"m" + std::to_string(i), probs, truth[i]});
    }
    const auto r = classification_metrics(preds, Task::multiclass4);
    out.require(close(r.precision, 2.0 / 3), "macro precision");
    out.require(close(r.recall, 7.0 / 12), "macro recall");
    out.require(close(r.f1, 3.0 / 5), "macro f1");
    out.require(close(r.class_f1[1], 2.0 / 5) && close(r.class_precision[3], 1.0) && close(r.class_recall[3], 0.5),
                "per-class values");
  }
  out.detail << " auc_instances=100 max_auc_diff=" << worst << " fixtures=binary,multiclass4";
  return out;
}

// ----------------------------------------------------------------- cropping

Outcome criterion_cropping() {
  Outcome out;
  RngStream rng(1003);
  int pairs = 0, resized = 0, border = 0;
  for (int vol = 0; vol < 100; ++vol) {
    const GridDims d{24 + static_cast<int>(rng.index(80)), 24 + static_cast<int>(rng.index(80)),
                     16 + static_cast<int>(rng.index(60))};
    const CtVolume v = testing::random_normalized_volume(d, rng);
    const int dims[3] = {d.nx, d.ny, d.nz};
    for (int k = 0; k < 10; ++k, ++pairs) {
      const int max_side = k % 3 == 0 ? 100 : 40;
      std::array<int, 3> lo{}, hi{};
      for (int a = 0; a < 3; ++a) {
        const int side = 1 + static_cast<int>(rng.index(static_cast<std::uint64_t>(max_side)));
        lo[a] = static_cast<int>(rng.index(static_cast<std::uint64_t>(dims[a] + side - 1))) - side + 1;
        hi[a] = lo[a] + side;
      }
      const BoundingBox b = BoundingBox::from(lo, hi);
      bool did_resize = false;
      const Patch p = extract_patch(v, b, kCropSize, &did_resize);
      out.require(p.edge == 64 && p.data.size() == 2u * 64 * 64 * 64, "patch shape");
      const auto len = b.lengths();
      const bool oversize = *std::max_element(len.begin(), len.end()) > kCropSize;
      out.require(did_resize == oversize, "resize iff a side exceeds the crop");
      if (did_resize) {
        ++resized;
        for (std::size_t i = 0; i < p.channel_size(); ++i) {
          const float m = p.channel(1)[i];
          if (m != 0.0f && m != p.channel(0)[i]) {
            out.require(false, "resized mask relation");
            break;
          }
        }
        continue;
      }
      const auto w = crop_window(b).window;
      if (w.x_min < 0 || w.y_min < 0 || w.z_min < 0 || w.x_max > d.nx || w.y_max > d.ny || w.z_max > d.nz) ++border;
      bool ok = true;
      for (int z = 0; z < 64 && ok; ++z)
        for (int y = 0; y < 64 && ok; ++y)
          for (int x = 0; x < 64; ++x) {
            const int vx = x + w.x_min, vy = y + w.y_min, vz = z + w.z_min;
            const bool inside = vx >= 0 && vy >= 0 && vz >= 0 && vx < d.nx && vy < d.ny && vz < d.nz;
            const float expect = inside ? v.at(vx, vy, vz) : 0.0f;
            const bool in_box =
                vx >= b.x_min && vx < b.x_max && vy >= b.y_min && vy < b.y_max && vz >= b.z_min && vz < b.z_max;
            if (p.at(0, x, y, z) != expect || p.at(1, x, y, z) != (in_box ? expect : 0.0f)) {
              ok = false;
              break;
            }
          }
      out.require(ok, "gather oracle / mask relation");
    }
  }
  out.require(resized > 0 && border > 0, "fuzz did not reach both the resize and the border paths");
  out.detail << " pairs=" << pairs << " resized=" << resized << " border_windows=" << border;
  return out;
}

// ------------------------------------------------------------------- jitter

Outcome criterion_jitter() {
  Outcome out;
  RngStream rng(1004);
  const JitterConfig configs[] = {{-0.75, 0.75}, {-0.25, 0.5}, {0.0, 0.0}, {-1.0, -0.2}};
  int draws = 0;
  for (const auto& cfg : configs) {
    for (int trial = 0; trial < 10000; ++trial, ++draws) {
      const GridDims d{16 + static_cast<int>(rng.index(100)), 16 + static_cast<int>(rng.index(100)),
                       16 + static_cast<int>(rng.index(60))};
      const int dims[3] = {d.nx, d.ny, d.nz};
      std::array<int, 3> lo{}, hi{};
      for (int a = 0; a < 3; ++a) {
        const int side = 1 + static_cast<int>(rng.index(static_cast<std::uint64_t>(std::min(dims[a], 40))));
        lo[a] = static_cast<int>(rng.index(static_cast<std::uint64_t>(dims[a] - side + 1)));
        hi[a] = lo[a] + side;
      }
      const BoundingBox b = BoundingBox::from(lo, hi);
      const JitterTrace t = jitter_box_traced(b, d, cfg, rng);
      const auto len = b.lengths();
      for (int a = 0; a < 3; ++a) {
        const double lo_d = len[a] * cfg.alpha_min, hi_d = len[a] * cfg.alpha_max;
        out.require(t.raw_delta[a] >= lo_d && t.raw_delta[a] <= hi_d, "raw shift outside [L*a_min, L*a_max]");
        out.require(t.box.lo()[a] >= 0 && t.box.hi()[a] <= dims[a], "box left the volume");
        out.require(t.box.lo()[a] == b.lo()[a] + t.applied[a], "box moved by something other than the shift");
        // Clamping only pulls the shift back toward the original position.
        const long rounded = std::lround(t.raw_delta[a]);
        const bool clamped = t.applied[a] != rounded;
        out.require(!clamped || std::abs(t.applied[a]) < std::abs(rounded), "clamp moved the box further");
      }
      out.require(t.box.lengths() == len, "box size changed");
      if (cfg.alpha_min == 0.0 && cfg.alpha_max == 0.0) out.require(t.box == b, "zero jitter moved the box");
    }
  }
  out.detail << " configs=4 draws=" << draws;
  return out;
}

// -------------------------------------------------------- schedule, optimizer

Outcome criterion_schedule() {
  Outcome out;
  for (std::int64_t total : {1, 10, 250, 1175}) {
    out.require(cosine_lr(0, total, 1e-3, 1e-5) == 1e-3, "lr at step 0");
    out.require(cosine_lr(total, total, 1e-3, 1e-5) == 1e-5, "lr at the last step");
    double prev = 1e-3;
    for (std::int64_t s = 0; s <= total; ++s) {
      const double lr = cosine_lr(s, total, 1e-3, 1e-5);
      out.require(lr <= prev, "schedule not monotone");
      prev = lr;
    }
  }
  // lr 0.1, default betas and eps, gradients 1, -0.5, 2 from p = 0:
  // t=1: m=0.1, v=0.001, mhat=1, vhat=1 -> p = -0.1 / (1 + 1e-8)
  // t=2: m=0.04, v=0.001249, mhat=0.04/0.19, vhat=0.001249/0.001999
  // t=3: m=0.236, v=0.005243751, mhat=0.236/0.271, vhat=0.005243751/0.002997001
  const double expect[3] = {-0.09999999900000002, -0.12663370262909684, -0.1924448621571968};
  std::vector<NamedTensor<double>> params{{"w", Tensor<double>({1}, 0.0)}};
  OptimizerState<double> st;
  const double g[3] = {1.0, -0.5, 2.0};
  double worst = 0;
  for (int t = 0; t < 3; ++t) {
    out.require(adam_step(params, Gradients<double>{Tensor<double>({1}, g[t])}, st, 0.1), "adam step rejected");
    worst = std::max(worst, std::abs(params[0].value.data[0] - expect[t]));
  }
  out.require(worst <= 1e-12, "adam trace " + std::to_string(worst));
  out.detail << " schedules=4 adam_max_diff=" << worst;
  return out;
}

// ------------------------------------------------------------------- labels

int median_oracle(std::vector<int> codes) {
  std::sort(codes.begin(), codes.end());
  const std::size_t n = codes.size();
  if (n % 2) return codes[n / 2];
  return static_cast<int>(std::floor(0.5 * (codes[n / 2 - 1] + codes[n / 2]) + 0.5));
}

Outcome criterion_labels() {
  Outcome out;
  RngStream rng(1006);
  for (int trial = 0; trial < 100000; ++trial) {
    const std::size_t n = 1 + rng.index(6);
    std::vector<SuspicionLevel> labels(n);
    std::vector<int> codes(n);
    for (std::size_t i = 0; i < n; ++i) {
      codes[i] = static_cast<int>(rng.index(kSuspicionLevels));
      labels[i] = suspicion_from_code(codes[i]);
    }
    const SuspicionLevel base = aggregate_annotations(labels);
    for (std::size_t i = n; i > 1; --i) std::swap(labels[i - 1], labels[rng.index(i)]);
    if (aggregate_annotations(labels) != base) out.require(false, "permutation changed the aggregate");
    if (code_of(base) != median_oracle(codes)) out.require(false, "median oracle");
  }
  const auto records = make_cohort_manifest(1006);
  std::array<int, kSuspicionLevels> hist{};
  for (const auto& r : records) hist[static_cast<std::size_t>(code_of(aggregate_annotations(r.annotator_labels)))]++;
  const std::size_t retained = filter_targets(records, false).size();
  out.require(hist == kCohortClassCounts, "cohort histogram");
  out.require(retained == 1348, "retained " + std::to_string(retained));
  out.detail << " multisets=100000 cohort=" << records.size() << " retained=" << retained;
  return out;
}

// ------------------------------------------------------------------- splits

Outcome criterion_splits() {
  Outcome out;
  RngStream rng(1007);
  int worst_spread = 0;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<NoduleRecord> records;
    int max_per_patient = 0;
    for (int p = 0; p < 200; ++p) {
      const int n = 1 + static_cast<int>(rng.index(7));
      max_per_patient = std::max(max_per_patient, n);
      for (int i = 0; i < n; ++i) {
        NoduleRecord r;
        r.patient_id = "p" + std::to_string(p);
        r.scan_id = r.patient_id + "-s";
        r.nodule_id = r.patient_id + "-n" + std::to_string(i);
        r.bbox = {0, 0, 0, 1, 1, 1};
        r.annotator_labels = {SuspicionLevel::HighlySuspicious};
        records.push_back(r);
      }
    }
    const auto fa = grouped_kfold(records, 5, rng.next_u64());
    apply_folds(records, fa);
    std::vector<int> seen(records.size(), 0);
    std::vector<int> sizes(5, 0);
    for (int f = 0; f < 5; ++f) {
      const auto split = split_for_fold(records, fa, f);
      out.require(split.train.size() + split.validation.size() == records.size(), "fold does not cover all");
      sizes[static_cast<std::size_t>(f)] = static_cast<int>(split.validation.size());
      std::set<std::string> train_patients;
      for (auto i : split.train) train_patients.insert(records[i].patient_id);
      for (auto i : split.validation) {
        seen[i] += 1;
        out.require(!train_patients.count(records[i].patient_id), "patient leaked across train/validation");
      }
    }
    out.require(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }), "not a partition");
    const int spread = *std::max_element(sizes.begin(), sizes.end()) - *std::min_element(sizes.begin(), sizes.end());
    worst_spread = std::max(worst_spread, spread);
    out.require(spread <= max_per_patient, "fold sizes spread " + std::to_string(spread));
  }
  out.detail << " cohorts=50 patients=200 k=5 worst_spread=" << worst_spread;
  return out;
}

// -------------------------------------------------------------- aggregation

Outcome criterion_aggregation() {
  Outcome out;
  RngStream rng(1008);
  double worst = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const int k = trial % 2 ? 5 : 4;
    std::vector<double> e(static_cast<std::size_t>(k));
    double total = 0;
    for (double& v : e) total += (v = -std::log(1.0 - rng.uniform()));
    for (double& v : e) v /= total;
    // Class order of the five-level scale: HU, MU, I, MS, HS.
    const std::vector<double> probs = k == 5 ? e : std::vector<double>{e[0], e[1], e[2], e[3]};
    const Task task = k == 5 ? Task::multiclass5 : Task::multiclass4;
    const auto cp = ClassProbabilities::from_vector(probs, task);
    const double ms = k == 5 ? e[3] : e[2], hs = k == 5 ? e[4] : e[3];
    const auto s = aggregate_binary(cp, Aggregation::sum);
    const auto m = aggregate_binary(cp, Aggregation::max);
    worst = std::max({worst, std::abs(s.dangerous - (ms + hs)), std::abs(m.dangerous - std::max(ms, hs))});
    if (k == 4) worst = std::max(worst, std::abs(s.dangerous + s.not_dangerous - 1.0));
    out.require(m.dangerous <= s.dangerous, "max above sum");
    out.require(std::abs(m.dangerous + m.not_dangerous - 1.0) <= 1e-12, "max complement");
  }
  out.require(worst <= 1e-12, "aggregation diff " + std::to_string(worst));
  out.detail << " simplex_points=10000 max_diff=" << worst;
  return out;
}

// --------------------------------------------------- synthetic learnability

struct SyntheticRun {
  CrossValidationResult result;
  double seconds = 0;
};

SyntheticRun synthetic_run() {
  SyntheticSpec spec;
  spec.count = 400;
  spec.patients = 200;
  spec.seed = 2024;
  auto ds = make_synthetic_dataset(spec);

  ExperimentConfig cfg;
  cfg.model = ModelConfig::tiny(1);
  cfg.model.stem_pool = true;
  cfg.task = Task::binary;
  cfg.sync_task();
  cfg.train.max_epochs = 10;
  cfg.train.batch_size = 16;
  cfg.folds = 5;
  cfg.seed = 7;
  cfg.validate();

  const auto t0 = Clock::now();
  const auto folds = grouped_kfold(ds.records, cfg.folds, cfg.seed);
  apply_folds(ds.records, folds);
  std::vector<CtVolume> volumes;
  volumes.reserve(ds.volumes.size());
  for (const auto& v : ds.volumes) volumes.push_back(normalize_intensity(v, cfg.normalization));
  ds.volumes.clear();
  const Dataset data = make_dataset(std::move(volumes), ds.records, cfg.crop_size);
  SyntheticRun run;
  run.result = run_cross_validation(data, cfg, [](const std::string& msg) {
    std::fprintf(stderr, "  %s\n", msg.c_str());
  });
  run.seconds = seconds_since(t0);
  return run;
}

std::optional<SyntheticRun> g_first_run;

const SyntheticRun& first_synthetic_run() {
  if (!g_first_run) g_first_run = synthetic_run();
  return *g_first_run;
}

Outcome criterion_synthetic() {
  Outcome out;
  const auto& run = first_synthetic_run();
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  // The budget is 10 minutes on 4 cores; fewer cores stretch it linearly.
  const double budget = 600.0 * 4.0 / std::min(4u, hw);
  out.require(run.result.reports.size() == 1, "expected one binary report");
  const auto& r = run.result.reports.front();
  out.require(run.result.pooled.size() == 400, "pooled predictions " + std::to_string(run.result.pooled.size()));
  out.require(r.roc_auc >= 0.95, "auc");
  out.require(r.f1 >= 0.90, "f1");
  out.require(run.seconds <= budget, "runtime");
  out.detail << " auc=" << r.roc_auc << " f1=" << r.f1 << " n=" << r.count << " time=" << run.seconds
             << "s budget=" << budget << "s cores=" << hw;
  return out;
}

// ---------------------------------------------------- TTA and determinism

// Kernels averaged over all axis flips, on an odd grid where each stride-2
// lattice is mirror-symmetric: the logits are flip invariant.
ModelParams<float> flip_invariant_model(RngStream& rng) {
  auto p = build_model<float>(ModelConfig::tiny(4), rng);
  for (auto& t : p.tensors) {
    if (t.value.rank() != 5 || t.value.dim(2) != 3) continue;
    auto& w = t.value;
    std::vector<float> sym(w.numel());
    for (std::size_t pl = 0; pl < w.dim(0) * w.dim(1); ++pl)
      for (int z = 0; z < 3; ++z)
        for (int y = 0; y < 3; ++y)
          for (int x = 0; x < 3; ++x) {
            double acc = 0;
            for (int v = 0; v < 8; ++v) {
              const int sx = (v & 1) ? 2 - x : x, sy = (v & 2) ? 2 - y : y, sz = (v & 4) ? 2 - z : z;
              acc += w.data[pl * 27 + static_cast<std::size_t>((sz * 3 + sy) * 3 + sx)];
            }
            sym[pl * 27 + static_cast<std::size_t>((z * 3 + y) * 3 + x)] = static_cast<float>(acc / 8);
          }
    w.data = sym;
  }
  return p;
}

Outcome criterion_tta() {
  Outcome out;
  RngStream rng(1010);
  Patch p(6);
  for (auto& v : p.data) v = static_cast<float>(rng.uniform());
  const auto vars = tta_variants(p);
  std::set<std::vector<float>> distinct;
  for (int v = 0; v < kTtaVariants; ++v) {
    distinct.insert(vars[static_cast<std::size_t>(v)].data);
    for (int c = 0; c < 2; ++c)
      for (int z = 0; z < 6; ++z)
        for (int y = 0; y < 6; ++y)
          for (int x = 0; x < 6; ++x) {
            const int sx = (v & 1) ? 5 - x : x, sy = (v & 2) ? 5 - y : y, sz = (v & 4) ? 5 - z : z;
            if (vars[static_cast<std::size_t>(v)].at(c, x, y, z) != p.at(c, sx, sy, sz))
              out.require(false, "variant " + std::to_string(v) + " is not the flip");
          }
  }
  out.require(distinct.size() == 8, "variants not distinct");

  const auto model = flip_invariant_model(rng);
  double worst = 0;
  for (int trial = 0; trial < 10; ++trial) {
    Patch q(9);
    for (auto& v : q.data) v = static_cast<float>(rng.uniform());
    const auto single = predict_single_view(model, std::span<const Patch>(&q, 1))[0];
    const auto tta = tta_predict(model, q);
    for (std::size_t c = 0; c < single.size(); ++c) worst = std::max(worst, std::abs(tta[c] - single[c]));
  }
  out.require(worst <= 1e-6, "flip-invariant TTA diff " + std::to_string(worst));

  const auto& first = first_synthetic_run();
  const auto second = synthetic_run();
  bool same = first.result.reports.size() == second.result.reports.size();
  for (std::size_t i = 0; same && i < first.result.reports.size(); ++i)
    same = report_to_json(first.result.reports[i]) == report_to_json(second.result.reports[i]);
  out.require(same, "rerun reports differ");
  out.require(predictions_to_jsonl(first.result.pooled) == predictions_to_jsonl(second.result.pooled),
              "rerun predictions differ");
  out.detail << " variants=" << distinct.size() << " invariant_tta_diff=" << worst
             << " rerun_identical=" << (same ? "yes" : "no") << " rerun_time=" << second.seconds << "s";
  return out;
}

struct Criterion {
  const char* name;
  Outcome (*run)();
};

}  // namespace
}  // namespace nodulenet

int main(int argc, char** argv) {
  using namespace nodulenet;
  retain_freed_memory();
  const Criterion criteria[] = {
      {"gradients", criterion_gradients},   {"metrics", criterion_metrics},
      {"cropping", criterion_cropping},     {"jitter", criterion_jitter},
      {"schedule", criterion_schedule},     {"labels", criterion_labels},
      {"splits", criterion_splits},         {"aggregation", criterion_aggregation},
      {"synthetic", criterion_synthetic},   {"tta_determinism", criterion_tta},
  };
  std::set<std::string> only;
  for (int i = 1; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--only") {
      std::stringstream ss(argv[i + 1]);
      for (std::string item; std::getline(ss, item, ',');) only.insert(item);
    }
  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.name)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << " exception: " << e.what();
    }
    std::printf("%s %-16s%s\n", o.pass ? "PASS" : "FAIL", c.name, o.detail.str().c_str());
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  std::printf("%d criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
