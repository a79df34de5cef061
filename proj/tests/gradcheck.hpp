#pragma once

// Central finite-difference checks of tape gradients, shared by the unit
// tests and the acceptance run.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ctta/autodiff.hpp"
#include "ctta/kernels.hpp"
#include "ctta/rng.hpp"
#include "ctta/segmodel.hpp"
#include "ctta/tensor.hpp"

namespace ctta::testing {

using DTensor = BasicTensor<double>;

inline DTensor random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  SplitMix64 rng(seed);
  DTensor t(shape);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

/// ‖a − b‖ / max(‖a‖, ‖b‖, floor). The floor keeps gradients that are
/// exactly zero (e.g. a conv bias ahead of batch-moment BN) from turning
/// finite-difference noise into a relative error of 1.
inline double relative_error(const DTensor& a, const DTensor& b, double floor = 1e-12) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

/// Builds a scalar from leaves placed on a fresh tape.
using ScalarFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

inline double eval_scalar(const ScalarFn& f, const std::vector<DTensor>& inputs) {
  Tape<double> tape;
  std::vector<Var<double>> leaves;
  for (const auto& x : inputs) leaves.push_back(tape.constant(x));
  return f(tape, leaves).value()[0];
}

/// Largest relative error between the tape gradient of every input and its
/// central finite difference.
inline double gradcheck(const ScalarFn& f, std::vector<DTensor> inputs, double h = 1e-5) {
  std::vector<DTensor> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& x : inputs) leaves.push_back(tape.leaf(x));
    const Var<double> out = f(tape, leaves);
    const auto grads = tape.backward(out);
    for (const auto& l : leaves) analytic.push_back(grads.of(l));
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    DTensor numeric(inputs[k].shape());
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double x0 = inputs[k][i];
      inputs[k][i] = x0 + h;
      const double up = eval_scalar(f, inputs);
      inputs[k][i] = x0 - h;
      const double down = eval_scalar(f, inputs);
      inputs[k][i] = x0;
      numeric[i] = (up - down) / (2.0 * h);
    }
    worst = std::max(worst, relative_error(analytic[k], numeric));
  }
  return worst;
}

struct GradCheckResult {
  std::string op;
  Shape shape;
  double error = 0.0;
};

struct GradCase {
  Shape shape;
  std::uint64_t seed;
};

inline const std::vector<GradCase>& grad_cases() {
  static const std::vector<GradCase> cases{{{2, 3, 8, 8}, 11}, {{1, 2, 5, 7}, 12}, {{3, 4, 4, 4}, 13}};
  return cases;
}

/// Every differentiable op on each of the three seeded shapes. Ops with
/// element outputs are reduced through a fixed random weighting.
inline std::vector<GradCheckResult> op_gradchecks() {
  std::vector<GradCheckResult> out;
  for (const auto& c : grad_cases()) {
    const std::size_t ch = c.shape[1];
    auto record = [&](const std::string& op, double err) { out.push_back({op, c.shape, err}); };

    for (std::size_t stride : {1u, 2u}) {
      auto f = [&](Tape<double>&, const std::vector<Var<double>>& in) {
        auto y = conv2d(in[0], in[1], in[2], stride, 1);
        return weighted_sum(y, random_tensor(y.shape(), c.seed + 2));
      };
      record("conv2d stride " + std::to_string(stride),
             gradcheck(f, {random_tensor(c.shape, c.seed), random_tensor(Shape{4, ch, 3, 3}, c.seed + 3),
                           random_tensor(Shape{4}, c.seed + 4)},
                       1e-4));
    }

    const ChannelStats stats = batch_stats(random_tensor(c.shape, c.seed + 5));
    const std::vector<DTensor> bn_inputs{random_tensor(c.shape, c.seed), random_tensor(Shape{ch}, c.seed + 7, 0.5, 1.5),
                                         random_tensor(Shape{ch}, c.seed + 8)};
    record("batchnorm2d", gradcheck(
                              [&](Tape<double>&, const std::vector<Var<double>>& in) {
                                auto y = batchnorm2d(in[0], stats, in[1], in[2], kBnEps);
                                return weighted_sum(y, random_tensor(y.shape(), c.seed + 6));
                              },
                              bn_inputs));
    record("batchnorm2d_train", gradcheck(
                                    [&](Tape<double>&, const std::vector<Var<double>>& in) {
                                      auto y = batchnorm2d_train(in[0], in[1], in[2], kBnEps);
                                      return weighted_sum(y, random_tensor(y.shape(), c.seed + 9));
                                    },
                                    bn_inputs));

    // Inputs kept away from the kink so central differences are exact.
    DTensor x = random_tensor(c.shape, c.seed);
    for (double& v : x.values()) v += v >= 0 ? 0.1 : -0.1;
    record("relu", gradcheck(
                       [&](Tape<double>&, const std::vector<Var<double>>& in) {
                         return weighted_sum(relu(in[0]), random_tensor(c.shape, c.seed + 1));
                       },
                       {x}));

    record("upsample_nearest", gradcheck(
                                   [&](Tape<double>&, const std::vector<Var<double>>& in) {
                                     auto y = upsample_nearest(in[0], 2);
                                     return weighted_sum(y, random_tensor(y.shape(), c.seed + 1));
                                   },
                                   {random_tensor(c.shape, c.seed)}));

    const DTensor z = random_tensor(c.shape, c.seed, -2, 2);
    record("softmax_channels", gradcheck(
                                   [&](Tape<double>&, const std::vector<Var<double>>& in) {
                                     auto p = softmax_channels(in[0]);
                                     return weighted_sum(p, random_tensor(p.shape(), c.seed + 2));
                                   },
                                   {z}));
    record("entropy_map", gradcheck(
                              [&](Tape<double>&, const std::vector<Var<double>>& in) {
                                auto h = entropy_map(softmax_channels(in[0]));
                                return weighted_sum(h, random_tensor(h.shape(), c.seed + 1));
                              },
                              {z}));

    DTensor mask(Shape{c.shape[0], 1, c.shape[2], c.shape[3]});
    SplitMix64 rng(c.seed);
    for (double& m : mask.values()) m = rng.uniform() < 0.6 ? 1.0 : 0.0;
    mask[0] = 1.0;
    record("masked_mean_entropy_loss",
           gradcheck([&](Tape<double>&, const std::vector<Var<double>>& in) { return masked_mean_entropy_loss(in[0], mask); },
                     {z}));

    const DTensor target = kernels::softmax_channels(random_tensor(c.shape, c.seed + 1, -3, 3));
    record("cross_entropy_loss",
           gradcheck([&](Tape<double>&, const std::vector<Var<double>>& in) { return cross_entropy_loss(in[0], target); },
                     {z}));

    record("sum", gradcheck([](Tape<double>&, const std::vector<Var<double>>& in) { return sum(in[0]); },
                            {random_tensor(c.shape, c.seed)}));
  }
  return out;
}

inline ModelSpec gradcheck_spec() {
  ModelSpec s;
  s.classes = 3;
  s.backbone_widths = {4, 5};
  s.backbone_strides = {1, 2};
  s.head_widths = {4};
  return s;
}

/// Relative error of the cross-entropy gradient with respect to every
/// parameter and the input of a small network.
inline double network_gradcheck(BnMode mode, const Shape& shape, std::uint64_t seed) {
  SegModel<double> m(gradcheck_spec(), seed);
  {
    SplitMix64 rng(seed + 1);
    std::vector<ChannelStats> stats;
    for (const auto& bn : m.bn_layers()) {
      std::vector<double> mu(bn.channels), sd(bn.channels);
      for (std::size_t c = 0; c < bn.channels; ++c) {
        mu[c] = rng.uniform(-0.5, 0.5);
        sd[c] = rng.uniform(0.5, 2.0);
      }
      stats.emplace_back(mu, sd);
    }
    m.set_source_stats(stats);
  }
  select_trainable(m, {Region::both, Scope::all_weights});
  const DTensor x = random_tensor(shape, seed + 2, 0, 1);
  const DTensor target =
      kernels::softmax_channels(random_tensor(Shape{shape[0], 3, shape[2], shape[3]}, seed + 3, -2, 2));
  auto loss_at = [&](const DTensor& input) {
    Tape<double> tape;
    return cross_entropy_loss(forward_segment(m, tape.constant(input), mode), target).value()[0];
  };

  Tape<double> tape;
  auto leaf = tape.leaf(x);
  auto grads = tape.backward(cross_entropy_loss(forward_segment(m, leaf, mode), target));
  const DTensor gx = grads.of(leaf);

  const double h = 1e-5;
  double worst = 0.0;
  for (auto& p : m.params()) {
    DTensor numeric(p.value.shape());
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double v0 = p.value[i];
      p.value[i] = v0 + h;
      const double up = loss_at(x);
      p.value[i] = v0 - h;
      const double down = loss_at(x);
      p.value[i] = v0;
      numeric[i] = (up - down) / (2 * h);
    }
    worst = std::max(worst, relative_error(p.grad, numeric, 1e-6));
  }
  DTensor numeric(x.shape());
  DTensor xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xp[i] = x[i] + h;
    const double up = loss_at(xp);
    xp[i] = x[i] - h;
    const double down = loss_at(xp);
    xp[i] = x[i];
    numeric[i] = (up - down) / (2 * h);
  }
  return std::max(worst, relative_error(gx, numeric, 1e-6));
}

/// The full network with source statistics and with batch moments, on
/// three input shapes each.
inline std::vector<GradCheckResult> network_gradchecks() {
  std::vector<GradCheckResult> out;
  const std::vector<Shape> shapes{{2, 3, 4, 4}, {1, 3, 6, 4}, {3, 3, 4, 6}};
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    out.push_back({"network (source stats)", shapes[i], network_gradcheck(BnMode::source, shapes[i], 1 + i)});
    out.push_back({"network (batch moments)", shapes[i], network_gradcheck(BnMode::train, shapes[i], 4 + i)});
  }
  return out;
}

}  // namespace ctta::testing
