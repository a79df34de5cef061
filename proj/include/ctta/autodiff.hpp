#pragma once

// Tape-based reverse-mode differentiation over the handful of ops the
// segmentation network and its losses need.

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ctta/channel_stats.hpp"
#include "ctta/errors.hpp"
#include "ctta/kernels.hpp"
#include "ctta/params.hpp"
#include "ctta/tensor.hpp"

namespace ctta {

template <class T>
class Tape;

/// Handle to a value slot on a tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const BasicTensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
};

/// Gradients of the non-parameter leaves requested with Tape::leaf().
template <class T>
class Gradients {
 public:
  const BasicTensor<T>& of(std::size_t leaf_id) const {
    auto it = grads_.find(leaf_id);
    if (it == grads_.end()) throw ConfigError("no gradient recorded for tape slot " + std::to_string(leaf_id));
    return it->second;
  }
  const BasicTensor<T>& of(const Var<T>& v) const { return of(v.id); }
  bool contains(std::size_t leaf_id) const { return grads_.contains(leaf_id); }

 private:
  friend class Tape<T>;
  std::unordered_map<std::size_t, BasicTensor<T>> grads_;
};

template <class T>
class Tape {
 public:
  using Tensor = BasicTensor<T>;
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool leaf = false;
    ParamStore<T>* store = nullptr;
    std::size_t param_index = 0;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor value) { return push("constant", {}, std::move(value), false); }

  /// A differentiable input whose gradient is returned by backward().
  Var<T> leaf(Tensor value) {
    Var<T> v = push("leaf", {}, std::move(value), true);
    nodes_[v.id].leaf = true;
    return v;
  }

  /// Binds a stored parameter; it only requires a gradient if trainable.
  Var<T> parameter(ParamStore<T>& store, std::size_t index) {
    const Parameter<T>& p = store[index];
    Var<T> v = push("param:" + p.name, {}, p.value, p.trainable);
    nodes_[v.id].store = &store;
    nodes_[v.id].param_index = index;
    return v;
  }

  /// Appends an op result. The node requires a gradient iff any input does;
  /// `backward` is only kept in that case.
  Var<T> record(std::string op, std::vector<std::size_t> inputs, Tensor value, BackwardFn backward) {
    bool needs = false;
    for (std::size_t in : inputs) needs = needs || nodes_.at(in).requires_grad;
    Var<T> v = push(std::move(op), std::move(inputs), std::move(value), needs);
    if (needs) nodes_[v.id].backward = std::move(backward);
    return v;
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Adds `g` into the gradient slot of `id` (allocated on first use).
  void accumulate(std::size_t id, const Tensor& g) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = g;
      return;
    }
    if (n.grad.shape() != g.shape()) {
      throw ConfigError("gradient shape " + shape_str(g.shape()) + " does not match slot " +
                        shape_str(n.grad.shape()) + " of op " + n.op);
    }
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
  }

  const Tensor& grad(std::size_t id) const { return nodes_.at(id).grad; }

  /// Reverse accumulation from a scalar. Trainable parameters receive their
  /// gradient in the ParamStore; leaf gradients are returned. The tape is
  /// cleared afterwards.
  Gradients<T> backward(const Var<T>& loss) {
    if (loss.tape != this) throw ConfigError("backward: loss belongs to another tape");
    const Node& root = nodes_.at(loss.id);
    if (root.value.size() != 1) {
      throw ConfigError("backward requires a scalar loss, got shape " + shape_str(root.value.shape()));
    }
    Gradients<T> out;
    if (root.requires_grad) {
      nodes_[loss.id].grad = Tensor(root.value.shape(), T{1});
      for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad || n.grad.empty()) continue;
        if (n.backward) n.backward(*this, i);
      }
      for (std::size_t i = 0; i <= loss.id; ++i) {
        Node& n = nodes_[i];
        if (!n.requires_grad) continue;
        if (n.store) {
          Parameter<T>& p = (*n.store)[n.param_index];
          if (!p.trainable) continue;
          if (!n.grad.empty()) {
            for (std::size_t k = 0; k < p.grad.size(); ++k) p.grad[k] += n.grad[k];
          }
          p.has_grad = true;
        } else if (n.leaf) {
          out.grads_.emplace(i, n.grad.empty() ? Tensor(n.value.shape()) : std::move(n.grad));
        }
      }
    }
    clear();
    return out;
  }

  void clear() { nodes_.clear(); }

 private:
  Var<T> push(std::string op, std::vector<std::size_t> inputs, Tensor value, bool requires_grad) {
    Node n;
    n.op = std::move(op);
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Ops

template <class T>
Var<T> conv2d(Var<T> input, Var<T> weight, Var<T> bias, std::size_t stride, std::size_t pad) {
  Tape<T>& tape = *input.tape;
  auto out = kernels::conv2d_forward(input.value(), weight.value(), bias.value(), stride, pad);
  const std::size_t xi = input.id, wi = weight.id, bi = bias.id;
  return tape.record("conv2d", {xi, wi, bi}, std::move(out),
                     [xi, wi, bi, stride, pad](Tape<T>& t, std::size_t self) {
                       auto g = kernels::conv2d_backward(
                           t.value(xi), t.value(wi), t.value(bi), t.grad(self), stride, pad,
                           t.requires_grad(xi), t.requires_grad(wi), t.requires_grad(bi));
                       if (!g.input.empty()) t.accumulate(xi, g.input);
                       if (!g.weight.empty()) t.accumulate(wi, g.weight);
                       if (!g.bias.empty()) t.accumulate(bi, g.bias);
                     });
}

/// Batch norm with caller-chosen statistics; no gradient reaches the stats.
template <class T>
Var<T> batchnorm2d(Var<T> input, const ChannelStats& stats, Var<T> scale, Var<T> shift, double eps) {
  Tape<T>& tape = *input.tape;
  auto out = kernels::batchnorm_forward(input.value(), stats, scale.value(), shift.value(), eps);
  const std::size_t xi = input.id, si = scale.id, hi = shift.id;
  return tape.record(
      "batchnorm2d", {xi, si, hi}, std::move(out),
      [xi, si, hi, stats, eps](Tape<T>& t, std::size_t self) {
        const bool affine = t.requires_grad(si) || t.requires_grad(hi);
        auto g = kernels::batchnorm_backward(t.value(xi), stats, t.value(si), t.grad(self), eps,
                                             t.requires_grad(xi), affine);
        if (!g.input.empty()) t.accumulate(xi, g.input);
        if (affine) {
          t.accumulate(si, g.scale);
          t.accumulate(hi, g.shift);
        }
      });
}

/// Training-mode batch norm: normalizes with the batch's own moments and
/// backpropagates through them. `stats_out` receives (mean, population std).
template <class T>
Var<T> batchnorm2d_train(Var<T> input, Var<T> scale, Var<T> shift, double eps,
                         ChannelStats* stats_out = nullptr, std::vector<double>* var_out = nullptr) {
  Tape<T>& tape = *input.tape;
  std::vector<double> mean, var;
  auto out = kernels::batchnorm_train_forward(input.value(), scale.value(), shift.value(), eps, mean, var);
  if (stats_out) {
    std::vector<double> sd(var.size());
    for (std::size_t i = 0; i < var.size(); ++i) sd[i] = std::sqrt(var[i]);
    *stats_out = ChannelStats(mean, std::move(sd));
  }
  if (var_out) *var_out = var;
  const std::size_t xi = input.id, si = scale.id, hi = shift.id;
  return tape.record("batchnorm2d_train", {xi, si, hi}, std::move(out),
                     [xi, si, hi, mean = std::move(mean), var = std::move(var), eps](
                         Tape<T>& t, std::size_t self) {
                       const bool affine = t.requires_grad(si) || t.requires_grad(hi);
                       auto g = kernels::batchnorm_train_backward(
                           t.value(xi), mean, var, t.value(si), t.grad(self), eps,
                           t.requires_grad(xi), affine);
                       if (!g.input.empty()) t.accumulate(xi, g.input);
                       if (affine) {
                         t.accumulate(si, g.scale);
                         t.accumulate(hi, g.shift);
                       }
                     });
}

/// max(0, x); the subgradient at exactly 0 is 0.
template <class T>
Var<T> relu(Var<T> input) {
  Tape<T>& tape = *input.tape;
  BasicTensor<T> out = input.value();
  for (T& v : out.values()) v = v > T{0} ? v : T{0};
  const std::size_t xi = input.id;
  return tape.record("relu", {xi}, std::move(out), [xi](Tape<T>& t, std::size_t self) {
    const BasicTensor<T>& x = t.value(xi);
    BasicTensor<T> g = t.grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!(x[i] > T{0})) g[i] = T{0};
    }
    t.accumulate(xi, g);
  });
}

template <class T>
Var<T> upsample_nearest(Var<T> input, std::size_t factor) {
  Tape<T>& tape = *input.tape;
  auto out = kernels::upsample_nearest_forward(input.value(), factor);
  const std::size_t xi = input.id;
  return tape.record("upsample_nearest", {xi}, std::move(out),
                     [xi, factor](Tape<T>& t, std::size_t self) {
                       t.accumulate(xi, kernels::upsample_nearest_backward(t.grad(self), factor));
                     });
}

template <class T>
Var<T> softmax_channels(Var<T> logits) {
  Tape<T>& tape = *logits.tape;
  auto out = kernels::softmax_channels(logits.value());
  const std::size_t zi = logits.id;
  return tape.record("softmax_channels", {zi}, std::move(out), [zi](Tape<T>& t, std::size_t self) {
    const BasicTensor<T>& p = t.value(self);
    const BasicTensor<T>& gy = t.grad(self);
    const std::size_t n = p.dim(0), k = p.dim(1), plane = p.dim(2) * p.dim(3);
    BasicTensor<T> g(p.shape());
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t base = b * k * plane + i;
        double dot = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
          dot += static_cast<double>(gy[base + c * plane]) * static_cast<double>(p[base + c * plane]);
        }
        for (std::size_t c = 0; c < k; ++c) {
          const double pc = static_cast<double>(p[base + c * plane]);
          g[base + c * plane] = static_cast<T>(pc * (static_cast<double>(gy[base + c * plane]) - dot));
        }
      }
    }
    t.accumulate(zi, g);
  });
}

/// Per-pixel entropy of NKHW probabilities. The derivative -(ln p + 1) is
/// evaluated with p clamped away from 0.
template <class T>
Var<T> entropy_map(Var<T> probs) {
  Tape<T>& tape = *probs.tape;
  auto out = kernels::entropy_map(probs.value());
  const std::size_t pi = probs.id;
  return tape.record("entropy_map", {pi}, std::move(out), [pi](Tape<T>& t, std::size_t self) {
    const BasicTensor<T>& p = t.value(pi);
    const BasicTensor<T>& gy = t.grad(self);
    const std::size_t n = p.dim(0), k = p.dim(1), plane = p.dim(2) * p.dim(3);
    BasicTensor<T> g(p.shape());
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t i = 0; i < plane; ++i) {
        const double up = static_cast<double>(gy[b * plane + i]);
        for (std::size_t c = 0; c < k; ++c) {
          const std::size_t idx = b * k * plane + c * plane + i;
          const double v = std::max(static_cast<double>(p[idx]), 1e-30);
          g[idx] = static_cast<T>(-up * (std::log(v) + 1.0));
        }
      }
    }
    t.accumulate(pi, g);
  });
}

/// Mean prediction entropy over mask == 1 pixels, computed from logits.
template <class T>
Var<T> masked_mean_entropy_loss(Var<T> logits, const BasicTensor<T>& mask) {
  Tape<T>& tape = *logits.tape;
  bool any = false;
  for (T m : mask.values()) any = any || m != T{0};
  // Nothing selected: a constant zero, so no parameter receives a gradient.
  if (!any) return tape.constant(BasicTensor<T>::scalar(T{0}));
  const bool needs = tape.requires_grad(logits.id);
  BasicTensor<T> grad;
  const double loss = kernels::masked_entropy_loss(logits.value(), mask, needs ? &grad : nullptr);
  const std::size_t zi = logits.id;
  return tape.record("masked_mean_entropy", {zi}, BasicTensor<T>::scalar(static_cast<T>(loss)),
                     [zi, grad = std::move(grad)](Tape<T>& t, std::size_t self) {
                       BasicTensor<T> g = grad;
                       const T up = t.grad(self)[0];
                       if (up != T{1}) {
                         for (T& v : g.values()) v *= up;
                       }
                       t.accumulate(zi, g);
                     });
}

template <class T>
Var<T> cross_entropy_loss(Var<T> logits, const BasicTensor<T>& target_probs) {
  Tape<T>& tape = *logits.tape;
  const bool needs = tape.requires_grad(logits.id);
  BasicTensor<T> grad;
  const double loss =
      kernels::cross_entropy_loss(logits.value(), target_probs, needs ? &grad : nullptr);
  const std::size_t zi = logits.id;
  return tape.record("cross_entropy", {zi}, BasicTensor<T>::scalar(static_cast<T>(loss)),
                     [zi, grad = std::move(grad)](Tape<T>& t, std::size_t self) {
                       BasicTensor<T> g = grad;
                       const T up = t.grad(self)[0];
                       if (up != T{1}) {
                         for (T& v : g.values()) v *= up;
                       }
                       t.accumulate(zi, g);
                     });
}

/// Sum of all elements (scalar).
template <class T>
Var<T> sum(Var<T> input) {
  Tape<T>& tape = *input.tape;
  double s = 0.0;
  for (T v : input.value().values()) s += static_cast<double>(v);
  const std::size_t xi = input.id;
  return tape.record("sum", {xi}, BasicTensor<T>::scalar(static_cast<T>(s)),
                     [xi](Tape<T>& t, std::size_t self) {
                       t.accumulate(xi, BasicTensor<T>(t.value(xi).shape(), t.grad(self)[0]));
                     });
}

/// Sum of elementwise products with a constant tensor; turns any op output
/// into a scalar for gradient checks.
template <class T>
Var<T> weighted_sum(Var<T> input, const BasicTensor<T>& weights) {
  Tape<T>& tape = *input.tape;
  if (weights.shape() != input.shape()) {
    throw ConfigError("weighted_sum: weights " + shape_str(weights.shape()) + " vs input " +
                      shape_str(input.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    s += static_cast<double>(input.value()[i]) * static_cast<double>(weights[i]);
  }
  const std::size_t xi = input.id;
  return tape.record("weighted_sum", {xi}, BasicTensor<T>::scalar(static_cast<T>(s)),
                     [xi, weights](Tape<T>& t, std::size_t self) {
                       BasicTensor<T> g = weights;
                       const T up = t.grad(self)[0];
                       for (T& v : g.values()) v *= up;
                       t.accumulate(xi, g);
                     });
}

}  // namespace ctta
