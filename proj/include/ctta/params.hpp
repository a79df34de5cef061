#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctta/errors.hpp"
#include "ctta/tensor.hpp"

namespace ctta {

template <class T>
struct Parameter {
  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;
  BasicTensor<T> first_moment;
  BasicTensor<T> second_moment;
  bool trainable = true;
  bool has_grad = false;

  std::size_t numel() const noexcept { return value.size(); }
};

/// Ordered, uniquely named parameters together with their Adam state.
template <class T>
class ParamStore {
 public:
  std::size_t add(std::string name, BasicTensor<T> value) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    Parameter<T> p;
    p.name = name;
    p.grad = BasicTensor<T>(value.shape());
    p.first_moment = BasicTensor<T>(value.shape());
    p.second_moment = BasicTensor<T>(value.shape());
    p.value = std::move(value);
    index_.emplace(std::move(name), params_.size());
    params_.push_back(std::move(p));
    return params_.size() - 1;
  }

  std::size_t size() const noexcept { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return params_.at(i); }
  const Parameter<T>& operator[](std::size_t i) const { return params_.at(i); }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.contains(name); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::uint64_t step() const noexcept { return step_; }
  void set_step(std::uint64_t s) noexcept { step_ = s; }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }

  std::size_t trainable_numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.trainable ? p.numel() : 0;
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) {
      p.grad.fill(T{0});
      p.has_grad = false;
    }
  }

  /// Clears Adam moments and the step counter.
  void reset_optimizer() {
    for (auto& p : params_) {
      p.first_moment.fill(T{0});
      p.second_moment.fill(T{0});
    }
    step_ = 0;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::uint64_t step_ = 0;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update on trainable parameters that received a
/// gradient; gradients are zeroed afterwards. Returns false (and changes
/// nothing) when no trainable parameter holds a gradient.
template <class T>
bool adam_step(ParamStore<T>& store, double learning_rate, const AdamOptions& opt = {}) {
  bool any = false;
  for (const auto& p : store) any = any || (p.trainable && p.has_grad);
  if (!any) {
    store.zero_grad();
    return false;
  }
  store.set_step(store.step() + 1);
  const double t = static_cast<double>(store.step());
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  for (auto& p : store) {
    if (!p.trainable || !p.has_grad) continue;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = static_cast<double>(p.grad[i]);
      const double m = opt.beta1 * static_cast<double>(p.first_moment[i]) + (1.0 - opt.beta1) * g;
      const double v =
          opt.beta2 * static_cast<double>(p.second_moment[i]) + (1.0 - opt.beta2) * g * g;
      p.first_moment[i] = static_cast<T>(m);
      p.second_moment[i] = static_cast<T>(v);
      const double update = learning_rate * (m / c1) / (std::sqrt(v / c2) + opt.eps);
      p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - update);
    }
  }
  store.zero_grad();
  return true;
}

}  // namespace ctta
