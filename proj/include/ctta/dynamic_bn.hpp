#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ctta/channel_stats.hpp"
#include "ctta/errors.hpp"

namespace ctta {

/// Adaptation memory of one BN layer: source statistics, the statistics used
/// on the previous frame, and the smoothed mixing weight.
struct BNAdaptState {
  ChannelStats source;
  ChannelStats current;
  double beta = 0.0;
  double gamma_hp = 0.1;
  double alpha_hp = 0.005;

  BNAdaptState() = default;
  BNAdaptState(ChannelStats src, double gamma, double alpha)
      : source(src), current(std::move(src)), gamma_hp(gamma), alpha_hp(alpha) {}

  friend bool operator==(const BNAdaptState&, const BNAdaptState&) = default;
};

/// Raw mixing weight for a distance: 1 - exp(-gamma * D).
inline double raw_beta(double distance, double gamma) { return 1.0 - std::exp(-gamma * distance); }

/// Exponential moving average of the mixing weight.
inline double smooth_beta(double previous, double raw, double alpha) {
  return (1.0 - alpha) * previous + alpha * raw;
}

/// Measures the distance from the previously used statistics to the batch
/// statistics and folds the resulting raw weight into the smoothed beta.
inline double beta_step(BNAdaptState& state, const ChannelStats& batch) {
  const double d = sym_kl(state.current, batch);
  state.beta = smooth_beta(state.beta, raw_beta(d, state.gamma_hp), state.alpha_hp);
  return state.beta;
}

/// (1 - beta) * source + beta * batch on both mean and standard deviation.
inline ChannelStats mix_stats(const ChannelStats& source, const ChannelStats& batch, double beta) {
  if (source.channels() != batch.channels()) {
    throw ConfigError("interpolate_stats: channel count mismatch");
  }
  std::vector<double> mu(source.channels()), sigma(source.channels());
  for (std::size_t i = 0; i < mu.size(); ++i) {
    mu[i] = (1.0 - beta) * source.mu[i] + beta * batch.mu[i];
    sigma[i] = (1.0 - beta) * source.sigma[i] + beta * batch.sigma[i];
  }
  return ChannelStats(std::move(mu), std::move(sigma));
}

/// Interpolates with the state's current beta and records the result as the
/// statistics the next frame is measured against.
inline ChannelStats interpolate_stats(BNAdaptState& state, const ChannelStats& batch) {
  state.current = mix_stats(state.source, batch, state.beta);
  return state.current;
}

enum class BetaScope { per_layer, global };

inline std::string to_string(BetaScope s) { return s == BetaScope::global ? "global" : "per-layer"; }

/// Dynamic BN statistics for every BN layer of a network.
///
/// per_layer: each layer measures its own distance and owns its beta; the
/// beta used on frame t already includes frame t's distance.
/// global: one beta shared by all layers, driven by the layer-averaged
/// distance. Layer inputs depend on the stats chosen upstream, so the shared
/// beta is updated once the frame's forward pass is complete and takes effect
/// on the next frame.
class DynamicBn {
 public:
  DynamicBn() = default;
  DynamicBn(const std::vector<ChannelStats>& sources, double gamma, double alpha,
            BetaScope scope = BetaScope::per_layer)
      : scope_(scope) {
    layers_.reserve(sources.size());
    for (const auto& s : sources) layers_.emplace_back(s, gamma, alpha);
  }

  void begin_frame() { distances_.assign(layers_.size(), 0.0); }

  /// Statistics to normalize layer `l` with, given that layer's batch stats.
  ChannelStats stats_for_layer(std::size_t l, const ChannelStats& batch) {
    BNAdaptState& st = layers_.at(l);
    if (scope_ == BetaScope::per_layer) {
      beta_step(st, batch);
    } else {
      if (distances_.size() != layers_.size()) begin_frame();
      distances_[l] = sym_kl(st.current, batch);
    }
    return interpolate_stats(st, batch);
  }

  void end_frame() {
    if (scope_ != BetaScope::global || layers_.empty()) return;
    double d = 0.0;
    for (double v : distances_) d += v;
    d /= static_cast<double>(layers_.size());
    const BNAdaptState& first = layers_.front();
    const double beta = smooth_beta(first.beta, raw_beta(d, first.gamma_hp), first.alpha_hp);
    for (auto& st : layers_) st.beta = beta;
  }

  std::size_t size() const noexcept { return layers_.size(); }
  const BNAdaptState& layer(std::size_t l) const { return layers_.at(l); }
  BNAdaptState& layer(std::size_t l) { return layers_.at(l); }
  BetaScope scope() const noexcept { return scope_; }

  friend bool operator==(const DynamicBn& a, const DynamicBn& b) {
    return a.scope_ == b.scope_ && a.layers_ == b.layers_;
  }

 private:
  std::vector<BNAdaptState> layers_;
  std::vector<double> distances_;
  BetaScope scope_ = BetaScope::per_layer;
};

}  // namespace ctta
