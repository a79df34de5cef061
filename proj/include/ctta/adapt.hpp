#pragma once

// Test-time adaptation methods and the per-sequence runner.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ctta/autodiff.hpp"
#include "ctta/dynamic_bn.hpp"
#include "ctta/errors.hpp"
#include "ctta/kernels.hpp"
#include "ctta/metrics.hpp"
#include "ctta/params.hpp"
#include "ctta/rng.hpp"
#include "ctta/segmodel.hpp"

namespace ctta {

enum class Method { source_only, tent, cotta, ours };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::source_only: return "source-only";
    case Method::tent: return "tent";
    case Method::cotta: return "cotta";
    case Method::ours: return "ours";
  }
  return "?";
}

inline constexpr double kBaseLearningRate = 0.00006;

struct MethodConfig {
  std::string name;  // variant string this config was parsed from
  Method method = Method::ours;
  BnMode bn_mode = BnMode::interpolated;
  ParamSelector selector{Region::backbone, Scope::bn_affine};
  double learning_rate = kBaseLearningRate / 4;
  AdamOptions adam;
  double gamma = 0.1;
  double alpha = 0.005;
  std::optional<double> fraction = 0.3;  // empty: no pixel filtering
  BetaScope beta_scope = BetaScope::per_layer;
  bool gate = false;
  double gate_threshold = 0.01;
  double ema_momentum = 0.999;
  double restore_rate = 0.01;
  std::size_t augmentations = 3;

  void validate() const {
    auto fail = [&](const std::string& what) { throw ConfigError("method '" + name + "': " + what); };
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) fail("learning rate must be >= 0");
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) fail("gamma must be >= 0");
    if (!(alpha >= 0.0 && alpha <= 1.0)) fail("alpha must be in [0, 1]");
    if (fraction && !(*fraction > 0.0 && *fraction <= 1.0)) fail("fraction must be in (0, 1]");
    if (!(gate_threshold >= 0.0)) fail("gate threshold must be >= 0");
    if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0)) fail("ema momentum must be in [0, 1]");
    if (!(restore_rate >= 0.0 && restore_rate <= 1.0)) fail("restore rate must be in [0, 1]");
    if (bn_mode == BnMode::train) fail("train BN mode is not available at test time");
  }
};

/// Named starting points for variant strings.
inline MethodConfig method_preset(const std::string& base) {
  MethodConfig c;
  c.name = base;
  if (base == "source-only") {
    c.method = Method::source_only;
    c.bn_mode = BnMode::source;
    c.selector = {Region::none, Scope::bn_affine};
    c.fraction.reset();
  } else if (base == "tent" || base == "tent-backbone" || base == "tent-backbone-dynbn") {
    c.method = Method::tent;
    c.bn_mode = base == "tent-backbone-dynbn" ? BnMode::interpolated : BnMode::batch;
    c.selector = {base == "tent" ? Region::both : Region::backbone, Scope::bn_affine};
    c.fraction.reset();
  } else if (base == "cotta") {
    c.method = Method::cotta;
    c.bn_mode = BnMode::batch;
    c.selector = {Region::both, Scope::all_weights};
    c.fraction.reset();
  } else if (base == "ours") {
    // defaults above
  } else {
    throw ConfigError("unknown method '" + base +
                      "' (expected source-only, tent, tent-backbone, tent-backbone-dynbn, cotta or ours)");
  }
  return c;
}

namespace detail {

inline double parse_number(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size() || !std::isfinite(x)) {
    throw ConfigError("option '" + key + "': '" + v + "' is not a number");
  }
  return x;
}

inline bool parse_switch(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ConfigError("option '" + key + "': expected on or off, got '" + v + "'");
}

}  // namespace detail

/// Learning rate by name ("quarter" = 0.00006/4, "eighth" = 0.00006/8) or value.
inline double parse_learning_rate(const std::string& v) {
  if (v == "quarter") return kBaseLearningRate / 4;
  if (v == "eighth") return kBaseLearningRate / 8;
  return detail::parse_number("lr", v);
}

/// Applies one key=value override to a method config.
inline void apply_method_option(MethodConfig& c, const std::string& key, const std::string& v) {
  using detail::parse_number;
  if (key == "region") {
    if (v == "backbone") c.selector.region = Region::backbone;
    else if (v == "head") c.selector.region = Region::head;
    else if (v == "both") c.selector.region = Region::both;
    else if (v == "none") c.selector.region = Region::none;
    else throw ConfigError("option 'region': expected backbone, head, both or none, got '" + v + "'");
  } else if (key == "scope") {
    if (v == "bn") c.selector.scope = Scope::bn_affine;
    else if (v == "all") c.selector.scope = Scope::all_weights;
    else throw ConfigError("option 'scope': expected bn or all, got '" + v + "'");
  } else if (key == "bn") {
    if (v == "source") c.bn_mode = BnMode::source;
    else if (v == "batch") c.bn_mode = BnMode::batch;
    else if (v == "interpolated") c.bn_mode = BnMode::interpolated;
    else throw ConfigError("option 'bn': expected source, batch or interpolated, got '" + v + "'");
  } else if (key == "lr") {
    c.learning_rate = parse_learning_rate(v);
  } else if (key == "gamma") {
    c.gamma = parse_number(key, v);
  } else if (key == "alpha") {
    c.alpha = parse_number(key, v);
  } else if (key == "fraction") {
    if (v == "off") c.fraction.reset();
    else c.fraction = parse_number(key, v);
  } else if (key == "beta") {
    if (v == "per-layer") c.beta_scope = BetaScope::per_layer;
    else if (v == "global") c.beta_scope = BetaScope::global;
    else throw ConfigError("option 'beta': expected per-layer or global, got '" + v + "'");
  } else if (key == "gate") {
    c.gate = detail::parse_switch(key, v);
  } else if (key == "gate_threshold") {
    c.gate_threshold = parse_number(key, v);
  } else if (key == "ema") {
    c.ema_momentum = parse_number(key, v);
  } else if (key == "restore") {
    c.restore_rate = parse_number(key, v);
  } else if (key == "augs") {
    const double n = parse_number(key, v);
    if (n < 0 || n != std::floor(n) || n > 64) throw ConfigError("option 'augs': expected an integer in [0, 64]");
    c.augmentations = static_cast<std::size_t>(n);
  } else {
    throw ConfigError("unknown method option '" + key + "'");
  }
}

/// Parses "base(+key=value)*", e.g. "tent+region=backbone+scope=all".
inline MethodConfig parse_method(const std::string& variant) {
  std::vector<std::string> parts;
  std::stringstream ss(variant);
  for (std::string part; std::getline(ss, part, '+');) parts.push_back(part);
  if (parts.empty() || parts[0].empty()) throw ConfigError("empty method name");
  MethodConfig c = method_preset(parts[0]);
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const auto eq = parts[i].find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("method '" + variant + "': expected key=value, got '" + parts[i] + "'");
    }
    apply_method_option(c, parts[i].substr(0, eq), parts[i].substr(eq + 1));
  }
  c.name = variant;
  c.validate();
  return c;
}

/// 1 where a pixel's prediction entropy is at most fraction * ln K.
template <class T>
BasicTensor<T> entropy_pixel_mask(const BasicTensor<T>& probs, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("entropy_pixel_mask: fraction must be in (0, 1]");
  const double threshold = fraction * std::log(static_cast<double>(probs.dim(1)));
  BasicTensor<T> mask = kernels::entropy_map(probs);
  for (T& v : mask.values()) v = static_cast<double>(v) <= threshold ? T{1} : T{0};
  return mask;
}

enum class GateDecision { hold, reset_and_adapt };

struct GateState {
  std::optional<double> previous;
};

/// Hold on the first frame and whenever the mean entropy moved by less than
/// the threshold since the previous frame.
inline GateDecision entropy_gate(GateState& gate, double mean_entropy, double threshold) {
  const std::optional<double> prev = gate.previous;
  gate.previous = mean_entropy;
  if (!prev) return GateDecision::hold;
  return std::abs(mean_entropy - *prev) < threshold ? GateDecision::hold : GateDecision::reset_and_adapt;
}

/// Horizontal mirror of an N x C x H x W tensor.
template <class T>
BasicTensor<T> flip_horizontal(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  const std::size_t w = x.dim(3), rows = x.size() / w;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < w; ++i) out[r * w + i] = x[r * w + (w - 1 - i)];
  }
  return out;
}

enum class AugKind { flip, brightness, noise };

/// The i-th augmentation cycles flip, brightness, noise.
inline AugKind augmentation_kind(std::size_t i) { return static_cast<AugKind>(i % 3); }

/// Brightness scale in [0.8, 1.2] or Gaussian noise of sigma 0.05, clamped
/// to [0, 1]; flip needs no randomness.
template <class T>
BasicTensor<T> augment(const BasicTensor<T>& x, AugKind kind, SplitMix64& rng) {
  if (kind == AugKind::flip) return flip_horizontal(x);
  BasicTensor<T> out = x;
  if (kind == AugKind::brightness) {
    const double s = rng.uniform(0.8, 1.2);
    for (T& v : out.values()) v = static_cast<T>(std::clamp(static_cast<double>(v) * s, 0.0, 1.0));
  } else {
    for (T& v : out.values()) v = static_cast<T>(std::clamp(static_cast<double>(v) + rng.normal(0.0, 0.05), 0.0, 1.0));
  }
  return out;
}

/// What the runner produced for one frame.
template <class T>
struct StepResult {
  BasicTensor<T> logits;  // the emitted prediction, 1 x K x H x W
  double mean_entropy = 0.0;
  ForwardTrace trace;
  GateMark gate = GateMark::off;
  bool updated = false;
};

/// One adaptation method bound to a model, run frame by frame: the emitted
/// prediction for a frame always comes from the model as it was before that
/// frame's update.
template <class T = float>
class TtaRunner {
 public:
  TtaRunner(const SegModel<T>& source, MethodConfig config, std::uint64_t seed)
      : config_(std::move(config)), model_(source), teacher_(source), source_params_(source.params()) {
    config_.validate();
    select_trainable(model_, config_.method == Method::source_only ? ParamSelector{Region::none, Scope::bn_affine}
                                                                    : config_.selector);
    model_.params().reset_optimizer();
    model_.params().zero_grad();
    model_.dynamic_bn().reset();
    if (config_.bn_mode == BnMode::interpolated) {
      model_.attach_dynamic_bn(config_.gamma, config_.alpha, config_.beta_scope);
    }
    source_state_ = snapshot(model_);
    reset_for_sequence(seed);
  }

  /// Back to the source condition: parameters, optimizer, BN memory, gate
  /// and teacher.
  void reset_for_sequence(std::uint64_t seed) {
    restore(model_, source_state_);
    restore(teacher_, source_state_);
    gate_ = GateState{};
    rng_ = SplitMix64(seed);
  }

  StepResult<T> step(const BasicTensor<T>& image) {
    const BasicTensor<T> x = image.rank() == 3 ? as_batch_t(image) : image;
    if (!config_.gate) return adapt(x);

    StepResult<T> r = predict(x);
    const GateDecision d = entropy_gate(gate_, r.mean_entropy, config_.gate_threshold);
    r.gate = d == GateDecision::hold ? GateMark::hold : GateMark::adapt;
    if (d == GateDecision::reset_and_adapt) {
      restore(model_, source_state_);
      restore(teacher_, source_state_);
      r.updated = adapt(x).updated;
    }
    return r;
  }

  const MethodConfig& config() const noexcept { return config_; }
  const SegModel<T>& model() const noexcept { return model_; }
  const SegModel<T>& teacher() const noexcept { return teacher_; }
  const GateState& gate() const noexcept { return gate_; }

 private:
  static BasicTensor<T> as_batch_t(const BasicTensor<T>& image) {
    Shape s{1};
    s.insert(s.end(), image.shape().begin(), image.shape().end());
    return image.reshaped(std::move(s));
  }

  SegModel<T>& predictor() { return config_.method == Method::cotta ? teacher_ : model_; }

  // Forward with the current model that leaves every piece of state as it was.
  StepResult<T> predict(const BasicTensor<T>& x) {
    SegModel<T>& m = predictor();
    const std::optional<DynamicBn> saved = m.dynamic_bn();
    StepResult<T> r;
    Tape<T> tape;
    r.logits = forward_segment(m, tape.constant(x), config_.bn_mode, &r.trace).value();
    m.dynamic_bn() = saved;
    r.mean_entropy = kernels::mean_entropy(kernels::softmax_channels(r.logits));
    return r;
  }

  StepResult<T> adapt(const BasicTensor<T>& x) {
    switch (config_.method) {
      case Method::source_only: return predict(x);
      case Method::tent:
      case Method::ours: return entropy_step(x);
      case Method::cotta: return cotta_step(x);
    }
    return {};
  }

  StepResult<T> entropy_step(const BasicTensor<T>& x) {
    StepResult<T> r;
    Tape<T> tape;
    Var<T> logits = forward_segment(model_, tape.constant(x), config_.bn_mode, &r.trace);
    r.logits = logits.value();
    const BasicTensor<T> probs = kernels::softmax_channels(r.logits);
    r.mean_entropy = kernels::mean_entropy(probs);
    const BasicTensor<T> mask = config_.fraction ? entropy_pixel_mask(probs, *config_.fraction)
                                                 : BasicTensor<T>(Shape{x.dim(0), 1, x.dim(2), x.dim(3)}, T{1});
    Var<T> loss = masked_mean_entropy_loss(logits, mask);
    tape.backward(loss);
    r.updated = adam_step(model_.params(), config_.learning_rate, config_.adam);
    return r;
  }

  StepResult<T> cotta_step(const BasicTensor<T>& x) {
    StepResult<T> r;
    {
      Tape<T> tape;
      r.logits = forward_segment(teacher_, tape.constant(x), config_.bn_mode, &r.trace).value();
    }
    BasicTensor<T> pseudo = kernels::softmax_channels(r.logits);
    r.mean_entropy = kernels::mean_entropy(pseudo);
    if (config_.augmentations > 0) {
      std::vector<double> acc(pseudo.values().begin(), pseudo.values().end());
      for (std::size_t i = 0; i < config_.augmentations; ++i) {
        const AugKind kind = augmentation_kind(i);
        Tape<T> tape;
        BasicTensor<T> out = forward_segment(teacher_, tape.constant(augment(x, kind, rng_)), config_.bn_mode).value();
        if (kind == AugKind::flip) out = flip_horizontal(out);
        const BasicTensor<T> p = kernels::softmax_channels(out);
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += static_cast<double>(p[k]);
      }
      const double views = static_cast<double>(config_.augmentations + 1);
      for (std::size_t k = 0; k < acc.size(); ++k) pseudo[k] = static_cast<T>(acc[k] / views);
    }
    Tape<T> tape;
    Var<T> logits = forward_segment(model_, tape.constant(x), config_.bn_mode);
    tape.backward(cross_entropy_loss(logits, pseudo));
    r.updated = adam_step(model_.params(), config_.learning_rate, config_.adam);
    ema_update(teacher_, model_, config_.ema_momentum);
    stochastic_restore(model_, source_params_, config_.restore_rate, rng_);
    return r;
  }

  MethodConfig config_;
  SegModel<T> model_;
  SegModel<T> teacher_;
  ParamStore<T> source_params_;
  ModelSnapshot<T> source_state_;
  GateState gate_;
  SplitMix64 rng_{0};
};

}  // namespace ctta
