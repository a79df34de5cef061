#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ctta/autodiff.hpp"
#include "ctta/channel_stats.hpp"
#include "ctta/dynamic_bn.hpp"
#include "ctta/errors.hpp"
#include "ctta/params.hpp"
#include "ctta/rng.hpp"
#include "ctta/tensor.hpp"

namespace ctta {

inline constexpr double kBnEps = 1e-5;

/// Architecture of the encoder-decoder: conv3x3-BN-ReLU blocks in the
/// backbone and head, then a 1x1 classifier and nearest upsampling by the
/// product of the backbone strides.
struct ModelSpec {
  std::size_t in_channels = 3;
  std::size_t classes = 14;
  std::vector<std::size_t> backbone_widths{16, 32, 64};
  std::vector<std::size_t> backbone_strides{1, 2, 1};
  std::vector<std::size_t> head_widths{32};
  std::size_t kernel = 3;

  std::size_t upsample_factor() const {
    std::size_t f = 1;
    for (std::size_t s : backbone_strides) f *= s;
    return f;
  }

  void validate() const {
    if (in_channels == 0 || classes < 2 || kernel == 0 || kernel % 2 == 0) {
      throw ConfigError("model spec: need in_channels > 0, classes >= 2 and an odd kernel");
    }
    if (backbone_widths.empty() || backbone_widths.size() != backbone_strides.size()) {
      throw ConfigError("model spec: backbone widths and strides must be nonempty and equal length");
    }
    for (std::size_t w : backbone_widths) {
      if (w == 0) throw ConfigError("model spec: zero backbone width");
    }
    for (std::size_t s : backbone_strides) {
      if (s == 0) throw ConfigError("model spec: zero backbone stride");
    }
    for (std::size_t w : head_widths) {
      if (w == 0) throw ConfigError("model spec: zero head width");
    }
  }

  /// 32-bit FNV-1a over every architectural field.
  std::uint32_t fingerprint() const {
    std::uint32_t h = 2166136261u;
    auto feed = [&h](std::uint64_t v) {
      for (int i = 0; i < 8; ++i) {
        h ^= static_cast<std::uint8_t>(v >> (8 * i));
        h *= 16777619u;
      }
    };
    feed(in_channels);
    feed(classes);
    feed(kernel);
    feed(backbone_widths.size());
    for (std::size_t i = 0; i < backbone_widths.size(); ++i) {
      feed(backbone_widths[i]);
      feed(backbone_strides[i]);
    }
    feed(head_widths.size());
    for (std::size_t w : head_widths) feed(w);
    return h;
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

enum class Region { none, backbone, head, both };
enum class Scope { bn_affine, all_weights };

/// Which parameters adapt at test time.
struct ParamSelector {
  Region region = Region::backbone;
  Scope scope = Scope::bn_affine;

  friend bool operator==(const ParamSelector&, const ParamSelector&) = default;
};

inline std::string to_string(Region r) {
  switch (r) {
    case Region::none: return "none";
    case Region::backbone: return "backbone";
    case Region::head: return "head";
    case Region::both: return "both";
  }
  return "?";
}
inline std::string to_string(Scope s) { return s == Scope::bn_affine ? "bn" : "all"; }

enum class BnMode { source, batch, interpolated, train };

inline std::string to_string(BnMode m) {
  switch (m) {
    case BnMode::source: return "source";
    case BnMode::batch: return "batch";
    case BnMode::interpolated: return "interpolated";
    case BnMode::train: return "train";
  }
  return "?";
}

inline bool is_bn_affine(const std::string& name) {
  auto ends_with = [&](std::string_view suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends_with(".bn.scale") || ends_with(".bn.shift");
}

/// Per-frame record of the statistics seen by each BN layer.
struct ForwardTrace {
  std::vector<ChannelStats> batch;  // the layer input's own moments
  std::vector<ChannelStats> used;   // what the layer normalized with
  std::vector<double> beta;         // mixing weight applied (0 source, 1 batch)
};

template <class T>
class SegModel {
 public:
  struct BnLayer {
    std::string name;  // e.g. "backbone.0.bn"
    std::size_t channels = 0;
    std::size_t scale = 0, shift = 0;
    bool in_backbone = true;
  };

  struct Block {
    std::size_t weight = 0, bias = 0;
    std::size_t stride = 1, pad = 1;
    std::size_t bn = 0;
  };

  SegModel(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    std::size_t in = spec_.in_channels;
    auto add_block = [&](const std::string& prefix, std::size_t out, std::size_t stride, bool backbone) {
      Block b;
      b.stride = stride;
      b.pad = spec_.kernel / 2;
      b.weight = add_conv_weight(prefix + ".conv.weight", out, in, spec_.kernel, seed);
      b.bias = params_.add(prefix + ".conv.bias", BasicTensor<T>(Shape{out}));
      BnLayer bn;
      bn.name = prefix + ".bn";
      bn.channels = out;
      bn.in_backbone = backbone;
      bn.scale = params_.add(prefix + ".bn.scale", BasicTensor<T>(Shape{out}, T{1}));
      bn.shift = params_.add(prefix + ".bn.shift", BasicTensor<T>(Shape{out}));
      b.bn = bn_.size();
      bn_.push_back(bn);
      source_stats_.push_back(ChannelStats::unit(out));
      blocks_.push_back(b);
      in = out;
    };
    for (std::size_t i = 0; i < spec_.backbone_widths.size(); ++i) {
      add_block("backbone." + std::to_string(i), spec_.backbone_widths[i], spec_.backbone_strides[i], true);
    }
    for (std::size_t i = 0; i < spec_.head_widths.size(); ++i) {
      add_block("head." + std::to_string(i), spec_.head_widths[i], 1, false);
    }
    classifier_weight_ = add_conv_weight("head.classifier.weight", spec_.classes, in, 1, seed);
    classifier_bias_ = params_.add("head.classifier.bias", BasicTensor<T>(Shape{spec_.classes}));
  }

  const ModelSpec& spec() const noexcept { return spec_; }
  std::uint32_t fingerprint() const { return spec_.fingerprint(); }

  ParamStore<T>& params() noexcept { return params_; }
  const ParamStore<T>& params() const noexcept { return params_; }

  const std::vector<BnLayer>& bn_layers() const noexcept { return bn_; }
  const std::vector<Block>& blocks() const noexcept { return blocks_; }

  const std::vector<ChannelStats>& source_stats() const noexcept { return source_stats_; }
  void set_source_stats(std::vector<ChannelStats> stats) {
    if (stats.size() != bn_.size()) throw ConfigError("source stats: wrong number of BN layers");
    for (std::size_t l = 0; l < stats.size(); ++l) {
      if (stats[l].channels() != bn_[l].channels) {
        throw ConfigError("source stats: channel mismatch in " + bn_[l].name);
      }
    }
    source_stats_ = std::move(stats);
  }

  /// Adaptation memory for the interpolated BN mode; empty until attached.
  std::optional<DynamicBn>& dynamic_bn() noexcept { return dynamic_bn_; }
  const std::optional<DynamicBn>& dynamic_bn() const noexcept { return dynamic_bn_; }
  void attach_dynamic_bn(double gamma, double alpha, BetaScope scope) {
    dynamic_bn_.emplace(source_stats_, gamma, alpha, scope);
  }

  std::size_t classifier_weight() const noexcept { return classifier_weight_; }
  std::size_t classifier_bias() const noexcept { return classifier_bias_; }

 private:
  std::size_t add_conv_weight(const std::string& name, std::size_t out, std::size_t in, std::size_t k,
                              std::uint64_t seed) {
    BasicTensor<T> w(Shape{out, in, k, k});
    SplitMix64 rng(derive_seed(seed, hash_tag("init"), hash_tag(name)));
    const double stddev = std::sqrt(2.0 / static_cast<double>(in * k * k));
    for (T& v : w.values()) v = static_cast<T>(rng.normal(0.0, stddev));
    return params_.add(name, std::move(w));
  }

  ModelSpec spec_;
  ParamStore<T> params_;
  std::vector<BnLayer> bn_;
  std::vector<Block> blocks_;
  std::vector<ChannelStats> source_stats_;
  std::optional<DynamicBn> dynamic_bn_;
  std::size_t classifier_weight_ = 0, classifier_bias_ = 0;
};

/// He-initialized model; BN scale 1, shift 0, source stats (0, 1).
template <class T = float>
SegModel<T> build_model(const ModelSpec& spec, std::uint64_t seed) {
  return SegModel<T>(spec, seed);
}

/// Runs the network on an N x C x H x W image already placed on `tape`.
/// BN layers normalize with source statistics, the current batch's moments,
/// or the dynamic interpolation held by the model. BnMode::train uses batch
/// moments and differentiates through them.
template <class T>
Var<T> forward_segment(SegModel<T>& model, Var<T> image, BnMode mode, ForwardTrace* trace = nullptr) {
  Tape<T>& tape = *image.tape;
  const ModelSpec& spec = model.spec();
  const std::size_t factor = spec.upsample_factor();
  if (image.value().rank() != 4 || image.value().dim(1) != spec.in_channels) {
    throw ConfigError("forward_segment: expected N x " + std::to_string(spec.in_channels) +
                      " x H x W input, got " + shape_str(image.value().shape()));
  }
  if (image.value().dim(2) % factor != 0 || image.value().dim(3) % factor != 0) {
    throw ConfigError("forward_segment: input " + shape_str(image.value().shape()) +
                      " is not divisible by the output stride " + std::to_string(factor));
  }
  if (mode == BnMode::interpolated && !model.dynamic_bn()) {
    throw ConfigError("forward_segment: interpolated BN mode requires an adaptation state");
  }
  if (trace) *trace = ForwardTrace{};
  DynamicBn* dyn = mode == BnMode::interpolated ? &*model.dynamic_bn() : nullptr;
  if (dyn) dyn->begin_frame();

  ParamStore<T>& ps = model.params();
  Var<T> h = image;
  for (const auto& block : model.blocks()) {
    const auto& bn = model.bn_layers()[block.bn];
    h = conv2d(h, tape.parameter(ps, block.weight), tape.parameter(ps, block.bias), block.stride, block.pad);
    Var<T> scale = tape.parameter(ps, bn.scale);
    Var<T> shift = tape.parameter(ps, bn.shift);
    const ChannelStats& source = model.source_stats()[block.bn];
    if (mode == BnMode::train) {
      ChannelStats moments;
      h = batchnorm2d_train(h, scale, shift, kBnEps, &moments);
      if (trace) {
        trace->batch.push_back(moments);
        trace->used.push_back(moments);
        trace->beta.push_back(1.0);
      }
    } else {
      const bool need_batch = trace != nullptr || mode != BnMode::source;
      ChannelStats batch = need_batch ? batch_stats(h.value()) : ChannelStats{};
      ChannelStats used;
      double beta = 0.0;
      switch (mode) {
        case BnMode::source: used = source; break;
        case BnMode::batch: used = batch; beta = 1.0; break;
        case BnMode::interpolated:
          used = dyn->stats_for_layer(block.bn, batch);
          beta = dyn->layer(block.bn).beta;
          break;
        case BnMode::train: break;
      }
      h = batchnorm2d(h, used, scale, shift, kBnEps);
      if (trace) {
        trace->batch.push_back(std::move(batch));
        trace->used.push_back(std::move(used));
        trace->beta.push_back(beta);
      }
    }
    h = relu(h);
  }
  h = conv2d(h, tape.parameter(ps, model.classifier_weight()), tape.parameter(ps, model.classifier_bias()), 1, 0);
  if (dyn) dyn->end_frame();
  return factor == 1 ? h : upsample_nearest(h, factor);
}

/// Marks exactly the selected parameters trainable. Returns the number of
/// trainable scalars.
template <class T>
std::size_t select_trainable(SegModel<T>& model, const ParamSelector& selector) {
  for (auto& p : model.params()) {
    const bool backbone = p.name.starts_with("backbone.");
    const bool in_region = selector.region == Region::both ||
                           (selector.region == Region::backbone && backbone) ||
                           (selector.region == Region::head && !backbone);
    const bool in_scope = selector.scope == Scope::all_weights || is_bn_affine(p.name);
    p.trainable = selector.region != Region::none && in_region && in_scope;
  }
  return model.params().trainable_numel();
}

/// Everything restore() brings back: parameter values, trainable flags, Adam
/// moments and step, source statistics, and the dynamic BN memory.
template <class T>
struct ModelSnapshot {
  std::uint32_t fingerprint = 0;
  ParamStore<T> params;
  std::vector<ChannelStats> source_stats;
  std::optional<DynamicBn> dynamic_bn;
};

template <class T>
ModelSnapshot<T> snapshot(const SegModel<T>& model) {
  return ModelSnapshot<T>{model.fingerprint(), model.params(), model.source_stats(), model.dynamic_bn()};
}

template <class T>
void restore(SegModel<T>& model, const ModelSnapshot<T>& state) {
  if (state.fingerprint != model.fingerprint()) {
    throw ConfigError("restore: snapshot was taken from a different model spec");
  }
  model.params() = state.params;
  model.set_source_stats(state.source_stats);
  model.dynamic_bn() = state.dynamic_bn;
}

/// teacher <- momentum * teacher + (1 - momentum) * student, every parameter.
template <class T>
void ema_update(SegModel<T>& teacher, const SegModel<T>& student, double momentum) {
  if (teacher.fingerprint() != student.fingerprint()) {
    throw ConfigError("ema_update: teacher and student specs differ");
  }
  for (std::size_t i = 0; i < teacher.params().size(); ++i) {
    auto& tv = teacher.params()[i].value;
    const auto& sv = student.params()[i].value;
    if (momentum == 1.0) continue;
    for (std::size_t k = 0; k < tv.size(); ++k) {
      tv[k] = static_cast<T>(momentum * static_cast<double>(tv[k]) + (1.0 - momentum) * static_cast<double>(sv[k]));
    }
  }
}

/// Resets each scalar weight to its source value with probability `rate`.
/// Only parameters are restored; BN statistics are left alone.
template <class T>
std::size_t stochastic_restore(SegModel<T>& model, const ParamStore<T>& source, double rate, SplitMix64& rng) {
  if (source.size() != model.params().size()) {
    throw ConfigError("stochastic_restore: source parameter set does not match the model");
  }
  if (rate <= 0.0) return 0;
  std::size_t restored = 0;
  for (std::size_t i = 0; i < source.size(); ++i) {
    auto& v = model.params()[i].value;
    const auto& s = source[i].value;
    for (std::size_t k = 0; k < v.size(); ++k) {
      if (rng.bernoulli(rate)) {
        v[k] = s[k];
        ++restored;
      }
    }
  }
  return restored;
}

}  // namespace ctta
