#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "ctta/autodiff.hpp"
#include "ctta/checkpoint.hpp"
#include "ctta/errors.hpp"
#include "ctta/frame.hpp"
#include "ctta/metrics.hpp"
#include "ctta/params.hpp"
#include "ctta/rng.hpp"
#include "ctta/segmodel.hpp"

namespace ctta {

struct TrainOptions {
  std::size_t epochs = 12;
  std::size_t batch_size = 8;
  double learning_rate = 3e-3;
  double final_learning_rate = 3e-4;  // cosine decay target
  double stats_momentum = 0.1;
  bool jitter = false;  // photometric jitter of training images
  double gamma_max = 2.2;
  double contrast_min = 0.45;
  double noise_max = 0.08;
  std::uint64_t seed = 2023;
};

/// Random horizontal flip, gamma in [0.6, gamma_max], contrast in
/// [contrast_min, 1] around the image mean, brightness scale in [0.8, 1.2]
/// and Gaussian noise with sigma in [0, noise_max]; clamped to [0, 1].
/// Labels follow the flip.
inline void jitter_frame(Frame& f, SplitMix64& rng, const TrainOptions& opt) {
  const std::size_t h = f.image.dim(1), w = f.image.dim(2);
  if (rng.bernoulli(0.5)) {
    Tensor img(f.image.shape());
    LabelMap lab(h, w);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t c = 0; c < 3; ++c) img[(c * h + y) * w + x] = f.image[(c * h + y) * w + (w - 1 - x)];
        lab.at(y, x) = f.labels.at(y, w - 1 - x);
      }
    }
    f.image = std::move(img);
    f.labels = std::move(lab);
  }
  const double gamma = rng.uniform(0.6, opt.gamma_max), contrast = rng.uniform(opt.contrast_min, 1.0);
  const double gain = rng.uniform(0.8, 1.2), noise = rng.uniform(0.0, opt.noise_max);
  double mean = 0.0;
  for (float v : f.image.values()) mean += v;
  mean /= static_cast<double>(f.image.size());
  for (float& v : f.image.values()) {
    double x = std::pow(static_cast<double>(v), gamma);
    x = mean + contrast * (x - mean);
    x = x * gain + rng.normal(0.0, noise);
    v = static_cast<float>(std::clamp(x, 0.0, 1.0));
  }
}

struct TrainLog {
  std::vector<double> batch_loss;
  std::vector<double> epoch_loss;
};

/// Stacks frames into an N x 3 x H x W batch and N x K x H x W one-hot targets.
inline void make_batch(const std::vector<Frame>& data, const std::vector<std::size_t>& idx, std::size_t classes,
                       Tensor& images, Tensor& targets, SplitMix64* jitter_rng = nullptr,
                       const TrainOptions& opt = {}) {
  const std::size_t h = data[idx[0]].image.dim(1), w = data[idx[0]].image.dim(2), plane = h * w;
  images = Tensor(Shape{idx.size(), 3, h, w});
  targets = Tensor(Shape{idx.size(), classes, h, w});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    Frame f = data[idx[b]];
    if (jitter_rng) jitter_frame(f, *jitter_rng, opt);
    std::copy(f.image.values().begin(), f.image.values().end(), images.values().begin() + b * 3 * plane);
    for (std::size_t i = 0; i < plane; ++i) targets[(b * classes + f.labels.data[i]) * plane + i] = 1.0f;
  }
}

/// Supervised cross-entropy training with batch statistics. Source
/// statistics become running averages over the final epoch, seeded with its
/// first batch. A non-finite loss aborts with the seed and step.
template <class T>
TrainLog train_source(SegModel<T>& model, const std::vector<Frame>& data, const TrainOptions& opt,
                      const std::function<void(std::size_t epoch, double loss)>& on_epoch = {}) {
  TrainLog log;
  if (opt.epochs == 0) return log;
  if (data.empty()) throw ConfigError("train_source: empty dataset");
  if (opt.batch_size == 0) throw ConfigError("train_source: batch size must be positive");
  const std::size_t classes = model.spec().classes;
  const std::size_t layers = model.bn_layers().size();
  const std::size_t steps_per_epoch = (data.size() + opt.batch_size - 1) / opt.batch_size;
  const std::size_t total_steps = steps_per_epoch * opt.epochs;

  select_trainable(model, ParamSelector{Region::both, Scope::all_weights});
  model.params().reset_optimizer();
  model.params().zero_grad();

  std::vector<std::vector<double>> run_mu(layers), run_var(layers);
  std::size_t step = 0;
  std::vector<std::size_t> order(data.size());
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    SplitMix64 rng(derive_seed(opt.seed, epoch, hash_tag("shuffle")));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    const bool last_epoch = epoch + 1 == opt.epochs;
    double epoch_loss = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      const std::size_t lo = s * opt.batch_size, hi = std::min(order.size(), lo + opt.batch_size);
      const std::vector<std::size_t> idx(order.begin() + lo, order.begin() + hi);
      Tensor images, targets;
      SplitMix64 jrng(derive_seed(opt.seed, step, hash_tag("jitter")));
      make_batch(data, idx, classes, images, targets, opt.jitter ? &jrng : nullptr, opt);

      Tape<T> tape;
      ForwardTrace trace;
      Var<T> logits = forward_segment(model, tape.constant(images.template cast<T>()), BnMode::train, &trace);
      Var<T> loss = cross_entropy_loss(logits, targets.template cast<T>());
      const double loss_v = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(loss_v)) {
        throw NumericError("training diverged: non-finite loss at step " + std::to_string(step) + " (seed " +
                           std::to_string(opt.seed) + ")");
      }
      tape.backward(loss);
      const double progress = total_steps > 1 ? static_cast<double>(step) / static_cast<double>(total_steps - 1) : 1.0;
      const double lr = opt.final_learning_rate +
                        0.5 * (opt.learning_rate - opt.final_learning_rate) * (1.0 + std::cos(M_PI * progress));
      adam_step(model.params(), lr);
      log.batch_loss.push_back(loss_v);
      epoch_loss += loss_v;

      if (last_epoch) {
        for (std::size_t l = 0; l < layers; ++l) {
          const ChannelStats& m = trace.batch[l];
          std::vector<double> var(m.channels());
          for (std::size_t c = 0; c < var.size(); ++c) var[c] = m.sigma[c] * m.sigma[c];
          if (s == 0) {
            run_mu[l] = m.mu;
            run_var[l] = var;
          } else {
            for (std::size_t c = 0; c < var.size(); ++c) {
              run_mu[l][c] = (1.0 - opt.stats_momentum) * run_mu[l][c] + opt.stats_momentum * m.mu[c];
              run_var[l][c] = (1.0 - opt.stats_momentum) * run_var[l][c] + opt.stats_momentum * var[c];
            }
          }
        }
      }
    }
    log.epoch_loss.push_back(epoch_loss / static_cast<double>(steps_per_epoch));
    if (on_epoch) on_epoch(epoch, log.epoch_loss.back());
  }

  std::vector<ChannelStats> stats;
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<double> mu(run_mu[l].size()), sigma(run_mu[l].size());
    // Rounded through float so the in-memory model equals its checkpoint.
    for (std::size_t c = 0; c < mu.size(); ++c) {
      mu[c] = static_cast<float>(run_mu[l][c]);
      sigma[c] = static_cast<float>(std::sqrt(run_var[l][c]));
    }
    stats.emplace_back(std::move(mu), std::move(sigma));
  }
  model.set_source_stats(std::move(stats));
  model.params().reset_optimizer();
  return log;
}

/// mIoU (percent) of the model over labeled frames, one frame per forward.
template <class T>
double evaluate_miou(SegModel<T>& model, const std::vector<Frame>& frames, BnMode mode = BnMode::source) {
  ConfusionMatrix cm(model.spec().classes);
  for (const Frame& f : frames) {
    Tape<T> tape;
    Var<T> logits = forward_segment(model, tape.constant(as_batch(f.image).template cast<T>()), mode);
    cm.update(argmax_labels(logits.value()), f.labels);
  }
  return miou(cm);
}

}  // namespace ctta
