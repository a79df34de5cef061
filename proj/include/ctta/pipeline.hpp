#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ctta/adapt.hpp"
#include "ctta/channel_stats.hpp"
#include "ctta/frame.hpp"
#include "ctta/metrics.hpp"
#include "ctta/rng.hpp"
#include "ctta/segmodel.hpp"

namespace ctta {

/// Seed of one (sequence, method) cell; independent of run order.
inline std::uint64_t cell_seed(std::uint64_t base, const std::string& sequence, const std::string& method) {
  return derive_seed(base, hash_tag(sequence), hash_tag(method));
}

/// Streams a sequence through a fresh runner and scores every frame.
template <class T>
SequenceReport run_sequence(const SegModel<T>& source, const std::string& sequence, const std::vector<Frame>& frames,
                            const std::vector<double>& severities, const MethodConfig& method, std::uint64_t seed) {
  TtaRunner<T> runner(source, method, cell_seed(seed, sequence, method.name));
  SequenceReport report;
  report.sequence = sequence;
  report.method = method.name;
  std::vector<ConfusionMatrix> confusions;
  confusions.reserve(frames.size());
  const std::size_t classes = source.spec().classes;
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const StepResult<T> r = runner.step(frames[t].image.template cast<T>());
    ConfusionMatrix cm(classes);
    cm.update(argmax_labels(r.logits), frames[t].labels);

    FrameRecord rec;
    rec.frame = t;
    rec.miou = miou(cm);
    rec.mean_entropy = r.mean_entropy;
    rec.gate = r.gate;
    rec.severity = t < severities.size() ? severities[t] : 0.0;
    const std::size_t layers = r.trace.batch.size();
    for (std::size_t l = 0; l < layers; ++l) {
      const double d = sym_kl(r.trace.batch[l], source.source_stats()[l]);
      if (l == 0) rec.kl_first_layer = d;
      rec.kl_to_source += d / static_cast<double>(layers);
      rec.kl_used_to_batch += sym_kl(r.trace.used[l], r.trace.batch[l]) / static_cast<double>(layers);
      rec.beta += r.trace.beta[l] / static_cast<double>(layers);
    }
    report.frames.push_back(rec);
    confusions.push_back(std::move(cm));
  }
  report.scores = windowed_scores(confusions);
  return report;
}

}  // namespace ctta
