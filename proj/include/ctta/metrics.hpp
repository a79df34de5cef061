#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "ctta/errors.hpp"
#include "ctta/frame.hpp"
#include "ctta/tensor.hpp"

namespace ctta {

/// K x K pixel counts; rows are ground truth, columns predictions.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t classes) : k_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const noexcept { return k_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_.at(gt * k_ + pred); }
  const std::vector<std::uint64_t>& counts() const noexcept { return counts_; }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  void add(std::size_t gt, std::size_t pred) {
    if (gt >= k_ || pred >= k_) throw ConfigError("confusion: label out of range");
    ++counts_[gt * k_ + pred];
  }

  /// Tallies one prediction/ground-truth pair of label maps.
  void update(const LabelMap& pred, const LabelMap& gt) {
    if (pred.height != gt.height || pred.width != gt.width) {
      throw ConfigError("confusion: prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                        " vs ground truth " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
    }
    for (std::size_t y = 0; y < gt.height; ++y) {
      for (std::size_t x = 0; x < gt.width; ++x) {
        const std::size_t g = gt.at(y, x), p = pred.at(y, x);
        if (g >= k_ || p >= k_) {
          throw ConfigError("confusion: label out of range at pixel (y=" + std::to_string(y) +
                            ", x=" + std::to_string(x) + "): gt " + std::to_string(g) + ", pred " +
                            std::to_string(p) + ", classes " + std::to_string(k_));
        }
        ++counts_[g * k_ + p];
      }
    }
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw ConfigError("confusion: cannot merge matrices of different class counts");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    return *this;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t k_ = 0;
  std::vector<std::uint64_t> counts_;
};

/// Per-pixel argmax over the class axis of sample `n`; ties go to the lower
/// class index.
template <class T>
LabelMap argmax_labels(const BasicTensor<T>& logits, std::size_t n = 0) {
  if (logits.rank() != 4) throw ConfigError("argmax_labels expects N x K x H x W, got " + shape_str(logits.shape()));
  const std::size_t k = logits.dim(1), h = logits.dim(2), w = logits.dim(3), plane = h * w;
  if (k > 256) throw ConfigError("argmax_labels: more than 256 classes");
  LabelMap out(h, w);
  const T* base = logits.data() + n * k * plane;
  for (std::size_t i = 0; i < plane; ++i) {
    std::size_t best = 0;
    T best_v = base[i];
    for (std::size_t c = 1; c < k; ++c) {
      const T v = base[c * plane + i];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    out.data[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

/// Mean IoU in percent over classes with a nonzero union.
inline double miou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw NumericError("miou: no pixels accumulated");
  const std::size_t k = cm.classes();
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::uint64_t diag = cm.at(c, c);
    const std::uint64_t uni = row + col - diag;
    if (uni == 0) continue;
    sum += static_cast<double>(diag) / static_cast<double>(uni);
    ++present;
  }
  return 100.0 * sum / static_cast<double>(present);
}

/// Inclusive frame range.
struct Window {
  std::size_t first = 0;
  std::size_t last = 0;
};

inline constexpr Window kSourceWindow{0, 19};
inline constexpr Window kTargetWindow{180, 220};
inline constexpr Window kLoopbackWindow{380, 400};

inline double score_drop(double source, double target) { return source - target; }
inline double score_overall(double all, double drop) { return all - 2.0 * drop; }

/// Sequence-level scores. Windows the sequence is too short for are absent,
/// and so are drop and overall when either of their windows is.
struct WindowScores {
  double all = 0.0;
  std::optional<double> source, target, loopback, drop, overall;
};

/// Merges frame confusions in frame order over each window.
inline WindowScores windowed_scores(const std::vector<ConfusionMatrix>& frames) {
  if (frames.empty()) throw NumericError("windowed_scores: no frames");
  auto merged = [&](std::size_t first, std::size_t last) {
    ConfusionMatrix cm(frames.front().classes());
    for (std::size_t t = first; t <= last; ++t) cm += frames[t];
    return cm;
  };
  auto window = [&](Window w) -> std::optional<double> {
    if (w.last >= frames.size()) return std::nullopt;
    return miou(merged(w.first, w.last));
  };
  WindowScores s;
  s.all = miou(merged(0, frames.size() - 1));
  s.source = window(kSourceWindow);
  s.target = window(kTargetWindow);
  s.loopback = window(kLoopbackWindow);
  if (s.source && s.target) {
    s.drop = score_drop(*s.source, *s.target);
    s.overall = score_overall(s.all, *s.drop);
  }
  return s;
}

/// Six significant digits, locale independent for the values we print.
inline std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  std::string s = buf;
  if (s == "-0") s = "0";
  return s;
}

inline std::string format_optional(const std::optional<double>& v) { return v ? format_real(*v) : ""; }

enum class GateMark { off, hold, adapt };

inline std::string to_string(GateMark g) {
  switch (g) {
    case GateMark::off: return "off";
    case GateMark::hold: return "hold";
    case GateMark::adapt: return "adapt";
  }
  return "?";
}

/// One row of a sequence report plus the analysis-only columns.
struct FrameRecord {
  std::size_t frame = 0;
  double miou = 0.0;
  double mean_entropy = 0.0;
  double kl_to_source = 0.0;        // layer-averaged distance of batch stats to source stats
  double kl_first_layer = 0.0;      // same, first BN layer only
  double kl_used_to_batch = 0.0;    // layer-averaged distance of normalization stats to batch stats
  double beta = 0.0;                // mean applied mixing weight over layers
  GateMark gate = GateMark::off;
  double severity = 0.0;
};

struct SequenceReport {
  std::string sequence;
  std::string method;
  std::vector<FrameRecord> frames;
  WindowScores scores;
};

inline std::string report_csv(const SequenceReport& r) {
  std::string out = "frame,miou,mean_entropy,kl_to_source,beta,gate\n";
  for (const auto& f : r.frames) {
    out += std::to_string(f.frame) + "," + format_real(f.miou) + "," + format_real(f.mean_entropy) + "," +
           format_real(f.kl_to_source) + "," + format_real(f.beta) + "," + to_string(f.gate) + "\n";
  }
  return out;
}

/// Per-frame curves for plotting: accuracy, entropy and distances to source.
inline std::string analysis_csv(const SequenceReport& r) {
  std::string out = "frame,severity,miou,mean_entropy,kl_first_layer,kl_layer_mean,kl_used_to_batch\n";
  for (const auto& f : r.frames) {
    out += std::to_string(f.frame) + "," + format_real(f.severity) + "," + format_real(f.miou) + "," +
           format_real(f.mean_entropy) + "," + format_real(f.kl_first_layer) + "," + format_real(f.kl_to_source) +
           "," + format_real(f.kl_used_to_batch) + "\n";
  }
  return out;
}

inline const char* kSummaryHeader = "sequence,method,miou,miou_source,miou_target,miou_loopback,miou_drop,overall\n";

inline std::string summary_row(const SequenceReport& r) {
  const auto& s = r.scores;
  return r.sequence + "," + r.method + "," + format_real(s.all) + "," + format_optional(s.source) + "," +
         format_optional(s.target) + "," + format_optional(s.loopback) + "," + format_optional(s.drop) + "," +
         format_optional(s.overall) + "\n";
}

}  // namespace ctta
