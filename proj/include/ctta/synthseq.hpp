#pragma once

// Synthetic scenes and gradual domain-shift sequences. Every random draw
// comes from a stream derived from (seed, frame, purpose), so content never
// depends on generation order.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ctta/channel_stats.hpp"
#include "ctta/errors.hpp"
#include "ctta/frame.hpp"
#include "ctta/rng.hpp"
#include "ctta/tensor.hpp"

namespace ctta {

enum class ShiftKind { night, fog, rain };
enum class SeverityProfile { triangular, plateau };

inline std::string to_string(ShiftKind k) {
  switch (k) {
    case ShiftKind::night: return "night";
    case ShiftKind::fog: return "fog";
    case ShiftKind::rain: return "rain";
  }
  return "?";
}

inline ShiftKind parse_shift_kind(const std::string& s) {
  if (s == "night") return ShiftKind::night;
  if (s == "fog") return ShiftKind::fog;
  if (s == "rain" || s == "rain-noise") return ShiftKind::rain;
  throw ConfigError("unknown shift kind '" + s + "' (expected night, fog or rain)");
}

inline std::string to_string(SeverityProfile p) { return p == SeverityProfile::plateau ? "plateau" : "triangular"; }

inline SeverityProfile parse_profile(const std::string& s) {
  if (s == "triangular") return SeverityProfile::triangular;
  if (s == "plateau") return SeverityProfile::plateau;
  throw ConfigError("unknown severity profile '" + s + "' (expected triangular or plateau)");
}

struct SceneSpec {
  std::size_t width = 64;
  std::size_t height = 64;
  std::size_t classes = 14;
  std::size_t shapes = 10;
  std::uint64_t seed = 0;
};

struct SequenceSpec {
  std::string name;
  SceneSpec scene;
  std::size_t length = 401;
  ShiftKind kind = ShiftKind::night;
  double peak = 1.0;
  SeverityProfile profile = SeverityProfile::triangular;
  double drift = 1.0;  // pixels per frame, horizontal
};

/// Severity in [0, peak] at frame t: a triangle peaking at the middle frame;
/// the plateau variant reaches the peak earlier and holds it over the middle
/// 20% of the sequence.
inline double severity(std::size_t t, const SequenceSpec& spec) {
  if (spec.length < 2) return 0.0;
  const double x = static_cast<double>(t) / static_cast<double>(spec.length - 1);
  const double tri = 1.0 - std::abs(2.0 * x - 1.0);
  if (spec.profile == SeverityProfile::plateau) return spec.peak * std::min(1.0, tri / 0.8);
  return spec.peak * tri;
}

struct Rgb {
  double r, g, b;
};

/// Base color per class; class 0 is background.
inline Rgb class_color(std::size_t label) {
  static constexpr std::array<Rgb, 14> kPalette{{
      {0.50, 0.50, 0.50}, {0.85, 0.15, 0.15}, {0.15, 0.85, 0.15}, {0.15, 0.15, 0.85},
      {0.85, 0.85, 0.15}, {0.85, 0.15, 0.85}, {0.15, 0.85, 0.85}, {0.85, 0.50, 0.15},
      {0.50, 0.15, 0.85}, {0.15, 0.50, 0.15}, {0.85, 0.85, 0.85}, {0.15, 0.15, 0.15},
      {0.50, 0.85, 0.50}, {0.50, 0.15, 0.15},
  }};
  if (label < kPalette.size()) return kPalette[label];
  // Extra classes beyond the palette get a deterministic pseudo-random color.
  SplitMix64 rng(derive_seed(0xC0105, label));
  return {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)};
}

/// Multiplicative stripe texture of a class at scene coordinates (u, v):
/// 1 + 0.25 sin(...) with a class-specific orientation and period. The
/// background is flat.
inline double class_texture(std::size_t label, double u, double v) {
  if (label == 0) return 1.0;
  static constexpr double kPi = 3.14159265358979323846;
  const double angle = static_cast<double>((label - 1) % 4) * kPi / 4.0;
  const double period = 3.0 + 2.0 * static_cast<double>(((label - 1) / 4) % 4);
  const double phase = (u * std::cos(angle) + v * std::sin(angle)) / period;
  return 1.0 + 0.25 * std::sin(2.0 * kPi * phase);
}

struct ShapeInstance {
  enum class Kind { rect, disk, triangle } kind = Kind::rect;
  std::uint8_t label = 1;
  double cx = 0, cy = 0;
  double a = 0, b = 0;  // rect: width, height; disk: radius; triangle: base, height
  double shade = 1.0;

  /// Containment of a point given relative to the shape center.
  bool contains(double dx, double dy) const {
    switch (kind) {
      case Kind::rect: return std::abs(dx) <= a / 2 && std::abs(dy) <= b / 2;
      case Kind::disk: return dx * dx + dy * dy <= a * a;
      case Kind::triangle: {
        const double t = (dy + b / 2) / b;
        return t >= 0.0 && t <= 1.0 && std::abs(dx) <= t * a / 2;
      }
    }
    return false;
  }
};

struct Scene {
  SceneSpec spec;
  double background_shade = 1.0;
  std::vector<ShapeInstance> shapes;
};

namespace detail {

inline double wrap_dx(double dx, double width) {
  dx = std::fmod(dx + width / 2, width);
  if (dx < 0) dx += width;
  return dx - width / 2;
}

// Index of the topmost shape covering each pixel, or -1 for background.
inline std::vector<int> coverage(const Scene& scene, double offset) {
  const std::size_t h = scene.spec.height, w = scene.spec.width;
  std::vector<int> owner(h * w, -1);
  for (std::size_t s = 0; s < scene.shapes.size(); ++s) {
    const ShapeInstance& sh = scene.shapes[s];
    for (std::size_t y = 0; y < h; ++y) {
      const double dy = static_cast<double>(y) + 0.5 - sh.cy;
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = wrap_dx(static_cast<double>(x) + 0.5 - (sh.cx + offset), static_cast<double>(w));
        if (sh.contains(dx, dy)) owner[y * w + x] = static_cast<int>(s);
      }
    }
  }
  return owner;
}

// Every class region keeps IoU >= 0.9 with itself shifted by one pixel
// horizontally, so consecutive frames of a drifting sequence stay coherent.
inline bool drift_stable(const Scene& scene) {
  const std::size_t h = scene.spec.height, w = scene.spec.width, k = scene.spec.classes;
  const std::vector<int> owner = coverage(scene, 0.0);
  std::vector<std::size_t> inter(k, 0), uni(k, 0);
  auto label_at = [&](std::size_t y, std::size_t x) {
    const int o = owner[y * w + x];
    return o < 0 ? std::size_t{0} : std::size_t{scene.shapes[static_cast<std::size_t>(o)].label};
  };
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t a = label_at(y, x);
      const std::size_t b = label_at(y, (x + w - 1) % w);
      if (a == b) {
        ++inter[a];
        ++uni[a];
      } else {
        ++uni[a];
        ++uni[b];
      }
    }
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (uni[c] > 0 && static_cast<double>(inter[c]) < 0.9 * static_cast<double>(uni[c])) return false;
  }
  return true;
}

}  // namespace detail

/// Places up to `spec.shapes` shapes, rejecting candidates that would leave
/// any class region unstable under a one-pixel drift.
inline Scene make_scene(const SceneSpec& spec) {
  if (spec.width == 0 || spec.height == 0 || spec.classes < 2 || spec.classes > 256) {
    throw ConfigError("scene spec: need positive size and 2..256 classes");
  }
  Scene scene;
  scene.spec = spec;
  SplitMix64 rng(derive_seed(spec.seed, hash_tag("scene")));
  scene.background_shade = rng.uniform(0.92, 1.08);
  const double w = static_cast<double>(spec.width), h = static_cast<double>(spec.height);
  const double unit = std::min(w, h) / 64.0;
  constexpr int kAttemptsPerShape = 100;
  for (std::size_t placed = 0, attempts = 0;
       placed < spec.shapes && attempts < kAttemptsPerShape * spec.shapes; ++attempts) {
    ShapeInstance s;
    s.kind = static_cast<ShapeInstance::Kind>(rng.below(3));
    s.label = static_cast<std::uint8_t>(1 + rng.below(spec.classes - 1));
    s.cx = rng.uniform(0, w);
    s.cy = rng.uniform(0, h);
    switch (s.kind) {
      case ShapeInstance::Kind::rect:
        s.a = rng.uniform(18, 34) * unit;
        s.b = rng.uniform(18, 34) * unit;
        break;
      case ShapeInstance::Kind::disk:
        s.a = rng.uniform(10, 17) * unit;
        break;
      case ShapeInstance::Kind::triangle:
        s.a = rng.uniform(22, 38) * unit;
        s.b = rng.uniform(20, 34) * unit;
        break;
    }
    s.shade = rng.uniform(0.92, 1.08);
    scene.shapes.push_back(s);
    if (detail::drift_stable(scene)) {
      ++placed;
    } else {
      scene.shapes.pop_back();
    }
  }
  return scene;
}

/// Rasterizes the scene translated horizontally by `offset` pixels (wrapping
/// around). Later shapes occlude earlier ones.
inline Frame render_frame(const Scene& scene, double offset) {
  const std::size_t h = scene.spec.height, w = scene.spec.width;
  Frame f{Tensor(Shape{3, h, w}), LabelMap(h, w)};
  const std::vector<int> owner = detail::coverage(scene, offset);
  for (std::size_t i = 0; i < h * w; ++i) {
    const int o = owner[i];
    std::size_t label = 0;
    double shade = scene.background_shade;
    if (o >= 0) {
      label = scene.shapes[static_cast<std::size_t>(o)].label;
      shade = scene.shapes[static_cast<std::size_t>(o)].shade;
    }
    const Rgb c = class_color(label);
    const double tex = shade * class_texture(label, static_cast<double>(i % w) + 0.5 - offset,
                                             static_cast<double>(i / w) + 0.5);
    f.labels.data[i] = static_cast<std::uint8_t>(label);
    f.image[i] = static_cast<float>(std::clamp(c.r * tex, 0.0, 1.0));
    f.image[h * w + i] = static_cast<float>(std::clamp(c.g * tex, 0.0, 1.0));
    f.image[2 * h * w + i] = static_cast<float>(std::clamp(c.b * tex, 0.0, 1.0));
  }
  return f;
}

/// Night darkening of one channel value: 0.2^s * v^(1+s). Identity at
/// severity 0; at severity 1 mid-gray 0.5 becomes 0.05, a tenfold drop.
inline double night_darken(double v, double s) { return std::pow(0.2, s) * std::pow(v, 1.0 + s); }

/// Fog blend weight for image row y: 0.85 s at the top row, falling linearly
/// to half that at the bottom row (nearer scenery is less hazy).
inline double fog_weight(double s, std::size_t y, std::size_t height) {
  const double depth = height > 1 ? static_cast<double>(y) / static_cast<double>(height - 1) : 0.0;
  return 0.85 * s * (1.0 - 0.5 * depth);
}

/// Photometric domain shift of a 3 x H x W image. Severity 0 returns the
/// input unchanged; outputs are clamped to [0, 1].
///   night: night_darken on every channel, blue lifted by 0.05 s
///   fog:   blend toward gray 0.7 with weight fog_weight(s, y)
///   rain:  desaturation by 0.3 s plus Gaussian noise of sigma 0.15 s
inline Tensor apply_shift(const Tensor& image, ShiftKind kind, double s, SplitMix64& rng) {
  if (s < 0.0 || s > 1.0) throw ConfigError("apply_shift: severity must be in [0, 1]");
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ConfigError("apply_shift expects a 3 x H x W image, got " + shape_str(image.shape()));
  }
  if (s == 0.0) return image;
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  Tensor out(image.shape());
  auto put = [&](std::size_t c, std::size_t i, double v) {
    out[c * plane + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  };
  switch (kind) {
    case ShiftKind::night: {
      for (std::size_t i = 0; i < plane; ++i) {
        put(0, i, night_darken(image[i], s));
        put(1, i, night_darken(image[plane + i], s));
        put(2, i, night_darken(image[2 * plane + i], s) + 0.05 * s);
      }
      break;
    }
    case ShiftKind::fog: {
      for (std::size_t y = 0; y < h; ++y) {
        const double a = fog_weight(s, y, h);
        for (std::size_t c = 0; c < 3; ++c) {
          for (std::size_t x = 0; x < w; ++x) {
            put(c, y * w + x, (1.0 - a) * image[c * plane + y * w + x] + a * 0.7);
          }
        }
      }
      break;
    }
    case ShiftKind::rain: {
      const double d = 0.3 * s, sigma = 0.15 * s;
      for (std::size_t i = 0; i < plane; ++i) {
        const double luma = 0.299 * image[i] + 0.587 * image[plane + i] + 0.114 * image[2 * plane + i];
        for (std::size_t c = 0; c < 3; ++c) {
          put(c, i, (1.0 - d) * image[c * plane + i] + d * luma + rng.normal(0.0, sigma));
        }
      }
      break;
    }
  }
  return out;
}

/// Per-channel (RGB) pixel statistics of one image.
inline ChannelStats pixel_stats(const Tensor& image) { return batch_stats(as_batch(image)); }

struct Sequence {
  SequenceSpec spec;
  std::vector<Frame> frames;
  std::vector<double> severities;
};

/// Frame t of a sequence: the scene drifted by t * drift pixels, then shifted
/// photometrically at severity(t).
inline Frame sequence_frame(const Scene& scene, const SequenceSpec& spec, std::size_t t) {
  Frame f = render_frame(scene, spec.drift * static_cast<double>(t));
  SplitMix64 rng(derive_seed(spec.scene.seed, t, hash_tag("shift")));
  f.image = apply_shift(f.image, spec.kind, severity(t, spec), rng);
  return f;
}

inline Sequence generate_sequence(const SequenceSpec& spec) {
  if (spec.peak < 0.0 || spec.peak > 1.0) throw ConfigError("sequence '" + spec.name + "': peak severity must be in [0, 1]");
  Sequence seq{spec, {}, {}};
  const Scene scene = make_scene(spec.scene);
  seq.frames.reserve(spec.length);
  for (std::size_t t = 0; t < spec.length; ++t) {
    seq.frames.push_back(sequence_frame(scene, spec, t));
    seq.severities.push_back(severity(t, spec));
  }
  return seq;
}

/// Unshifted frames of independent random scenes at random drift offsets,
/// for source training and held-out source evaluation.
inline std::vector<Frame> source_frames(SceneSpec base, std::size_t count, std::uint64_t seed) {
  std::vector<Frame> frames;
  frames.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SceneSpec s = base;
    s.seed = derive_seed(seed, i, hash_tag("source-scene"));
    SplitMix64 rng(derive_seed(seed, i, hash_tag("source-offset")));
    frames.push_back(render_frame(make_scene(s), static_cast<double>(rng.below(base.width))));
  }
  return frames;
}

}  // namespace ctta
