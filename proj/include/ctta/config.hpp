#pragma once

// Flat key=value run configuration. One pair per line, '#' starts a comment,
// no sections; unknown or repeated keys are errors.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ctta/adapt.hpp"
#include "ctta/errors.hpp"
#include "ctta/segmodel.hpp"
#include "ctta/synthseq.hpp"
#include "ctta/train.hpp"

namespace ctta {

/// Defaults every method variant starts from before its own options apply.
struct MethodDefaults {
  double learning_rate = kBaseLearningRate / 4;
  double gamma = 0.1;
  double alpha = 0.005;
  double fraction = 0.3;
  double gate_threshold = 0.01;
  double ema_momentum = 0.999;
  double restore_rate = 0.01;
  std::size_t augmentations = 3;
};

struct RunConfig {
  std::uint64_t seed = 2023;
  std::filesystem::path data_dir = "data";
  std::filesystem::path out_dir = "out";
  std::filesystem::path checkpoint;  // empty: <out_dir>/source.dacp
  SceneSpec scene;
  std::vector<std::string> sequences{"night-0.7", "night-1.0", "fog-0.7", "fog-1.0", "rain-0.7", "rain-1.0"};
  std::size_t sequence_length = 401;
  double drift = 1.0;
  ModelSpec model;
  std::size_t train_frames = 400;
  std::size_t val_frames = 100;
  TrainOptions train;
  std::vector<std::string> methods{"@valsplit6"};
  MethodDefaults tta;
  std::size_t parallel = 1;
  bool ppm = false;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
  const double x = parse_number(key, v);
  if (x < 0 || x != std::floor(x) || x > 1e9) throw ConfigError("key '" + key + "': expected a nonnegative integer");
  return static_cast<std::size_t>(x);
}

inline std::vector<std::size_t> parse_counts(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(v)) out.push_back(parse_count(key, item));
  return out;
}

}  // namespace detail

/// Applies one key; throws ConfigError naming unknown keys and bad values.
inline void set_config_key(RunConfig& c, const std::string& key, const std::string& v) {
  using detail::parse_count;
  using detail::parse_number;
  if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_count(key, v));
  else if (key == "data_dir") c.data_dir = v;
  else if (key == "out_dir") c.out_dir = v;
  else if (key == "checkpoint") c.checkpoint = v;
  else if (key == "scene.width") c.scene.width = parse_count(key, v);
  else if (key == "scene.height") c.scene.height = parse_count(key, v);
  else if (key == "scene.classes") c.scene.classes = parse_count(key, v);
  else if (key == "scene.shapes") c.scene.shapes = parse_count(key, v);
  else if (key == "sequences") c.sequences = detail::split_list(v);
  else if (key == "sequence.length") c.sequence_length = parse_count(key, v);
  else if (key == "sequence.drift") c.drift = parse_number(key, v);
  else if (key == "model.backbone_widths") c.model.backbone_widths = detail::parse_counts(key, v);
  else if (key == "model.backbone_strides") c.model.backbone_strides = detail::parse_counts(key, v);
  else if (key == "model.head_widths") c.model.head_widths = detail::parse_counts(key, v);
  else if (key == "model.kernel") c.model.kernel = parse_count(key, v);
  else if (key == "train.frames") c.train_frames = parse_count(key, v);
  else if (key == "train.val_frames") c.val_frames = parse_count(key, v);
  else if (key == "train.epochs") c.train.epochs = parse_count(key, v);
  else if (key == "train.batch") c.train.batch_size = parse_count(key, v);
  else if (key == "train.lr") c.train.learning_rate = parse_number(key, v);
  else if (key == "train.final_lr") c.train.final_learning_rate = parse_number(key, v);
  else if (key == "train.stats_momentum") c.train.stats_momentum = parse_number(key, v);
  else if (key == "train.jitter") c.train.jitter = detail::parse_switch(key, v);
  else if (key == "train.gamma_max") c.train.gamma_max = parse_number(key, v);
  else if (key == "train.contrast_min") c.train.contrast_min = parse_number(key, v);
  else if (key == "train.noise_max") c.train.noise_max = parse_number(key, v);
  else if (key == "methods") c.methods = detail::split_list(v);
  else if (key == "tta.lr") c.tta.learning_rate = parse_learning_rate(v);
  else if (key == "tta.gamma") c.tta.gamma = parse_number(key, v);
  else if (key == "tta.alpha") c.tta.alpha = parse_number(key, v);
  else if (key == "tta.fraction") c.tta.fraction = parse_number(key, v);
  else if (key == "tta.gate_threshold") c.tta.gate_threshold = parse_number(key, v);
  else if (key == "tta.ema") c.tta.ema_momentum = parse_number(key, v);
  else if (key == "tta.restore") c.tta.restore_rate = parse_number(key, v);
  else if (key == "tta.augs") c.tta.augmentations = parse_count(key, v);
  else if (key == "parallel") c.parallel = parse_count(key, v);
  else if (key == "gen.ppm") c.ppm = detail::parse_switch(key, v);
  else throw ConfigError("unknown config key '" + key + "'");
}

/// Cross-key checks; the model's class count follows the scene's.
inline void finalize_config(RunConfig& c) {
  if (c.scene.width < 8 || c.scene.height < 8) throw ConfigError("scene.width and scene.height must be at least 8");
  if (c.scene.classes < 2 || c.scene.classes > 255) throw ConfigError("scene.classes must be in [2, 255]");
  if (c.sequence_length == 0) throw ConfigError("sequence.length must be positive");
  if (c.train.batch_size == 0) throw ConfigError("train.batch must be positive");
  if (c.train_frames == 0) throw ConfigError("train.frames must be positive");
  if (c.parallel == 0) throw ConfigError("parallel must be positive");
  if (c.sequences.empty()) throw ConfigError("sequences is empty");
  if (c.methods.empty()) throw ConfigError("methods is empty");
  c.model.classes = c.scene.classes;
  c.model.validate();
}

inline std::filesystem::path checkpoint_path(const RunConfig& c) {
  return c.checkpoint.empty() ? c.out_dir / "source.dacp" : c.checkpoint;
}

inline RunConfig parse_config(const std::string& text, const std::string& origin = "config") {
  RunConfig c;
  std::map<std::string, std::size_t> seen;
  std::stringstream ss(text);
  std::size_t lineno = 0;
  for (std::string line; std::getline(ss, line);) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected key=value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (seen.contains(key)) {
      throw ConfigError(where + ": key '" + key + "' repeats line " + std::to_string(seen[key]));
    }
    seen[key] = lineno;
    try {
      set_config_key(c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  finalize_config(c);
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.string());
}

/// "<kind>-<peak>" with an optional "-plateau" suffix, e.g. "night-1.0".
inline SequenceSpec parse_sequence(const std::string& name, const RunConfig& c) {
  SequenceSpec s;
  s.name = name;
  std::string rest = name;
  const std::string plateau = "-plateau";
  if (rest.size() > plateau.size() && rest.ends_with(plateau)) {
    s.profile = SeverityProfile::plateau;
    rest.resize(rest.size() - plateau.size());
  }
  const auto dash = rest.rfind('-');
  if (dash == std::string::npos || dash == 0) {
    throw ConfigError("sequence '" + name + "': expected <kind>-<peak>, e.g. night-1.0");
  }
  s.kind = parse_shift_kind(rest.substr(0, dash));
  s.peak = detail::parse_number("sequence peak", rest.substr(dash + 1));
  if (s.peak < 0.0 || s.peak > 1.0) throw ConfigError("sequence '" + name + "': peak must be in [0, 1]");
  s.scene = c.scene;
  s.scene.seed = derive_seed(c.seed, hash_tag("sequence"), hash_tag(name));
  s.length = c.sequence_length;
  s.drift = c.drift;
  return s;
}

inline std::string sweep_value(double v) { return format_real(v); }

/// Method variants of a named suite.
inline std::vector<std::string> suite_methods(const std::string& suite) {
  if (suite == "valsplit6") return {"source-only", "tent", "cotta", "ours"};
  if (suite == "ladder") return {"tent", "tent-backbone", "tent-backbone-dynbn", "ours"};
  if (suite == "table4") {
    return {"tent+region=backbone+scope=all", "tent+region=head+scope=all", "tent+scope=all",
            "tent-backbone",                  "tent+region=head",           "tent"};
  }
  if (suite == "sweep-fraction") {
    std::vector<std::string> out;
    for (double f : {0.40, 0.35, 0.30, 0.25, 0.20, 0.15}) out.push_back("ours+fraction=" + sweep_value(f));
    return out;
  }
  if (suite == "sweep-gamma-alpha") {
    std::vector<std::string> out;
    for (double g : {1.0, 0.1, 0.01, 0.001}) {
      for (double a : {0.5, 0.05, 0.005, 0.0005}) {
        out.push_back("ours+gamma=" + sweep_value(g) + "+alpha=" + sweep_value(a));
      }
    }
    return out;
  }
  throw ConfigError("unknown suite '" + suite + "' (expected valsplit6, ladder, table4, sweep-fraction or sweep-gamma-alpha)");
}

/// Expands "@suite" entries and drops repeats, keeping first occurrence order.
inline std::vector<std::string> expand_methods(const std::vector<std::string>& items) {
  std::vector<std::string> out;
  auto push = [&](const std::string& m) {
    if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(m);
  };
  for (const auto& item : items) {
    if (item.starts_with("@")) {
      for (const auto& m : suite_methods(item.substr(1))) push(m);
    } else {
      push(item);
    }
  }
  return out;
}

/// Parses a variant on top of the run's method defaults. The filter fraction
/// default only applies to variants that filter pixels.
inline MethodConfig resolve_method(const std::string& variant, const MethodDefaults& d) {
  const auto plus = variant.find('+');
  MethodConfig base = method_preset(variant.substr(0, plus));
  std::string prefix = variant.substr(0, plus);
  prefix += "+lr=" + format_real(d.learning_rate);
  prefix += "+gamma=" + format_real(d.gamma) + "+alpha=" + format_real(d.alpha);
  if (base.fraction) prefix += "+fraction=" + format_real(d.fraction);
  prefix += "+gate_threshold=" + format_real(d.gate_threshold) + "+ema=" + format_real(d.ema_momentum);
  prefix += "+restore=" + format_real(d.restore_rate) + "+augs=" + std::to_string(d.augmentations);
  MethodConfig c = parse_method(plus == std::string::npos ? prefix : prefix + variant.substr(plus));
  c.name = variant;
  return c;
}

}  // namespace ctta
