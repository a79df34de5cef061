#pragma once

// Implementations of the ctta subcommands, callable in-process. Each returns
// the process exit code for runtime outcomes and throws ConfigError for
// configuration problems.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ctta/adapt.hpp"
#include "ctta/binary_io.hpp"
#include "ctta/checkpoint.hpp"
#include "ctta/config.hpp"
#include "ctta/frame_store.hpp"
#include "ctta/metrics.hpp"
#include "ctta/pipeline.hpp"
#include "ctta/synthseq.hpp"
#include "ctta/train.hpp"

namespace ctta {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

inline FrameLayout frame_layout(const RunConfig& c) {
  return FrameLayout{c.scene.height, c.scene.width, c.scene.classes};
}

inline fs::path source_dir(const RunConfig& c, const std::string& split) { return c.data_dir / "source" / split; }

/// Reads frame_000.dafr, frame_001.dafr, ... until the first missing index.
inline std::vector<Frame> read_frame_dir(const fs::path& dir, const FrameLayout& layout) {
  if (!fs::is_directory(dir)) throw ConfigError("missing data directory " + dir.string());
  std::vector<Frame> frames;
  for (std::size_t t = 0;; ++t) {
    const fs::path p = dir / frame_filename(t);
    if (!fs::exists(p)) break;
    frames.push_back(read_frame(p, layout));
  }
  if (frames.empty()) throw ConfigError("no frames in " + dir.string());
  return frames;
}

namespace detail {

/// Fills a directory through a ".partial" sibling that replaces the target
/// only once complete; the sibling is removed on failure.
template <class Fill>
void populate_dir(const fs::path& dir, Fill&& fill) {
  const fs::path tmp = dir.string() + ".partial";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  try {
    fill(tmp);
  } catch (...) {
    fs::remove_all(tmp);
    throw;
  }
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

inline void write_frames(const fs::path& dir, const std::vector<Frame>& frames, std::size_t classes, bool ppm) {
  for (std::size_t t = 0; t < frames.size(); ++t) {
    write_frame(dir / frame_filename(t), frames[t], classes);
    if (ppm) {
      fs::path p = dir / frame_filename(t);
      p.replace_extension(".ppm");
      write_file_atomic(p, encode_ppm(frames[t].image));
    }
  }
}

}  // namespace detail

inline std::uint64_t split_seed(const RunConfig& c, const char* split) {
  return derive_seed(c.seed, hash_tag("source"), hash_tag(split));
}

inline int cmd_gen_data(const RunConfig& c, std::ostream& log = std::cout) {
  std::vector<SequenceSpec> specs;
  for (const auto& name : c.sequences) specs.push_back(parse_sequence(name, c));
  fs::create_directories(c.data_dir);

  const std::pair<const char*, std::size_t> splits[] = {{"train", c.train_frames}, {"val", c.val_frames}};
  for (const auto& [split, count] : splits) {
    if (count == 0) continue;
    const auto frames = source_frames(c.scene, count, split_seed(c, split));
    fs::create_directories(c.data_dir / "source");
    detail::populate_dir(source_dir(c, split),
                         [&](const fs::path& dir) { detail::write_frames(dir, frames, c.scene.classes, c.ppm); });
    log << "source/" << split << ": " << frames.size() << " frames\n";
  }
  for (const auto& spec : specs) {
    const Sequence seq = generate_sequence(spec);
    detail::populate_dir(c.data_dir / spec.name, [&](const fs::path& dir) {
      detail::write_frames(dir, seq.frames, c.scene.classes, c.ppm);
      write_text_atomic(dir / "severity.csv", severity_csv(seq.severities));
    });
    log << spec.name << ": " << seq.frames.size() << " frames\n";
  }
  return kExitOk;
}

inline int cmd_train_source(const RunConfig& c, std::ostream& log = std::cout) {
  const FrameLayout layout = frame_layout(c);
  const auto train = read_frame_dir(source_dir(c, "train"), layout);
  std::optional<std::vector<Frame>> val;
  if (fs::is_directory(source_dir(c, "val"))) val = read_frame_dir(source_dir(c, "val"), layout);

  SegModel<float> model(c.model, derive_seed(c.seed, hash_tag("model")));
  TrainOptions opt = c.train;
  opt.seed = derive_seed(c.seed, hash_tag("train"));
  std::string epochs_csv = "epoch,loss\n";
  train_source(model, train, opt, [&](std::size_t epoch, double loss) {
    epochs_csv += std::to_string(epoch) + "," + format_real(loss) + "\n";
    log << "epoch " << epoch << " loss " << format_real(loss) << "\n";
  });

  fs::create_directories(c.out_dir);
  const fs::path ck = checkpoint_path(c);
  if (ck.has_parent_path()) fs::create_directories(ck.parent_path());
  save_checkpoint(ck, make_checkpoint(model));
  write_text_atomic(c.out_dir / "train_log.csv", epochs_csv);
  if (val) {
    const double m = evaluate_miou(model, *val, BnMode::source);
    write_text_atomic(c.out_dir / "source_val.csv", "frames,miou\n" + std::to_string(val->size()) + "," +
                                                         format_real(m) + "\n");
    log << "held-out source mIoU " << format_real(m) << "\n";
  }
  log << "checkpoint " << ck.string() << "\n";
  return kExitOk;
}

struct CellOutcome {
  std::optional<SequenceReport> report;
  std::string error;
};

inline fs::path report_path(const RunConfig& c, const std::string& kind, const std::string& seq,
                            const std::string& method) {
  return c.out_dir / kind / seq / (method + ".csv");
}

/// Runs every (sequence, method) cell on `c.parallel` threads. Each cell
/// reloads the checkpoint file and its frames, so outputs do not depend on the
/// thread count or scheduling. A failing cell is recorded and the rest
/// continue.
inline int cmd_run_tta(const RunConfig& c, std::ostream& log = std::cout) {
  const auto methods = expand_methods(c.methods);
  std::vector<MethodConfig> configs;
  for (const auto& m : methods) configs.push_back(resolve_method(m, c.tta));
  for (const auto& s : c.sequences) {
    if (!fs::is_directory(c.data_dir / s)) throw ConfigError("missing data directory " + (c.data_dir / s).string());
  }
  const fs::path ck = checkpoint_path(c);
  {
    SegModel<float> probe(c.model, 0);
    apply_checkpoint(probe, load_checkpoint(ck));
  }

  struct Cell {
    std::size_t seq;
    std::size_t method;
  };
  std::vector<Cell> cells;
  for (std::size_t s = 0; s < c.sequences.size(); ++s) {
    for (std::size_t m = 0; m < configs.size(); ++m) cells.push_back({s, m});
  }
  std::vector<CellOutcome> outcomes(cells.size());
  std::atomic<std::size_t> next{0};
  const FrameLayout layout = frame_layout(c);

  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const std::string& seq = c.sequences[cells[i].seq];
      const MethodConfig& method = configs[cells[i].method];
      try {
        const auto frames = read_frame_dir(c.data_dir / seq, layout);
        std::vector<double> severities;
        const fs::path sev = c.data_dir / seq / "severity.csv";
        if (fs::exists(sev)) {
          const Bytes b = read_file(sev);
          severities = parse_severity_csv(std::string(b.begin(), b.end()), sev.string());
        }
        SegModel<float> model(c.model, 0);
        apply_checkpoint(model, load_checkpoint(ck));
        outcomes[i].report = run_sequence(model, seq, frames, severities, method, c.seed);
      } catch (const std::exception& e) {
        outcomes[i].error = e.what();
      }
    }
  };
  const std::size_t threads = std::min(c.parallel, cells.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::string summary = kSummaryHeader;
  std::string failures = "sequence,method,error\n";
  bool failed = false;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const std::string& seq = c.sequences[cells[i].seq];
    const std::string& name = configs[cells[i].method].name;
    if (!outcomes[i].report) {
      failed = true;
      std::string msg = outcomes[i].error;
      for (char& ch : msg) {
        if (ch == ',' || ch == '\n') ch = ';';
      }
      failures += seq + "," + name + "," + msg + "\n";
      log << seq << " " << name << ": FAILED " << outcomes[i].error << "\n";
      continue;
    }
    const SequenceReport& r = *outcomes[i].report;
    fs::create_directories(report_path(c, "reports", seq, name).parent_path());
    fs::create_directories(report_path(c, "analysis", seq, name).parent_path());
    write_text_atomic(report_path(c, "reports", seq, name), report_csv(r));
    write_text_atomic(report_path(c, "analysis", seq, name), analysis_csv(r));
    summary += summary_row(r);
    log << seq << " " << name << ": miou " << format_real(r.scores.all) << " overall "
        << format_optional(r.scores.overall) << "\n";
  }
  fs::create_directories(c.out_dir);
  write_text_atomic(c.out_dir / "summary.csv", summary);
  if (failed) {
    write_text_atomic(c.out_dir / "failures.csv", failures);
  } else {
    fs::remove(c.out_dir / "failures.csv");
  }
  return failed ? kExitRuntime : kExitOk;
}

struct SummaryRow {
  std::string sequence;
  std::string method;
  std::optional<double> miou, source, target, loopback, drop, overall;
};

inline std::vector<SummaryRow> parse_summary(const std::string& text, const std::string& what) {
  std::stringstream ss(text);
  std::string line;
  if (!std::getline(ss, line) || line + "\n" != kSummaryHeader) {
    throw FormatError(what + ": not a summary CSV (unexpected header)");
  }
  std::vector<SummaryRow> rows;
  std::size_t lineno = 1;
  while (std::getline(ss, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 8) throw FormatError(what + ":" + std::to_string(lineno) + ": expected 8 fields");
    auto num = [&](const std::string& v) -> std::optional<double> {
      if (v.empty()) return std::nullopt;
      try {
        return detail::parse_number("value", v);
      } catch (const ConfigError&) {
        throw FormatError(what + ":" + std::to_string(lineno) + ": bad number '" + v + "'");
      }
    };
    rows.push_back({f[0], f[1], num(f[2]), num(f[3]), num(f[4]), num(f[5]), num(f[6]), num(f[7])});
  }
  return rows;
}

/// Per-method means over sequences, in first-appearance order.
struct MethodMeans {
  std::string method;
  std::vector<std::string> sequences;
  std::optional<double> miou, drop, overall;
};

inline std::vector<MethodMeans> method_means(const std::vector<SummaryRow>& rows) {
  std::vector<MethodMeans> out;
  std::map<std::string, std::size_t> index;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& r : rows) {
    if (!seen.insert({r.sequence, r.method}).second) {
      throw ConfigError("summary has sequence '" + r.sequence + "' twice for method '" + r.method + "'");
    }
    if (!index.contains(r.method)) {
      index[r.method] = out.size();
      out.push_back({r.method, {}, {}, {}, {}});
    }
    out[index[r.method]].sequences.push_back(r.sequence);
  }
  auto mean = [&](const std::string& method, auto field) -> std::optional<double> {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) {
      if (r.method != method) continue;
      const std::optional<double>& v = r.*field;
      if (!v) return std::nullopt;
      sum += *v;
      ++n;
    }
    return n ? std::optional<double>(sum / static_cast<double>(n)) : std::nullopt;
  };
  for (auto& m : out) {
    std::sort(m.sequences.begin(), m.sequences.end());
    m.miou = mean(m.method, &SummaryRow::miou);
    m.drop = mean(m.method, &SummaryRow::drop);
    m.overall = mean(m.method, &SummaryRow::overall);
  }
  for (const auto& m : out) {
    if (m.sequences != out.front().sequences) {
      throw ConfigError("method '" + m.method + "' covers a different sequence set than '" + out.front().method + "'");
    }
  }
  return out;
}

inline std::string comparison_csv(const std::vector<MethodMeans>& means, const std::vector<MethodMeans>* against) {
  std::string out = "method,sequences,miou,miou_drop,overall";
  if (against) out += ",delta_miou,delta_overall";
  out += "\n";
  for (const auto& m : means) {
    out += m.method + "," + std::to_string(m.sequences.size()) + "," + format_optional(m.miou) + "," +
           format_optional(m.drop) + "," + format_optional(m.overall);
    if (against) {
      const MethodMeans* b = nullptr;
      for (const auto& x : *against) {
        if (x.method == m.method) b = &x;
      }
      auto delta = [](const std::optional<double>& x, const std::optional<double>& y) -> std::optional<double> {
        if (x && y) return *x - *y;
        return std::nullopt;
      };
      out += "," + format_optional(b ? delta(m.miou, b->miou) : std::nullopt) + "," +
             format_optional(b ? delta(m.overall, b->overall) : std::nullopt);
    }
    out += "\n";
  }
  return out;
}

/// Sweep grid as CSV if every cell of the suite is present, else nullopt.
inline std::optional<std::string> sweep_csv(const std::vector<MethodMeans>& means, const std::string& suite) {
  std::string out = suite == "sweep-fraction" ? "fraction,miou,overall\n" : "gamma,alpha,miou,overall\n";
  for (const auto& name : suite_methods(suite)) {
    const MethodMeans* m = nullptr;
    for (const auto& x : means) {
      if (x.method == name) m = &x;
    }
    if (!m) return std::nullopt;
    const MethodConfig cfg = parse_method(name);
    if (suite == "sweep-fraction") {
      out += format_real(*cfg.fraction);
    } else {
      out += format_real(cfg.gamma) + "," + format_real(cfg.alpha);
    }
    out += "," + format_optional(m->miou) + "," + format_optional(m->overall) + "\n";
  }
  return out;
}

inline std::vector<SummaryRow> load_summaries(const std::vector<fs::path>& paths) {
  std::vector<SummaryRow> rows;
  for (const auto& p : paths) {
    if (!fs::exists(p)) throw ConfigError("missing summary file " + p.string());
    const Bytes b = read_file(p);
    auto part = parse_summary(std::string(b.begin(), b.end()), p.string());
    rows.insert(rows.end(), part.begin(), part.end());
  }
  return rows;
}

/// Writes comparison.csv (and any complete sweep grids) into `out_dir`.
inline int cmd_compare(const std::vector<fs::path>& summaries, const std::optional<fs::path>& against,
                       const fs::path& out_dir, std::ostream& log = std::cout) {
  if (summaries.empty()) throw ConfigError("compare: no summary files given");
  const auto means = method_means(load_summaries(summaries));
  std::optional<std::vector<MethodMeans>> base;
  if (against) {
    base = method_means(load_summaries({*against}));
    for (const auto& m : means) {
      for (const auto& b : *base) {
        if (b.method == m.method && b.sequences != m.sequences) {
          throw ConfigError("compare: method '" + m.method + "' covers different sequences in " + against->string());
        }
      }
    }
  }
  fs::create_directories(out_dir);
  const std::string table = comparison_csv(means, base ? &*base : nullptr);
  write_text_atomic(out_dir / "comparison.csv", table);
  log << table;
  const std::pair<const char*, const char*> sweeps[] = {{"sweep-fraction", "sweep_fraction.csv"},
                                                        {"sweep-gamma-alpha", "sweep_gamma_alpha.csv"}};
  for (const auto& [suite, file] : sweeps) {
    if (auto grid = sweep_csv(means, suite)) {
      write_text_atomic(out_dir / file, *grid);
      log << *grid;
    }
  }
  return kExitOk;
}

}  // namespace ctta
