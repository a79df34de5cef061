// End-to-end acceptance run: prints one PASS/FAIL line per criterion.
//
//   acceptance --workdir DIR [--expect-fail 7,8]
//
// Criteria 6-9 and 11-12 drive the ctta binary with the shipped configs from
// inside DIR. Listed expected failures still print FAIL but do not fail the
// exit status; an unexpected failure, or an error that stops a criterion from
// being evaluated, exits 1.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "CLI11.hpp"
#include "ctta/commands.hpp"
#include "gradcheck.hpp"

namespace {

namespace fs = std::filesystem;
using namespace ctta;

// Tolerances and budgets, pinned.
constexpr double kOverallTol = 0.15;
constexpr double kBetaTol = 1e-6;
constexpr double kEmaTol = 1e-8;
constexpr double kKlRelTol = 1e-9;
constexpr double kGradTol = 1e-3;
constexpr double kSourceMiouGate = 85.0;
constexpr double kTrainBudgetSec = 10 * 60;
constexpr double kLadderBudgetSec = 30 * 60;
constexpr double kTable4BudgetSec = 45 * 60;
constexpr double kOursOverTentMin = 3.0;
constexpr std::size_t kPeakFirst = 190, kPeakLast = 209;  // the 20 frames nearest the severity peak

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Env {
  fs::path workdir;
  fs::path configs = CTTA_CONFIG_DIR;
  std::string cli = CTTA_CLI;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

/// Runs the ctta binary in `cwd`, appending its output to `cwd`/log.txt.
int run_cli(const Env& env, const fs::path& cwd, const std::string& args) {
  fs::create_directories(cwd);
  const std::string cmd = "cd '" + cwd.string() + "' && '" + env.cli + "' " + args + " >>log.txt 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

std::map<std::string, double> mean_overall(const fs::path& summary) {
  std::map<std::string, double> out;
  for (const auto& m : method_means(parse_summary(slurp(summary), summary.string()))) {
    if (!m.overall) throw std::runtime_error("summary " + summary.string() + " lacks overall for " + m.method);
    out[m.method] = *m.overall;
  }
  return out;
}

/// Column `name` of a CSV with a header row.
std::vector<double> csv_column(const fs::path& p, const std::string& name) {
  std::stringstream ss(slurp(p));
  std::string line;
  std::getline(ss, line);
  std::vector<std::string> head;
  for (std::stringstream hs(line); std::getline(hs, line, ',');) head.push_back(line);
  const auto it = std::find(head.begin(), head.end(), name);
  if (it == head.end()) throw std::runtime_error(p.string() + " has no column " + name);
  const std::size_t col = static_cast<std::size_t>(it - head.begin());
  std::vector<double> out;
  while (std::getline(ss, line)) {
    std::stringstream ls(line);
    std::string cell;
    for (std::size_t i = 0; i <= col; ++i) std::getline(ls, cell, ',');
    out.push_back(std::stod(cell));
  }
  return out;
}

// 1-5, 10: formula-level checks.

Verdict metric_formulas() {
  const double drop = score_drop(76.5, 53.2);
  const double overall = score_overall(71.4, drop);
  const bool ok = format_real(drop) == "23.3" && std::abs(overall - 24.8) <= kOverallTol;
  return {ok, "drop " + format_real(drop) + ", overall " + fmt(overall) + " (24.8 ± " + fmt(kOverallTol, 2) + ")"};
}

Verdict beta_units() {
  const double b = raw_beta(10.0, 0.1);
  const double ema = smooth_beta(0.0, b, 0.005);
  bool increasing = true;
  double prev = -1.0;
  for (int i = 0; i < 100; ++i) {
    const double v = raw_beta(0.2 * i, 0.1);
    increasing = increasing && v > prev;
    prev = v;
  }
  const bool ok = std::abs(b - 0.632121) <= kBetaTol && std::abs(ema - 0.00316061) <= kEmaTol && increasing;
  return {ok, "beta " + fmt(b, 7) + ", one EMA step " + fmt(ema, 9) + (increasing ? ", increasing" : ", NOT increasing")};
}

Verdict sym_kl_oracle() {
  const std::string cmd = std::string(CTTA_PYTHON) + " " + CTTA_ORACLE_DIR + "/sym_kl.py 1000 7";
  std::unique_ptr<FILE, int (*)(FILE*)> pipe(popen(cmd.c_str(), "r"), pclose);
  if (!pipe) throw std::runtime_error("cannot run " + cmd);
  std::string text;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe.get())) text.append(buf, n);
  std::istringstream in(text);
  std::size_t rows = 0, bad = 0, asym = 0, nonzero = 0;
  double worst = 0.0, m1, s1, m2, s2, want;
  while (in >> m1 >> s1 >> m2 >> s2 >> want) {
    const ChannelStats a({m1}, {s1}), b({m2}, {s2});
    const double got = sym_kl(a, b);
    const double rel = std::abs(got - want) / std::abs(want);
    worst = std::max(worst, rel);
    bad += rel > kKlRelTol;
    asym += sym_kl(b, a) != got;
    nonzero += sym_kl(a, a) != 0.0 || sym_kl(b, b) != 0.0;
    ++rows;
  }
  const bool ok = rows == 1000 && bad == 0 && asym == 0 && nonzero == 0;
  char worst_s[32];
  std::snprintf(worst_s, sizeof worst_s, "%.2e", worst);
  return {ok, std::to_string(rows) + " pairs, worst relative error " + worst_s + ", " + std::to_string(asym) +
                  " asymmetric, " + std::to_string(nonzero) + " nonzero self-distances"};
}

Verdict gradient_suite() {
  auto results = testing::op_gradchecks();
  const auto net = testing::network_gradchecks();
  results.insert(results.end(), net.begin(), net.end());
  std::map<std::string, std::size_t> shapes;
  const testing::GradCheckResult* worst = &results.front();
  for (const auto& r : results) {
    ++shapes[r.op];
    if (r.error > worst->error) worst = &r;
  }
  bool three = true;
  for (const auto& [op, n] : shapes) three = three && n == 3;
  char err[32];
  std::snprintf(err, sizeof err, "%.2e", worst->error);
  return {three && worst->error < kGradTol, std::to_string(shapes.size()) + " checks x 3 shapes, worst " + err + " (" +
                                                worst->op + " " + shape_str(worst->shape) + ")"};
}

Verdict confusion_oracle() {
  SplitMix64 rng(20230);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 2 + rng.below(13);
    LabelMap gt(8, 8), pred(8, 8);
    for (auto& v : gt.data) v = static_cast<std::uint8_t>(rng.below(k));
    for (auto& v : pred.data) v = static_cast<std::uint8_t>(rng.below(k));
    ConfusionMatrix cm(k);
    cm.update(pred, gt);
    std::vector<std::uint64_t> brute(k * k, 0);
    for (std::size_t i = 0; i < 64; ++i) ++brute[gt.data[i] * k + pred.data[i]];
    mismatches += cm.counts() != brute;
  }
  return {mismatches == 0, "100 random 8x8 pairs, " + std::to_string(mismatches) + " mismatches"};
}

Verdict gate_exactness() {
  // Random trace with steps straddling the threshold plus exact dyadic edges.
  SplitMix64 rng(10);
  std::vector<double> trace{1.0};
  for (int t = 1; t < 400; ++t) {
    const double scale = std::pow(10.0, rng.uniform(-4, -1));
    trace.push_back(trace.back() + (rng.bernoulli(0.5) ? scale : -scale));
  }
  GateState g;
  std::size_t wrong = 0, fired = 0;
  for (std::size_t t = 0; t < trace.size(); ++t) {
    const bool expect = t > 0 && std::abs(trace[t] - trace[t - 1]) >= 0.01;
    const bool got = entropy_gate(g, trace[t], 0.01) == GateDecision::reset_and_adapt;
    wrong += expect != got;
    fired += got;
  }
  GateState edge;
  entropy_gate(edge, 0.25, 0.0625);
  const bool at_threshold = entropy_gate(edge, 0.3125, 0.0625) == GateDecision::reset_and_adapt;
  GateState first;
  const bool frame0_holds = entropy_gate(first, 5.0, 0.0) == GateDecision::hold;
  return {wrong == 0 && at_threshold && frame0_holds,
          std::to_string(fired) + " of 400 frames fired, " + std::to_string(wrong) + " wrong" +
              (at_threshold ? "" : ", missed |dH| == threshold") + (frame0_holds ? "" : ", frame 0 adapted")};
}

// 6-9, 11-12: benchmark runs.

Verdict source_gate(const Env& env) {
  const auto t0 = std::chrono::steady_clock::now();
  if (run_cli(env, env.workdir, "gen-data --config '" + (env.configs / "valsplit6.cfg").string() + "'") != 0) {
    return {false, "gen-data failed (see log.txt)"};
  }
  const double gen_s = seconds_since(t0);
  const auto t1 = std::chrono::steady_clock::now();
  if (run_cli(env, env.workdir, "train-source --config '" + (env.configs / "valsplit6.cfg").string() + "'") != 0) {
    return {false, "train-source failed (see log.txt)"};
  }
  const double train_s = seconds_since(t1);
  const double miou = csv_column(env.workdir / "out/valsplit6/source_val.csv", "miou").at(0);
  return {miou >= kSourceMiouGate && train_s < kTrainBudgetSec,
          "held-out mIoU " + fmt(miou, 2) + " (>= " + fmt(kSourceMiouGate, 1) + "), training " + fmt(train_s, 0) +
              " s, data " + fmt(gen_s, 0) + " s"};
}

Verdict method_ordering(const Env& env) {
  const auto t0 = std::chrono::steady_clock::now();
  if (run_cli(env, env.workdir, "run-tta --config '" + (env.configs / "ladder.cfg").string() +
                                    "' --method @ladder,source-only") != 0) {
    return {false, "run-tta failed (see log.txt)"};
  }
  const double secs = seconds_since(t0);
  auto o = mean_overall(env.workdir / "out/ladder/summary.csv");
  const double ours = o.at("ours"), bb = o.at("tent-backbone"), tent = o.at("tent");
  const bool ok = ours > bb && bb > tent && ours - tent >= kOursOverTentMin && secs < kLadderBudgetSec;
  return {ok, "mean overall ours " + fmt(ours, 2) + ", tent-backbone " + fmt(bb, 2) + ", tent " + fmt(tent, 2) +
                  ", tent-backbone-dynbn " + fmt(o.at("tent-backbone-dynbn"), 2) + ", source-only " +
                  fmt(o.at("source-only"), 2) + "; ours - tent " + fmt(ours - tent, 2) + " (>= " +
                  fmt(kOursOverTentMin, 1) + "); " + fmt(secs, 0) + " s"};
}

Verdict weight_selection(const Env& env) {
  const auto t0 = std::chrono::steady_clock::now();
  if (run_cli(env, env.workdir, "run-tta --config '" + (env.configs / "table4.cfg").string() + "'") != 0) {
    return {false, "run-tta failed (see log.txt)"};
  }
  const double secs = seconds_since(t0);
  auto o = mean_overall(env.workdir / "out/table4/summary.csv");
  const std::string best = std::max_element(o.begin(), o.end(), [](auto& a, auto& b) { return a.second < b.second; })->first;
  const std::pair<std::string, std::string> pairs[] = {{"tent+region=backbone+scope=all", "tent-backbone"},
                                                       {"tent+region=head+scope=all", "tent+region=head"},
                                                       {"tent+scope=all", "tent"}};
  bool all_lower = true;
  std::string detail;
  for (const auto& [all, bn] : pairs) {
    all_lower = all_lower && o.at(all) < o.at(bn);
    detail += "; " + all + " " + fmt(o.at(all), 2) + " vs " + bn + " " + fmt(o.at(bn), 2);
  }
  const bool ok = best == "tent-backbone" && all_lower && secs < kTable4BudgetSec;
  return {ok, "best " + best + " " + fmt(o.at(best), 2) + detail + "; " + fmt(secs, 0) + " s"};
}

Verdict dynamic_stats_effect(const Env& env) {
  const fs::path dir = env.workdir / "out/ladder/analysis/night-1.0";
  const auto ours = csv_column(dir / "ours.csv", "kl_used_to_batch");
  const auto src = csv_column(dir / "source-only.csv", "kl_used_to_batch");
  std::size_t lower = 0;
  double sum_ours = 0, sum_src = 0;
  for (std::size_t t = kPeakFirst; t <= kPeakLast; ++t) {
    lower += ours.at(t) < src.at(t);
    sum_ours += ours.at(t);
    sum_src += src.at(t);
  }
  const std::size_t n = kPeakLast - kPeakFirst + 1;
  return {lower == n, std::to_string(lower) + "/" + std::to_string(n) + " peak frames lower; mean " +
                          fmt(sum_ours / n) + " (ours) vs " + fmt(sum_src / n) + " (source stats)"};
}

const char* kTinyConfig = R"(seed = 11
data_dir = data
out_dir = out
scene.width = 24
scene.height = 24
scene.shapes = 4
sequences = night-1.0, rain-0.7
sequence.length = 30
model.backbone_widths = 6, 8
model.backbone_strides = 1, 2
model.head_widths = 6
train.frames = 24
train.val_frames = 8
train.epochs = 2
train.batch = 4
methods = source-only, tent, cotta, ours
)";

/// gen-data, train-source, run-tta and compare in `dir`.
bool tiny_pipeline(const Env& env, const fs::path& dir, std::size_t parallel) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  spit(dir / "tiny.cfg", kTinyConfig);
  return run_cli(env, dir, "gen-data --config tiny.cfg") == 0 && run_cli(env, dir, "train-source --config tiny.cfg") == 0 &&
         run_cli(env, dir, "run-tta --config tiny.cfg --parallel " + std::to_string(parallel)) == 0 &&
         run_cli(env, dir, "compare --config tiny.cfg") == 0;
}

Verdict determinism(const Env& env) {
  const fs::path root = env.workdir / "determinism";
  if (!tiny_pipeline(env, root / "a", 1) || !tiny_pipeline(env, root / "b", 4)) {
    return {false, "tiny pipeline failed (see determinism/*/log.txt)"};
  }
  auto a = tree(root / "a"), b = tree(root / "b");
  a.erase("log.txt");
  b.erase("log.txt");
  const bool pipelines_equal = a == b;

  // Benchmark cells for one sequence on four threads against the serial run.
  const fs::path par = env.workdir / "out/parallel4";
  fs::remove_all(par);
  const int rc = run_cli(env, env.workdir, "run-tta --config '" + (env.configs / "ladder.cfg").string() +
                                               "' --method @ladder,source-only --seq night-1.0 --parallel 4 --out '" +
                                               par.string() + "'");
  std::size_t compared = 0, differing = 0;
  for (const char* kind : {"reports", "analysis"}) {
    for (const auto& e : fs::directory_iterator(par / kind / "night-1.0")) {
      ++compared;
      differing += slurp(e.path()) != slurp(env.workdir / "out/ladder" / kind / "night-1.0" / e.path().filename());
    }
  }
  const bool ok = pipelines_equal && rc == 0 && compared == 10 && differing == 0;
  return {ok, std::string("two full tiny pipelines (parallel 1 vs 4) ") + (pipelines_equal ? "identical" : "DIFFER") +
                  " over " + std::to_string(a.size()) + " files; benchmark night-1.0 cells on 4 threads: " +
                  std::to_string(compared - differing) + "/" + std::to_string(compared) + " files identical"};
}

Verdict formats(const Env& env) {
  const fs::path ck_path = env.workdir / "out/valsplit6/source.dacp";
  const std::string ck_text = slurp(ck_path);
  const Bytes ck_bytes(ck_text.begin(), ck_text.end());
  SegModel<float> model(ModelSpec{}, 0);
  apply_checkpoint(model, decode_checkpoint(ck_bytes));
  const bool ck_round = encode_checkpoint(decode_checkpoint(ck_bytes)) == ck_bytes &&
                        encode_checkpoint(make_checkpoint(model)) == ck_bytes;

  const std::string fr_text = slurp(env.workdir / "data/night-1.0/frame_200.dafr");
  const Bytes fr_bytes(fr_text.begin(), fr_text.end());
  const bool frame_round = encode_frame(decode_frame(fr_bytes, FrameLayout{}), 14) == fr_bytes;

  // Header corruption through the CLI on the tiny pipeline's artifacts.
  const fs::path tiny = env.workdir / "determinism/a";
  const fs::path scratch = env.workdir / "corruption";
  fs::remove_all(scratch);
  fs::create_directories(scratch);
  const std::string good_ck = slurp(tiny / "out/source.dacp");
  std::size_t ck_rejected = 0;
  for (std::size_t i = 0; i < 16; ++i) {
    std::string bad = good_ck;
    bad[i] = static_cast<char>(bad[i] ^ 0xa5);
    spit(scratch / "bad.dacp", bad);
    spit(scratch / "tiny.cfg",
         std::string(kTinyConfig).replace(std::string(kTinyConfig).find("data_dir = data"), 15,
                                          "data_dir = " + (tiny / "data").string()) +
             "checkpoint = bad.dacp\n");
    ck_rejected += run_cli(env, scratch, "run-tta --config tiny.cfg --method source-only --seq night-1.0") != 0;
  }
  fs::copy(tiny / "data", scratch / "data", fs::copy_options::recursive);
  spit(scratch / "tiny.cfg", std::string(kTinyConfig) + "checkpoint = " + (tiny / "out/source.dacp").string() + "\n");
  const fs::path frame = scratch / "data/night-1.0/frame_000.dafr";
  const std::string good_fr = slurp(frame);
  std::size_t fr_rejected = 0;
  for (std::size_t i = 0; i < 14; ++i) {
    std::string bad = good_fr;
    bad[i] = static_cast<char>(bad[i] ^ 0xa5);
    spit(frame, bad);
    fr_rejected += run_cli(env, scratch, "run-tta --config tiny.cfg --method source-only --seq night-1.0") != 0;
  }
  spit(frame, good_fr);
  const bool ok = ck_round && frame_round && ck_rejected == 16 && fr_rejected == 14;
  return {ok, std::string("checkpoint round-trip ") + (ck_round ? "bitwise" : "DIFFERS") + ", frame round-trip " +
                  (frame_round ? "bitwise" : "DIFFERS") + ", corrupted headers rejected: checkpoint " +
                  std::to_string(ck_rejected) + "/16, frame " + std::to_string(fr_rejected) + "/14"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria for the ctta benchmark"};
  Env env;
  std::string expect_fail;
  app.add_option("--workdir", env.workdir, "scratch directory for data, checkpoints and runs")->required();
  app.add_option("--expect-fail", expect_fail, "comma-separated criteria known to fail");
  CLI11_PARSE(app, argc, argv);

  std::set<int> expected;
  for (const auto& s : detail::split_list(expect_fail)) expected.insert(std::stoi(s));
  fs::create_directories(env.workdir);
  env.workdir = fs::absolute(env.workdir);

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"metric formulas", metric_formulas},
      {"beta units", beta_units},
      {"sym-KL oracle", sym_kl_oracle},
      {"gradient suite", gradient_suite},
      {"mIoU oracle", confusion_oracle},
      {"source model gate", [&] { return source_gate(env); }},
      {"method ordering", [&] { return method_ordering(env); }},
      {"weight selection", [&] { return weight_selection(env); }},
      {"dynamic-stats effect", [&] { return dynamic_stats_effect(env); }},
      {"gate exactness", gate_exactness},
      {"determinism", [&] { return determinism(env); }},
      {"format round-trips", [&] { return formats(env); }},
  };

  int passed = 0, unexpected = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    passed += v.pass;
    std::string tag = v.pass ? "PASS" : "FAIL";
    if (!v.pass && expected.contains(id)) tag += " (expected)";
    if (v.pass && expected.contains(id)) tag += " (unexpected pass)";
    if (!v.pass && !expected.contains(id)) ++unexpected;
    std::cout << "criterion " << id << " " << tag << "  " << criteria[i].first << ": " << v.detail << std::endl;
  }
  std::cout << passed << "/" << criteria.size() << " criteria passed" << std::endl;
  return unexpected == 0 ? 0 : 1;
}
