// Probes on the trained benchmark. They read the artifacts of the acceptance
// run and skip when it has not produced them.

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ctta/commands.hpp"

namespace ctta {
namespace {

namespace fs = std::filesystem;

const fs::path kRoot = CTTA_ACCEPTANCE_DIR;

std::vector<double> column(const fs::path& p, const std::string& name) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  std::size_t col = 0;
  {
    std::stringstream hs(line);
    std::string cell;
    while (std::getline(hs, cell, ',') && cell != name) ++col;
  }
  std::vector<double> out;
  while (std::getline(in, line)) {
    std::stringstream ls(line);
    std::string cell;
    for (std::size_t i = 0; i <= col; ++i) std::getline(ls, cell, ',');
    out.push_back(std::stod(cell));
  }
  return out;
}

double window_mean(const std::vector<double>& v, std::size_t first, std::size_t last) {
  return std::accumulate(v.begin() + first, v.begin() + last + 1, 0.0) / static_cast<double>(last - first + 1);
}

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
    i = j + 1;
  }
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = ranks(a), rb = ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / ra.size();
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / rb.size();
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  return num / std::sqrt(da * db);
}

class BenchmarkProbe : public ::testing::Test {
 protected:
  void SetUp() override {
    if (!fs::exists(analysis("night-1.0", "source-only"))) GTEST_SKIP() << "no acceptance run in " << kRoot;
  }
  static fs::path analysis(const std::string& seq, const std::string& method) {
    return kRoot / "out/ladder/analysis" / seq / (method + ".csv");
  }
  static fs::path report(const std::string& seq, const std::string& method) {
    return kRoot / "out/ladder/reports" / seq / (method + ".csv");
  }
};

TEST_F(BenchmarkProbe, BetaAtPeakExceedsBetaAtSeverityZero) {
  for (const char* seq : {"night-1.0", "night-0.7"}) {
    const auto beta = column(report(seq, "ours"), "beta");
    EXPECT_GT(window_mean(beta, 190, 209), window_mean(beta, 0, 19)) << seq;
    EXPECT_GT(beta[200], beta[0]) << seq;
  }
}

TEST_F(BenchmarkProbe, NightDistancePeaksAtSeverityPeak) {
  for (const char* seq : {"night-1.0", "night-0.7"}) {
    const auto kl = column(analysis(seq, "source-only"), "kl_layer_mean");
    const auto sev = column(analysis(seq, "source-only"), "severity");
    const std::size_t at = static_cast<std::size_t>(std::max_element(kl.begin(), kl.end()) - kl.begin());
    EXPECT_EQ(sev[at], *std::max_element(sev.begin(), sev.end())) << seq << ": largest distance at frame " << at;
  }
}

TEST_F(BenchmarkProbe, EntropyTracksErrorOnNight) {
  for (const char* seq : {"night-1.0", "night-0.7"}) {
    const auto entropy = column(analysis(seq, "source-only"), "mean_entropy");
    auto error = column(analysis(seq, "source-only"), "miou");
    for (double& e : error) e = 100.0 - e;
    EXPECT_GT(spearman(entropy, error), 0.0) << seq;
  }
}

TEST_F(BenchmarkProbe, SourceEntropyFlatWithoutShift) {
  const RunConfig c = load_config(fs::path(CTTA_CONFIG_DIR) / "valsplit6.cfg");
  const SegModel<float> model = load_model(c.model, kRoot / "out/valsplit6/source.dacp");
  const Sequence seq = generate_sequence(parse_sequence("night-0", c));
  const SequenceReport r = run_sequence(model, "night-0", seq.frames, seq.severities, parse_method("source-only"), c.seed);
  double lo = 1e9, hi = -1e9;
  for (const auto& f : r.frames) {
    lo = std::min(lo, f.mean_entropy);
    hi = std::max(hi, f.mean_entropy);
  }
  EXPECT_LT(hi - lo, 0.2) << "entropy range [" << lo << ", " << hi << "]";
}

}  // namespace
}  // namespace ctta
