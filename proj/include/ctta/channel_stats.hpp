#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ctta/errors.hpp"
#include "ctta/tensor.hpp"

namespace ctta {

inline constexpr double kSigmaFloor = 1e-5;

/// Per-channel (mean, standard deviation) of a feature map.
struct ChannelStats {
  std::vector<double> mu;
  std::vector<double> sigma;

  ChannelStats() = default;
  ChannelStats(std::vector<double> mean, std::vector<double> stddev)
      : mu(std::move(mean)), sigma(std::move(stddev)) {
    if (mu.size() != sigma.size()) throw ConfigError("ChannelStats: mu/sigma length mismatch");
    for (double& s : sigma) s = std::max(s, kSigmaFloor);
  }

  /// (0, 1) for every channel: the state of an untrained BN layer.
  static ChannelStats unit(std::size_t channels) {
    return ChannelStats(std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0));
  }

  std::size_t channels() const noexcept { return mu.size(); }

  friend bool operator==(const ChannelStats&, const ChannelStats&) = default;
};

/// Mean and population standard deviation of each channel over N*H*W
/// positions, accumulated in double. Sigma is floored at kSigmaFloor.
template <class T>
ChannelStats batch_stats(const BasicTensor<T>& features) {
  if (features.rank() != 4) {
    throw ConfigError("batch_stats expects NCHW, got " + shape_str(features.shape()));
  }
  const std::size_t n = features.dim(0), c = features.dim(1);
  const std::size_t plane = features.dim(2) * features.dim(3);
  const std::size_t count = n * plane;
  if (count < 2) throw NumericError("batch_stats: a single element per channel has no spread");
  std::vector<double> mu(c), sigma(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const T* p = features.data() + (b * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) sum += static_cast<double>(p[i]);
    }
    const double mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const T* p = features.data() + (b * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = static_cast<double>(p[i]) - mean;
        sq += d * d;
      }
    }
    mu[ch] = mean;
    sigma[ch] = std::sqrt(sq / static_cast<double>(count));
  }
  return ChannelStats(std::move(mu), std::move(sigma));
}

/// KL(N(mu1, s1^2) || N(mu2, s2^2)).
inline double gaussian_kl(double mu1, double s1, double mu2, double s2) {
  const double d = mu1 - mu2;
  return std::log(s2 / s1) + (s1 * s1 + d * d) / (2.0 * s2 * s2) - 0.5;
}

/// Channel-averaged symmetric KL divergence between per-channel Gaussians.
inline double sym_kl(const ChannelStats& a, const ChannelStats& b) {
  if (a.channels() != b.channels()) {
    throw ConfigError("sym_kl: channel count mismatch (" + std::to_string(a.channels()) + " vs " +
                      std::to_string(b.channels()) + ")");
  }
  if (a.channels() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < a.channels(); ++i) {
    // Summing both directions in a fixed order keeps sym_kl(a,b) == sym_kl(b,a) bitwise.
    const double ab = gaussian_kl(a.mu[i], a.sigma[i], b.mu[i], b.sigma[i]);
    const double ba = gaussian_kl(b.mu[i], b.sigma[i], a.mu[i], a.sigma[i]);
    total += std::min(ab, ba) + std::max(ab, ba);
  }
  return total / static_cast<double>(a.channels());
}

}  // namespace ctta
