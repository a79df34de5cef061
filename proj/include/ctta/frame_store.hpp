#pragma once

// On-disk frames ("DAFR"), PPM previews and the severity sidecar.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctta/binary_io.hpp"
#include "ctta/errors.hpp"
#include "ctta/frame.hpp"
#include "ctta/metrics.hpp"

namespace ctta {

inline constexpr std::uint32_t kFrameVersion = 1;

/// Layout the reader insists on; a file that disagrees is rejected.
struct FrameLayout {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t classes = 14;
};

inline Bytes encode_frame(const Frame& f, std::size_t classes) {
  if (f.image.rank() != 3 || f.image.dim(0) != 3) {
    throw FormatError("frame image must be 3 x H x W, got " + shape_str(f.image.shape()));
  }
  const std::size_t h = f.image.dim(1), w = f.image.dim(2);
  if (h > 0xffff || w > 0xffff || classes > 0xff || f.labels.height != h || f.labels.width != w) {
    throw FormatError("frame does not fit the DAFR layout");
  }
  ByteWriter out;
  out.raw("DAFR");
  out.u32(kFrameVersion);
  out.u16(static_cast<std::uint16_t>(h));
  out.u16(static_cast<std::uint16_t>(w));
  out.u8(3);
  out.u8(static_cast<std::uint8_t>(classes));
  for (float v : f.image.values()) out.f32(v);
  for (std::uint8_t l : f.labels.data) out.u8(l);
  return out.take();
}

inline Frame decode_frame(const Bytes& data, const FrameLayout& layout, const std::string& what = "frame") {
  ByteReader r(data, what);
  if (r.raw(4) != "DAFR") r.fail("bad magic");
  const std::uint32_t version = r.u32();
  if (version != kFrameVersion) r.fail("unsupported version " + std::to_string(version));
  const std::size_t h = r.u16(), w = r.u16(), c = r.u8(), k = r.u8();
  if (h != layout.height || w != layout.width) {
    r.fail("size " + std::to_string(h) + "x" + std::to_string(w) + ", expected " + std::to_string(layout.height) +
           "x" + std::to_string(layout.width));
  }
  if (c != 3) r.fail("expected 3 channels, found " + std::to_string(c));
  if (k != layout.classes) r.fail("class count " + std::to_string(k) + ", expected " + std::to_string(layout.classes));
  if (r.remaining() != 3 * h * w * 4 + h * w) r.fail("payload size does not match the header");
  Frame f{Tensor(Shape{3, h, w}), LabelMap(h, w)};
  for (float& v : f.image.values()) {
    v = r.f32();
    if (!std::isfinite(v)) r.fail("non-finite pixel value");
  }
  for (auto& l : f.labels.data) {
    l = r.u8();
    if (l >= k) r.fail("label " + std::to_string(l) + " out of range");
  }
  r.expect_end();
  return f;
}

inline std::string frame_filename(std::size_t t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%03zu.dafr", t);
  return buf;
}

inline void write_frame(const std::filesystem::path& path, const Frame& f, std::size_t classes) {
  write_file_atomic(path, encode_frame(f, classes));
}

inline Frame read_frame(const std::filesystem::path& path, const FrameLayout& layout) {
  return decode_frame(read_file(path), layout, path.string());
}

/// Binary PPM (P6) rendering of a 3 x H x W image in [0, 1].
inline Bytes encode_ppm(const Tensor& image) {
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  Bytes out(header.begin(), header.end());
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(static_cast<double>(image[c * plane + i]), 0.0, 1.0);
      out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
    }
  }
  return out;
}

inline std::string severity_csv(const std::vector<double>& severities) {
  std::string out = "frame,severity\n";
  for (std::size_t t = 0; t < severities.size(); ++t) out += std::to_string(t) + "," + format_real(severities[t]) + "\n";
  return out;
}

/// Inverse of severity_csv; frames must be listed in order from 0.
inline std::vector<double> parse_severity_csv(const std::string& text, const std::string& what = "severity.csv") {
  std::stringstream ss(text);
  std::string line;
  if (!std::getline(ss, line) || line != "frame,severity") throw FormatError(what + ": unexpected header");
  std::vector<double> out;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    const std::string row = what + ":" + std::to_string(out.size() + 2);
    if (comma == std::string::npos || line.substr(0, comma) != std::to_string(out.size())) {
      throw FormatError(row + ": expected frame " + std::to_string(out.size()));
    }
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(line.substr(comma + 1), &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != line.size() - comma - 1 || !std::isfinite(v)) throw FormatError(row + ": bad severity");
    out.push_back(v);
  }
  return out;
}

}  // namespace ctta
