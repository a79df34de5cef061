#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "ctta/tensor.hpp"

namespace ctta {

/// Per-pixel class ids, row-major.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), data(h * w, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return data[y * width + x]; }
  std::size_t size() const noexcept { return data.size(); }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

/// One video frame: a 3 x H x W image in [0, 1] and its ground truth.
struct Frame {
  Tensor image;
  LabelMap labels;

  friend bool operator==(const Frame&, const Frame&) = default;
};

/// Adds a leading batch axis: 3 x H x W -> 1 x 3 x H x W.
inline Tensor as_batch(const Tensor& image) {
  Shape s{1};
  s.insert(s.end(), image.shape().begin(), image.shape().end());
  return image.reshaped(std::move(s));
}

}  // namespace ctta
