#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "iir/error.hpp"

namespace iir {

// H x W x C interleaved float pixels. Holds clean images in [0,1] as well as
// noised states and noise fields, so values are not range-checked.
class Image {
 public:
  Image() = default;
  Image(int height, int width, int channels = 3, float fill = 0.0f);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }
  std::size_t pixels() const { return static_cast<std::size_t>(height_) * width_; }

  float& at(int y, int x, int c) { return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c]; }
  float at(int y, int x, int c) const { return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c]; }

  std::span<float> span() { return data_; }
  std::span<const float> span() const { return data_; }
  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }

  bool same_shape(const Image& o) const {
    return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
  }
  bool operator==(const Image& o) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<float> data_;
};

// Binary H x W plane. The tag keeps RoI masks and edge maps from being mixed.
template <typename Tag>
class BinaryPlane {
 public:
  BinaryPlane() = default;
  BinaryPlane(int height, int width, std::uint8_t fill = 0)
      : height_(height), width_(width), data_(static_cast<std::size_t>(height) * width, fill ? 1 : 0) {
    require(height > 0 && width > 0, "binary plane must have positive size");
  }

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return data_.size(); }

  std::uint8_t at(int y, int x) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  void set(int y, int x, bool v) { data_[static_cast<std::size_t>(y) * width_ + x] = v ? 1 : 0; }
  std::uint8_t operator[](std::size_t i) const { return data_[i]; }
  std::span<const std::uint8_t> span() const { return data_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data_) n += v;
    return n;
  }
  bool matches(const Image& img) const { return img.height() == height_ && img.width() == width_; }

  BinaryPlane complement() const {
    BinaryPlane out = *this;
    for (auto& v : out.data_) v = v ? 0 : 1;
    return out;
  }
  static BinaryPlane full(int height, int width) { return BinaryPlane(height, width, 1); }

  bool operator==(const BinaryPlane& o) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> data_;
};

using RoIMask = BinaryPlane<struct RoITag>;
using EdgeMap = BinaryPlane<struct EdgeTag>;

// 8-bit PNG I/O. Pixel values are clamped to [0,1] and rounded on write.
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& img);
// Single-channel plane from a float image channel.
void write_png_channel(const std::filesystem::path& path, const Image& img, int channel);

// Masks are stored as 0/255 grayscale; any value >= 128 reads as inside.
RoIMask read_mask_png(const std::filesystem::path& path);
template <typename Tag>
void write_mask_png(const std::filesystem::path& path, const BinaryPlane<Tag>& mask);

Image clamp01(Image img);

}  // namespace iir
