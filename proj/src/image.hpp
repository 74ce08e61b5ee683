#pragma once

#include <string>
#include <vector>

#include "tensor.hpp"

namespace tpd {

// Row-major RGB float image, values in [0,1].
struct Image {
  int h = 0, w = 0;
  std::vector<float> rgb;

  static Image from_tensor(const ad::Tensor& t);
  ad::Tensor to_tensor(ad::Scalar dt = ad::Scalar::F32) const;

  float* px(int y, int x) { return rgb.data() + size_t(y * w + x) * 3; }
  const float* px(int y, int x) const { return rgb.data() + size_t(y * w + x) * 3; }
};

// 8-bit sRGB-naive PNG (no gamma transform), deterministic encoding. Paths
// ending in .ppm fall back to binary PPM.
void write_image(const Image& img, const std::string& path);
void write_png(const Image& img, const std::string& path);
void write_ppm(const Image& img, const std::string& path);

double mean_abs_diff(const Image& a, const Image& b);

}  // namespace tpd
