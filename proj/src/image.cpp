#include "image.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <fstream>

namespace tpd {

Image Image::from_tensor(const ad::Tensor& t) {
  if (t.ndim() != 3 || t.dim(2) != 3) throw ContractError("Image::from_tensor expects (H,W,3)");
  Image img;
  img.h = int(t.dim(0));
  img.w = int(t.dim(1));
  img.rgb.resize(size_t(img.h * img.w * 3));
  for (size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = float(t.at(int64_t(i)));
  return img;
}

ad::Tensor Image::to_tensor(ad::Scalar dt) const {
  std::vector<double> v(rgb.begin(), rgb.end());
  return ad::Tensor::from_vector({h, w, 3}, v, dt);
}

namespace {

uint8_t quantize(float v) {
  double c = clampd(double(v), 0.0, 1.0);
  return uint8_t(std::lround(c * 255.0));
}

void put_be32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v >> 24));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v));
}

void put_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& data) {
  put_be32(out, uint32_t(data.size()));
  size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, out.data() + start, uInt(4 + data.size()));
  put_be32(out, uint32_t(crc));
}

}  // namespace

void write_png(const Image& img, const std::string& path) {
  if (img.h <= 0 || img.w <= 0) throw ContractError("write_png: empty image");
  std::vector<uint8_t> raw;
  raw.reserve(size_t(img.h) * (size_t(img.w) * 3 + 1));
  for (int y = 0; y < img.h; ++y) {
    raw.push_back(0);  // filter: none
    for (int x = 0; x < img.w; ++x) {
      const float* p = img.px(y, x);
      raw.push_back(quantize(p[0]));
      raw.push_back(quantize(p[1]));
      raw.push_back(quantize(p[2]));
    }
  }
  uLongf comp_size = compressBound(uLong(raw.size()));
  std::vector<uint8_t> comp(comp_size);
  if (compress2(comp.data(), &comp_size, raw.data(), uLong(raw.size()), 6) != Z_OK)
    throw IoError("write_png: zlib compression failed");
  comp.resize(comp_size);

  std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<uint8_t> ihdr;
  put_be32(ihdr, uint32_t(img.w));
  put_be32(ihdr, uint32_t(img.h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", comp);
  put_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
  if (!f) throw IoError("write failed: " + path);
}

void write_ppm(const Image& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path);
  f << "P6\n" << img.w << " " << img.h << "\n255\n";
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      const float* p = img.px(y, x);
      uint8_t b[3] = {quantize(p[0]), quantize(p[1]), quantize(p[2])};
      f.write(reinterpret_cast<const char*>(b), 3);
    }
  if (!f) throw IoError("write failed: " + path);
}

void write_image(const Image& img, const std::string& path) {
  if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".ppm") == 0)
    write_ppm(img, path);
  else
    write_png(img, path);
}

double mean_abs_diff(const Image& a, const Image& b) {
  if (a.h != b.h || a.w != b.w) throw ContractError("mean_abs_diff: size mismatch");
  double acc = 0;
  for (size_t i = 0; i < a.rgb.size(); ++i) acc += std::fabs(double(a.rgb[i]) - double(b.rgb[i]));
  return acc / double(a.rgb.size());
}

}  // namespace tpd
