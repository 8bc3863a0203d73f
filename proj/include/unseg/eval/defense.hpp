#pragma once

// Input-space defenses a victim trainer might apply to suspect training data.
// These are training-time filters; validation images are never touched.

#include <cmath>
#include <opencv2/imgcodecs.hpp>
#include <vector>

#include "unseg/data/image_io.hpp"

namespace unseg::eval {

using data::Image;

/// Separable Gaussian blur with reflect padding (abc|cba).
inline Image defense_gaussian(const Image& img, double sigma = 1.0) {
  check(sigma > 0.0, "defense_gaussian: sigma must be positive");
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> kernel(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = static_cast<float>(v);
    sum += v;
  }
  for (auto& k : kernel) k = static_cast<float>(k / sum);

  const std::int64_t h = img.height(), w = img.width();
  auto reflect = [](std::int64_t i, std::int64_t n) {
    while (i < 0 || i >= n) {
      if (i < 0) i = -i - 1;
      if (i >= n) i = 2 * n - i - 1;
    }
    return i;
  };

  Image tmp = img, out = img;
  // horizontal pass
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        float acc = 0;
        for (int k = -radius; k <= radius; ++k)
          acc += kernel[static_cast<std::size_t>(k + radius)] * img.pixels.at(y, reflect(x + k, w), c);
        tmp.pixels.at(y, x, c) = acc;
      }
  // vertical pass
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        float acc = 0;
        for (int k = -radius; k <= radius; ++k)
          acc += kernel[static_cast<std::size_t>(k + radius)] * tmp.pixels.at(reflect(y + k, h), x, c);
        out.pixels.at(y, x, c) = std::min(1.0f, std::max(0.0f, acc));
      }
  return out;
}

/// JPEG encode/decode round trip at the given quality (1-100).
inline Image defense_jpeg(const Image& img, int quality = 75) {
  check(quality >= 1 && quality <= 100, "defense_jpeg: quality must be in [1, 100]");
  const int h = static_cast<int>(img.height()), w = static_cast<int>(img.width());
  cv::Mat bgr(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      auto& px = bgr.at<cv::Vec3b>(y, x);
      px[2] = data::quantize8(img.pixels.at(y, x, 0));
      px[1] = data::quantize8(img.pixels.at(y, x, 1));
      px[0] = data::quantize8(img.pixels.at(y, x, 2));
    }
  std::vector<unsigned char> buf;
  cv::imencode(".jpg", bgr, buf, {cv::IMWRITE_JPEG_QUALITY, quality});
  cv::Mat dec = cv::imdecode(buf, cv::IMREAD_COLOR);
  check(!dec.empty() && dec.rows == h && dec.cols == w, "defense_jpeg: codec round trip failed");
  Image out = img;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto& px = dec.at<cv::Vec3b>(y, x);
      out.pixels.at(y, x, 0) = data::dequantize8(px[2]);
      out.pixels.at(y, x, 1) = data::dequantize8(px[1]);
      out.pixels.at(y, x, 2) = data::dequantize8(px[0]);
    }
  return out;
}

enum class Defense { none, gaussian, jpeg };

inline const char* to_string(Defense d) {
  switch (d) {
    case Defense::gaussian: return "gaussian";
    case Defense::jpeg: return "jpeg";
    default: return "none";
  }
}

inline Defense defense_from_string(const std::string& s) {
  if (s == "none") return Defense::none;
  if (s == "gaussian") return Defense::gaussian;
  if (s == "jpeg") return Defense::jpeg;
  throw Error("unknown defense: " + s);
}

inline Image apply_defense(const Image& img, Defense d, double param) {
  switch (d) {
    case Defense::gaussian: return defense_gaussian(img, param > 0 ? param : 1.0);
    case Defense::jpeg: return defense_jpeg(img, param > 0 ? static_cast<int>(param) : 75);
    default: return img;
  }
}

}  // namespace unseg::eval
