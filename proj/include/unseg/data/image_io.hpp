#pragma once

// PNG-backed storage for images, label maps, and prompt masks. PNG is
// lossless, so noise budgets survive a save/load round trip up to the 8-bit
// quantization step (<= 1/255 per channel), which the protection code
// accounts for explicitly.

#include <filesystem>
#include <fstream>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <string>
#include <vector>

#include "unseg/data/types.hpp"

namespace unseg::data {

namespace fs = std::filesystem;

inline std::uint8_t quantize8(float v) {
  float c = std::min(1.0f, std::max(0.0f, v));
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

inline float dequantize8(std::uint8_t b) { return static_cast<float>(b) / 255.0f; }

/// Write bytes to `path` atomically (temp file + rename).
inline void atomic_write(const fs::path& path, const std::vector<unsigned char>& bytes) {
  fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    check(out.good(), "cannot open for write: " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    check(out.good(), "write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline void write_image_png(const fs::path& path, const Image& img) {
  const int h = static_cast<int>(img.height()), w = static_cast<int>(img.width());
  cv::Mat bgr(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      auto& px = bgr.at<cv::Vec3b>(y, x);
      px[2] = quantize8(img.pixels.at(y, x, 0));
      px[1] = quantize8(img.pixels.at(y, x, 1));
      px[0] = quantize8(img.pixels.at(y, x, 2));
    }
  std::vector<unsigned char> buf;
  cv::imencode(".png", bgr, buf, {cv::IMWRITE_PNG_COMPRESSION, 6});
  atomic_write(path, buf);
}

inline Image read_image_png(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  check(!bgr.empty(), "cannot read image: " + path.string());
  Image img;
  img.pixels = Tensor<float>({bgr.rows, bgr.cols, 3});
  for (int y = 0; y < bgr.rows; ++y)
    for (int x = 0; x < bgr.cols; ++x) {
      const auto& px = bgr.at<cv::Vec3b>(y, x);
      img.pixels.at(y, x, 0) = dequantize8(px[2]);
      img.pixels.at(y, x, 1) = dequantize8(px[1]);
      img.pixels.at(y, x, 2) = dequantize8(px[0]);
    }
  img.id = path.stem().string();
  return img;
}

/// Labels are stored as raw class ids in a single 8-bit channel.
inline void write_label_png(const fs::path& path, const LabelMask& label) {
  const int h = static_cast<int>(label.height()), w = static_cast<int>(label.width());
  cv::Mat m(h, w, CV_8UC1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.at<std::uint8_t>(y, x) = label.labels.at(y, x);
  std::vector<unsigned char> buf;
  cv::imencode(".png", m, buf, {cv::IMWRITE_PNG_COMPRESSION, 6});
  atomic_write(path, buf);
}

inline LabelMask read_label_png(const fs::path& path, int num_classes) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  check(!m.empty(), "cannot read label: " + path.string());
  LabelMask label;
  label.num_classes = num_classes;
  label.labels = Tensor<std::uint8_t>({m.rows, m.cols});
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) label.labels.at(y, x) = m.at<std::uint8_t>(y, x);
  check(label.in_range(), "label out of range in " + path.string());
  return label;
}

/// Prompt masks are stored 0/255 for viewability; any nonzero decodes to 1.
inline void write_mask_png(const fs::path& path, const Tensor<std::uint8_t>& mask) {
  const int h = static_cast<int>(mask.dim(0)), w = static_cast<int>(mask.dim(1));
  cv::Mat m(h, w, CV_8UC1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.at<std::uint8_t>(y, x) = mask.at(y, x) ? 255 : 0;
  std::vector<unsigned char> buf;
  cv::imencode(".png", m, buf, {cv::IMWRITE_PNG_COMPRESSION, 6});
  atomic_write(path, buf);
}

inline Tensor<std::uint8_t> read_mask_png(const fs::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  check(!m.empty(), "cannot read mask: " + path.string());
  Tensor<std::uint8_t> mask({m.rows, m.cols});
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) mask.at(y, x) = m.at<std::uint8_t>(y, x) ? 1 : 0;
  return mask;
}

}  // namespace unseg::data
