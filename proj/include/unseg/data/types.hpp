#pragma once

#include <cstdint>
#include <string>

#include "unseg/core/tensor.hpp"

namespace unseg::data {

/// RGB image with values in [0, 1], stored H x W x 3.
struct Image {
  Tensor<float> pixels;
  std::string id;

  std::int64_t height() const { return pixels.dim(0); }
  std::int64_t width() const { return pixels.dim(1); }

  bool valid_range() const {
    for (float v : pixels.v)
      if (!(v >= 0.0f && v <= 1.0f)) return false;
    return true;
  }
};

/// Per-pixel class ids, H x W. Label 0 is background.
struct LabelMask {
  Tensor<std::uint8_t> labels;
  int num_classes = 2;

  std::int64_t height() const { return labels.dim(0); }
  std::int64_t width() const { return labels.dim(1); }

  bool in_range() const {
    for (auto v : labels.v)
      if (v >= num_classes) return false;
    return true;
  }

  bool is_binary() const { return num_classes == 2 && in_range(); }
};

enum class PromptKind { point, box, mask };

inline const char* to_string(PromptKind k) {
  switch (k) {
    case PromptKind::point: return "point";
    case PromptKind::box: return "box";
    default: return "mask";
  }
}

inline PromptKind prompt_kind_from_string(const std::string& s) {
  if (s == "point") return PromptKind::point;
  if (s == "box") return PromptKind::box;
  if (s == "mask") return PromptKind::mask;
  throw Error("unknown prompt kind: " + s);
}

/// Visual prompt encoded as a binary mask regardless of kind; `kind` records
/// how it was produced (single pixel, filled box, or exact region).
struct MaskPrompt {
  Tensor<std::uint8_t> mask;
  PromptKind kind = PromptKind::mask;

  std::int64_t set_count() const {
    std::int64_t n = 0;
    for (auto v : mask.v) n += v ? 1 : 0;
    return n;
  }
  bool empty() const { return set_count() == 0; }
};

struct SegSample {
  Image image;
  MaskPrompt prompt;
  LabelMask label;
};

}  // namespace unseg::data
