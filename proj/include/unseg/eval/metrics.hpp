#pragma once

#include <vector>

#include "unseg/data/types.hpp"

namespace unseg::eval {

using data::LabelMask;

struct MiouResult {
  double miou = 0;
  std::vector<double> per_class;  // NaN-free: absent classes carry 0 and present=false
  std::vector<bool> present;

  int present_count() const {
    int n = 0;
    for (bool b : present) n += b ? 1 : 0;
    return n;
  }
};

/// Accumulates per-class intersection/union counts; works for a single pair
/// or across a whole validation set.
struct IouAccumulator {
  std::vector<std::int64_t> inter, uni;

  explicit IouAccumulator(int num_classes)
      : inter(static_cast<std::size_t>(num_classes), 0), uni(static_cast<std::size_t>(num_classes), 0) {}

  void add(const LabelMask& pred, const LabelMask& gt) {
    check(pred.labels.same_shape(gt.labels), "miou: shape mismatch");
    const int k = static_cast<int>(inter.size());
    for (std::int64_t i = 0; i < pred.labels.numel(); ++i) {
      const int p = pred.labels[i], g = gt.labels[i];
      check(p >= 0 && p < k && g >= 0 && g < k, "miou: label out of range");
      if (p == g) {
        ++inter[static_cast<std::size_t>(p)];
        ++uni[static_cast<std::size_t>(p)];
      } else {
        ++uni[static_cast<std::size_t>(p)];
        ++uni[static_cast<std::size_t>(g)];
      }
    }
  }

  /// Classes with an empty union (absent from both predictions and ground
  /// truth) are excluded from the mean.
  MiouResult result() const {
    MiouResult r;
    r.per_class.assign(inter.size(), 0.0);
    r.present.assign(inter.size(), false);
    double sum = 0;
    int n = 0;
    for (std::size_t c = 0; c < inter.size(); ++c) {
      if (uni[c] == 0) continue;
      r.present[c] = true;
      r.per_class[c] = static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
      sum += r.per_class[c];
      ++n;
    }
    r.miou = n > 0 ? sum / n : 0.0;
    return r;
  }
};

/// Mean intersection-over-union between one prediction and its ground truth.
inline MiouResult miou(const LabelMask& pred, const LabelMask& gt, int num_classes) {
  IouAccumulator acc(num_classes);
  acc.add(pred, gt);
  return acc.result();
}

/// argmax over the class dimension of [H, W, K] logits.
template <typename T>
LabelMask argmax_labels(const Tensor<T>& logits, int num_classes) {
  LabelMask out;
  out.num_classes = num_classes;
  const std::int64_t h = logits.dim(0), w = logits.dim(1), k = logits.dim(2);
  out.labels = Tensor<std::uint8_t>({h, w});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      int best = 0;
      for (int c = 1; c < k; ++c)
        if (logits.at(y, x, c) > logits.at(y, x, best)) best = c;
      out.labels.at(y, x) = static_cast<std::uint8_t>(best);
    }
  return out;
}

}  // namespace unseg::eval
