#pragma once

// Unlearnable-noise head. The raw field is tanh of the dot products between
// decoder pixel features and the three updated noise tokens (one per color
// channel); the per-pixel budget map scales it into the final field, so the
// L-infinity bound holds by construction with no post-hoc clipping. During
// training the budget is divided by the integer scale v and the divisor is
// dropped at inference (epsilon generalization).

#include <cmath>

#include "unseg/data/types.hpp"
#include "unseg/model/segmodel.hpp"

namespace unseg::noise {

using data::Image;
using data::MaskPrompt;
using data::PromptKind;

struct NoiseBudget {
  float eps_target = 8.0f / 255.0f;
  float eps_unrelated = 2.0f / 255.0f;
  int train_scale = 4;  // v; inference always behaves as v=1

  void validate() const {
    check(eps_target > 0.0f && eps_target <= 1.0f, "budget: eps_target must be in (0, 1]");
    check(eps_unrelated >= 0.0f && eps_unrelated <= eps_target, "budget: eps_unrelated must be <= eps_target");
    check(train_scale >= 1, "budget: train scale v must be a positive integer");
  }
};

struct NoiseField {
  Tensor<float> delta;  // [H, W, 3]
};

enum class NoiseMode { train, infer };

/// The high-budget region for a prompt: the mask itself for mask prompts, the
/// filled box for box prompts, and a small disk (radius 3 px) around the
/// single set pixel for point prompts.
inline Tensor<std::uint8_t> eps_region(const MaskPrompt& prompt) {
  const std::int64_t h = prompt.mask.dim(0), w = prompt.mask.dim(1);
  if (prompt.kind != PromptKind::point) return prompt.mask;
  Tensor<std::uint8_t> region({h, w});
  std::int64_t py = -1, px = -1;
  for (std::int64_t y = 0; y < h && py < 0; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      if (prompt.mask.at(y, x)) {
        py = y;
        px = x;
        break;
      }
  check(py >= 0, "eps_region: empty point prompt");
  constexpr std::int64_t r = 3;
  for (std::int64_t y = std::max<std::int64_t>(0, py - r); y <= std::min(h - 1, py + r); ++y)
    for (std::int64_t x = std::max<std::int64_t>(0, px - r); x <= std::min(w - 1, px + r); ++x)
      if ((y - py) * (y - py) + (x - px) * (x - px) <= r * r) region.at(y, x) = 1;
  return region;
}

/// Per-pixel, per-channel epsilon map: eps_target inside the region,
/// eps_unrelated outside.
template <typename T>
Tensor<T> eps_map(const Tensor<std::uint8_t>& region, T eps_target, T eps_unrelated) {
  const std::int64_t h = region.dim(0), w = region.dim(1);
  Tensor<T> m({h, w, 3});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const T e = region.at(y, x) ? eps_target : eps_unrelated;
      m.at(y, x, 0) = e;
      m.at(y, x, 1) = e;
      m.at(y, x, 2) = e;
    }
  return m;
}

/// delta = tanh(F_dec (.) T_noise^T) * E [/ v in train mode].
/// Exposed separately so tests can drive it with hand-picked features/tokens.
template <typename T>
Var<T> noise_from_features(Var<T> f_dec, Var<T> noise_tokens, const Tensor<T>& eps, NoiseMode mode, int v) {
  Tape<T>& tape = *f_dec.tape;
  const Tensor<T>& F = tape.value(f_dec);
  check(F.rank() == 3, "noise_from_features: f_dec must be HWC");
  const std::int64_t h = F.dim(0), w = F.dim(1), c = F.dim(2);
  check(tape.value(noise_tokens).rank() == 2 && tape.value(noise_tokens).dim(0) == 3 &&
            tape.value(noise_tokens).dim(1) == c,
        "noise_from_features: tokens must be [3, C]");
  check(eps.rank() == 3 && eps.dim(0) == h && eps.dim(1) == w && eps.dim(2) == 3,
        "noise_from_features: eps map must be [H, W, 3]");
  auto flat = reshape(f_dec, {h * w, c});
  auto raw = tanh_open(matmul(flat, transpose(noise_tokens)));  // [HW, 3], entries in (-1, 1)
  auto field = mul(reshape(raw, {h, w, 3}), tape.leaf(eps));
  if (mode == NoiseMode::train && v > 1) field = scale(field, T(1) / static_cast<T>(v));
  return field;
}

/// On-tape generation through a noise-token generator. `image` may be a graph
/// node; gradients reach the noise tokens and noise head when `mode` allows.
template <typename T>
Var<T> generate_noise_var(Tape<T>& tape, model::PromptableSegModel<T>& generator, Var<T> image,
                          const MaskPrompt& prompt, const NoiseBudget& budget, NoiseMode mode,
                          model::TrainMode train_mode = model::TrainMode::noise_only) {
  budget.validate();
  check(!prompt.empty(), "generate_noise: empty prompt");
  check(generator.cfg.with_noise_tokens, "generate_noise: model lacks noise tokens");
  Tensor<T> prompt_f({prompt.mask.dim(0), prompt.mask.dim(1)});
  for (std::int64_t i = 0; i < prompt_f.numel(); ++i) prompt_f[i] = static_cast<T>(prompt.mask[i]);
  auto out = generator.forward(tape, image, prompt_f, train_mode);
  auto eps = eps_map<T>(eps_region(prompt), static_cast<T>(budget.eps_target),
                        static_cast<T>(budget.eps_unrelated));
  return noise_from_features(out.f_dec, *out.noise_tokens, eps, mode, budget.train_scale);
}

/// Plain-value generation (no gradients kept).
inline NoiseField generate_noise(model::PromptableSegModel<float>& generator, const Image& image,
                                 const MaskPrompt& prompt, const NoiseBudget& budget, NoiseMode mode) {
  Tape<float> tape;
  auto v = generate_noise_var(tape, generator, tape.leaf(image.pixels), prompt, budget, mode,
                              model::TrainMode::frozen);
  NoiseField f;
  f.delta = tape.value(v);
  check(f.delta.all_finite(), "generate_noise: non-finite field");
  return f;
}

/// out = clip(image + delta, 0, 1).
inline Image apply_noise(const Image& image, const NoiseField& field) {
  check(image.pixels.same_shape(field.delta), "apply_noise: shape mismatch");
  Image out;
  out.id = image.id;
  out.pixels = image.pixels;
  for (std::int64_t i = 0; i < out.pixels.numel(); ++i)
    out.pixels[i] = std::min(1.0f, std::max(0.0f, out.pixels[i] + field.delta[i]));
  return out;
}

struct EgCheckResult {
  bool exact = true;
  float max_abs_diff = 0.0f;
};

/// Verifies delta_train == delta_infer / v elementwise (the generation is
/// linear in the budget, so the relation is exact up to one float multiply).
inline EgCheckResult eg_scaling_check(model::PromptableSegModel<float>& generator, const Image& image,
                                      const MaskPrompt& prompt, const NoiseBudget& budget) {
  NoiseField train_field = generate_noise(generator, image, prompt, budget, NoiseMode::train);
  NoiseField infer_field = generate_noise(generator, image, prompt, budget, NoiseMode::infer);
  const float inv_v = 1.0f / static_cast<float>(budget.train_scale);
  EgCheckResult r;
  for (std::int64_t i = 0; i < train_field.delta.numel(); ++i) {
    const float expect = budget.train_scale > 1 ? infer_field.delta[i] * inv_v : infer_field.delta[i];
    const float d = std::abs(train_field.delta[i] - expect);
    if (d != 0.0f) {
      r.exact = false;
      r.max_abs_diff = std::max(r.max_abs_diff, d);
    }
  }
  return r;
}

}  // namespace unseg::noise
