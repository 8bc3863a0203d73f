#pragma once

// The promptable segmentation architecture used three ways: as the noise
// generator's backbone, as the from-scratch surrogate, and (prompt-free, with
// a class head) as the token_seg victim.

#include <optional>
#include <string>

#include "unseg/data/types.hpp"
#include "unseg/model/layers.hpp"

namespace unseg::model {

struct SegModelConfig {
  int image_size = 64;
  int embed_dim = 64;   // C
  int patch = 4;        // feature grid is image_size / patch
  int encoder_blocks = 2;
  int decoder_blocks = 2;
  int heads = 4;
  int mlp_ratio = 2;
  bool with_noise_tokens = false;
  int num_output_tokens = 4;

  int grid() const { return image_size / patch; }
  int grid_count() const { return grid() * grid(); }
};

/// Which parameters receive gradients in a given forward pass.
enum class TrainMode { all, frozen, noise_only };

template <typename T>
struct SegForward {
  Var<T> mask_logits;           // [H, W]
  Var<T> f_dec;                 // [H, W, C]
  std::optional<Var<T>> noise_tokens;  // [3, C] when the model has noise tokens
};

template <typename T>
class PromptableSegModel {
 public:
  SegModelConfig cfg;

  PromptableSegModel() = default;

  PromptableSegModel(const SegModelConfig& c, std::uint64_t seed) : cfg(c) {
    check(cfg.patch == 2 || cfg.patch == 4, "segmodel: patch must be 2 or 4");
    check(cfg.image_size % cfg.patch == 0, "segmodel: patch must divide image size");
    const std::int64_t C = cfg.embed_dim;
    patchify_ = ConvLayer<T>("enc.patch", 3, C, ConvSpec::patchify(cfg.patch), seed);
    {
      auto rng = substream(seed, "enc.pos");
      pos_embed_ = Param<T>("enc.pos", Tensor<T>::randn({cfg.grid_count(), C}, T(0.02), rng));
    }
    for (int i = 0; i < cfg.encoder_blocks; ++i)
      enc_blocks_.emplace_back("enc.block" + std::to_string(i), C, cfg.heads, cfg.mlp_ratio, seed);
    enc_ln_ = LayerNormLayer<T>("enc.ln", C);

    prompt_token_ = LinearLayer<T>("prompt.token", cfg.grid_count(), C, seed);
    {
      auto rng = substream(seed, "prompt.dense");
      prompt_dense_ = Param<T>("prompt.dense", Tensor<T>::randn({1, C}, T(0.02), rng));
    }

    {
      auto rng = substream(seed, "dec.tokens");
      output_tokens_ = Param<T>("dec.tokens", Tensor<T>::randn({cfg.num_output_tokens, C}, T(0.02), rng));
    }
    for (int i = 0; i < cfg.decoder_blocks; ++i)
      dec_blocks_.emplace_back("dec.block" + std::to_string(i), C, cfg.heads, cfg.mlp_ratio, seed);
    dec_tok_ln_ = LayerNormLayer<T>("dec.tok_ln", C);
    dec_img_ln_ = LayerNormLayer<T>("dec.img_ln", C);

    head_conv_ = ConvLayer<T>("head.conv", C, C, ConvSpec::same3x3(1), seed);
    head_proj_ = ConvLayer<T>("head.proj", C, C, ConvSpec::k1x1(), seed);
    mask_mlp_ = MlpLayer<T>("head.mask_mlp", C, C, seed);
    mask_bias_ = Param<T>("head.mask_bias", Tensor<T>::zeros({1}));

    if (cfg.with_noise_tokens) {
      auto rng = substream(seed, "noise.tokens");
      noise_tokens_ = Param<T>("noise.tokens", Tensor<T>::randn({3, C}, T(0.02), rng));
      noise_mlp_ = MlpLayer<T>("noise.mlp", C, C, seed);
    }
  }

  /// Core parameters (everything except the noise surface).
  template <typename Sink>
  void collect_core(Sink& reg) {
    patchify_.collect(reg);
    reg.add(pos_embed_);
    for (auto& b : enc_blocks_) b.collect(reg);
    enc_ln_.collect(reg);
    prompt_token_.collect(reg);
    reg.add(prompt_dense_);
    reg.add(output_tokens_);
    for (auto& b : dec_blocks_) b.collect(reg);
    dec_tok_ln_.collect(reg);
    dec_img_ln_.collect(reg);
    head_conv_.collect(reg);
    head_proj_.collect(reg);
    mask_mlp_.collect(reg);
    reg.add(mask_bias_);
  }

  /// Noise tokens plus the noise head; the only trainable surface during the
  /// generator phase.
  template <typename Sink>
  void collect_noise(Sink& reg) {
    check(cfg.with_noise_tokens, "model has no noise tokens");
    reg.add(noise_tokens_);
    noise_mlp_.collect(reg);
  }

  template <typename Sink>
  void collect_all(Sink& reg) {
    collect_core(reg);
    if (cfg.with_noise_tokens) collect_noise(reg);
  }

  Param<T>& noise_token_param() { return noise_tokens_; }

  /// Full forward pass. The prompt mask is a [H, W] 0/1 tensor. The image may
  /// be any graph node (e.g. a perturbed image), so gradients can flow into
  /// whatever produced it.
  SegForward<T> forward(Tape<T>& tape, Var<T> image, const Tensor<T>& prompt_mask,
                        TrainMode mode = TrainMode::frozen) {
    const Tensor<T>& image_hwc = tape.value(image);
    check(image_hwc.rank() == 3 && image_hwc.dim(0) == cfg.image_size && image_hwc.dim(1) == cfg.image_size &&
              image_hwc.dim(2) == 3,
          "segmodel: image shape mismatch");
    check(prompt_mask.rank() == 2 && prompt_mask.dim(0) == cfg.image_size && prompt_mask.dim(1) == cfg.image_size,
          "segmodel: prompt shape mismatch");
    const std::int64_t C = cfg.embed_dim;
    const std::int64_t g = cfg.grid(), n = cfg.grid_count();

    Fwd<T> core{tape, mode == TrainMode::all};
    Fwd<T> noise{tape, mode == TrainMode::all || mode == TrainMode::noise_only};

    // image encoder
    auto feats = patchify_(core, image);                   // [g, g, C]
    auto seq = reshape(feats, {n, C});
    seq = add(seq, core.p(pos_embed_));
    for (auto& b : enc_blocks_) seq = b(core, seq);
    seq = enc_ln_(core, seq);

    // prompt encoder: one token + a dense additive embedding
    Tensor<T> pm({cfg.image_size, cfg.image_size, 1});
    for (std::int64_t i = 0; i < prompt_mask.numel(); ++i) pm[i] = prompt_mask[i];
    auto pooled = avgpool2d(core.leaf(pm), cfg.patch);     // [g, g, 1]
    auto pooled_row = reshape(pooled, {1, n});
    auto prompt_tok = prompt_token_(core, pooled_row);     // [1, C]
    auto dense = matmul(reshape(pooled, {n, 1}), core.p(prompt_dense_));  // [n, C]
    auto img = add(seq, dense);

    // decoder over [output tokens | prompt token | noise tokens]
    std::vector<Var<T>> parts{core.p(output_tokens_), prompt_tok};
    if (cfg.with_noise_tokens) parts.push_back(noise.p(noise_tokens_));
    auto tokens = concat_rows(parts);
    for (auto& b : dec_blocks_) b(core, tokens, img);
    tokens = dec_tok_ln_(core, tokens);
    img = dec_img_ln_(core, img);

    // per-pixel feature head: grid -> full resolution
    auto fmap = reshape(img, {g, g, C});
    fmap = upsample_bilinear(fmap, 2);
    fmap = gelu(head_conv_(core, fmap));
    if (cfg.patch == 4) fmap = upsample_bilinear(fmap, 2);
    auto f_dec = head_proj_(core, fmap);                   // [H, W, C]

    // mask prediction: hypernetwork-style dot product with the mask token
    auto mask_vec = mask_mlp_(core, slice_rows(tokens, 0, 1));            // [1, C]
    auto flat = reshape(f_dec, {static_cast<std::int64_t>(cfg.image_size) * cfg.image_size, C});
    auto logits = matmul(flat, transpose(mask_vec));                      // [HW, 1]
    logits = add_bias(logits, core.p(mask_bias_));
    SegForward<T> out;
    out.mask_logits = reshape(logits, {cfg.image_size, cfg.image_size});
    out.f_dec = f_dec;
    if (cfg.with_noise_tokens) {
      const std::int64_t t0 = cfg.num_output_tokens + 1;
      out.noise_tokens = noise_mlp_(noise, slice_rows(tokens, t0, t0 + 3));
    }
    return out;
  }

  SegForward<T> forward(Tape<T>& tape, const Tensor<T>& image_hwc, const Tensor<T>& prompt_mask,
                        TrainMode mode = TrainMode::frozen) {
    return forward(tape, tape.leaf(image_hwc), prompt_mask, mode);
  }

 private:
  ConvLayer<T> patchify_;
  Param<T> pos_embed_;
  std::vector<EncoderBlock<T>> enc_blocks_;
  LayerNormLayer<T> enc_ln_;
  LinearLayer<T> prompt_token_;
  Param<T> prompt_dense_;
  Param<T> output_tokens_;
  std::vector<TwoWayBlock<T>> dec_blocks_;
  LayerNormLayer<T> dec_tok_ln_, dec_img_ln_;
  ConvLayer<T> head_conv_, head_proj_;
  MlpLayer<T> mask_mlp_;
  Param<T> mask_bias_;
  Param<T> noise_tokens_;
  MlpLayer<T> noise_mlp_;
};

/// Pixel-wise binary cross-entropy. With `label_mod` the target becomes the
/// all-ones map (background labels flipped to foreground).
template <typename T>
Var<T> seg_loss(Var<T> logits_hw, const Tensor<std::uint8_t>& target_hw, bool label_mod = false) {
  const Tensor<T>& L = logits_hw.tape->value(logits_hw);
  check(L.numel() == target_hw.numel(), "seg_loss: shape mismatch");
  Tensor<T> tgt(L.dims);
  for (std::int64_t i = 0; i < tgt.numel(); ++i) {
    check(target_hw[i] == 0 || target_hw[i] == 1, "seg_loss: target must be binary");
    tgt[i] = label_mod ? T(1) : static_cast<T>(target_hw[i]);
  }
  return bce_with_logits_mean(logits_hw, tgt);
}

/// Convenience: run the model in inference mode and return plain logits.
template <typename T>
Tensor<T> forward_seg(PromptableSegModel<T>& model, const Tensor<T>& image_hwc, const Tensor<T>& prompt_mask) {
  Tape<T> tape;
  auto out = model.forward(tape, image_hwc, prompt_mask, TrainMode::frozen);
  Tensor<T> logits = tape.value(out.mask_logits);
  check(logits.all_finite(), "forward_seg: non-finite logits");
  return logits;
}

}  // namespace unseg::model
