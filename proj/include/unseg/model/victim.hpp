#pragma once

// Victim architectures for evaluating protection. Two families so that
// cross-architecture transfer can be measured:
//   conv_fcn  - 6-layer dilated convolutional pixel classifier
//   token_seg - the promptable trunk without prompts plus a class head

#include <memory>
#include <string>

#include "unseg/model/segmodel.hpp"

namespace unseg::model {

enum class VictimArch { conv_fcn, token_seg };

inline const char* to_string(VictimArch a) { return a == VictimArch::conv_fcn ? "conv_fcn" : "token_seg"; }
inline VictimArch victim_arch_from_string(const std::string& s) {
  if (s == "conv_fcn") return VictimArch::conv_fcn;
  if (s == "token_seg") return VictimArch::token_seg;
  throw Error("unknown victim arch: " + s);
}

template <typename T>
class ConvFcnVictim {
 public:
  int image_size = 64;
  int num_classes = 9;
  int width = 32;

  ConvFcnVictim() = default;
  ConvFcnVictim(int size, int classes, std::uint64_t seed, int w = 32)
      : image_size(size), num_classes(classes), width(w) {
    const int w0 = std::max(8, w * 3 / 4);
    layers_.emplace_back("fcn.l0", 3, w0, ConvSpec::strided3x3(2), seed);
    layers_.emplace_back("fcn.l1", w0, w, ConvSpec::same3x3(1), seed);
    layers_.emplace_back("fcn.l2", w, w, ConvSpec::same3x3(2), seed);
    layers_.emplace_back("fcn.l3", w, w, ConvSpec::same3x3(4), seed);
    layers_.emplace_back("fcn.l4", w, w, ConvSpec::same3x3(2), seed);
    layers_.emplace_back("fcn.cls", w, classes, ConvSpec::k1x1(), seed);
  }

  template <typename Sink>
  void collect(Sink& reg) {
    for (auto& l : layers_) l.collect(reg);
  }

  /// Returns per-pixel class logits, [H, W, num_classes].
  Var<T> forward(Tape<T>& tape, const Tensor<T>& image_hwc, bool trainable) {
    Fwd<T> f{tape, trainable};
    auto x = f.leaf(image_hwc);
    Var<T> h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i](f, h);
      if (i + 1 < layers_.size()) h = relu(h);
    }
    return upsample_bilinear(h, 2);  // logits computed at stride 2
  }

 private:
  std::vector<ConvLayer<T>> layers_;
};

template <typename T>
class TokenSegVictim {
 public:
  SegModelConfig cfg;
  int num_classes = 9;

  TokenSegVictim() = default;
  TokenSegVictim(const SegModelConfig& c, int classes, std::uint64_t seed)
      : cfg(c), num_classes(classes), trunk_(c, seed),
        cls_("tokseg.cls", c.embed_dim, classes, seed) {}

  template <typename Sink>
  void collect(Sink& reg) {
    trunk_.collect_all(reg);
    cls_.collect(reg);
  }

  Var<T> forward(Tape<T>& tape, const Tensor<T>& image_hwc, bool trainable) {
    // Prompt-free: the trunk runs with an empty prompt mask.
    Tensor<T> no_prompt({cfg.image_size, cfg.image_size}, T(0));
    auto out = trunk_.forward(tape, image_hwc, no_prompt, trainable ? TrainMode::all : TrainMode::frozen);
    Fwd<T> f{tape, trainable};
    const std::int64_t hw = static_cast<std::int64_t>(cfg.image_size) * cfg.image_size;
    auto flat = reshape(out.f_dec, {hw, cfg.embed_dim});
    auto logits = cls_(f, flat);
    return reshape(logits, {cfg.image_size, cfg.image_size, num_classes});
  }

 private:
  PromptableSegModel<T> trunk_;
  LinearLayer<T> cls_;
};

/// Tagged union over the two victim families with a single forward contract:
/// forward(image) -> [H, W, num_classes] logits.
template <typename T>
class VictimModel {
 public:
  VictimArch arch = VictimArch::conv_fcn;
  int image_size = 64;
  int num_classes = 9;

  VictimModel() = default;

  static VictimModel conv_fcn(int size, int classes, std::uint64_t seed) {
    VictimModel m;
    m.arch = VictimArch::conv_fcn;
    m.image_size = size;
    m.num_classes = classes;
    m.conv_ = std::make_shared<ConvFcnVictim<T>>(size, classes, seed);
    return m;
  }

  static VictimModel token_seg(int size, int classes, std::uint64_t seed) {
    VictimModel m;
    m.arch = VictimArch::token_seg;
    m.image_size = size;
    m.num_classes = classes;
    SegModelConfig cfg;
    cfg.image_size = size;
    m.token_ = std::make_shared<TokenSegVictim<T>>(cfg, classes, seed);
    return m;
  }

  static VictimModel make(VictimArch arch, int size, int classes, std::uint64_t seed) {
    return arch == VictimArch::conv_fcn ? conv_fcn(size, classes, seed) : token_seg(size, classes, seed);
  }

  template <typename Sink>
  void collect(Sink& reg) {
    if (conv_) conv_->collect(reg);
    if (token_) token_->collect(reg);
  }

  Var<T> forward(Tape<T>& tape, const Tensor<T>& image_hwc, bool trainable = true) {
    check(image_hwc.rank() == 3 && image_hwc.dim(0) == image_size && image_hwc.dim(1) == image_size,
          "victim: image shape mismatch");
    Var<T> logits = conv_ ? conv_->forward(tape, image_hwc, trainable)
                          : token_->forward(tape, image_hwc, trainable);
    return logits;
  }

 private:
  std::shared_ptr<ConvFcnVictim<T>> conv_;
  std::shared_ptr<TokenSegVictim<T>> token_;
};

/// Inference helper: plain multi-class logits for one image.
template <typename T>
Tensor<T> forward_victim(VictimModel<T>& model, const Tensor<T>& image_hwc) {
  Tape<T> tape;
  auto out = model.forward(tape, image_hwc, false);
  Tensor<T> logits = tape.value(out);
  check(logits.all_finite(), "forward_victim: non-finite logits");
  return logits;
}

}  // namespace unseg::model
