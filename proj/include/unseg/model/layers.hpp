#pragma once

#include <string>

#include "unseg/core/optim.hpp"
#include "unseg/core/rng.hpp"
#include "unseg/core/tape.hpp"

namespace unseg::model {

/// Forward-pass context: which tape to build on and whether the parameters
/// touched through it accumulate gradients.
template <typename T>
struct Fwd {
  Tape<T>& tape;
  bool trainable = true;

  Var<T> p(Param<T>& par) const { return tape.param(par, trainable); }
  Var<T> leaf(const Tensor<T>& t) const { return tape.leaf(t); }
};

template <typename T>
struct LinearLayer {
  Param<T> W, b;

  LinearLayer() = default;
  LinearLayer(const std::string& name, std::int64_t cin, std::int64_t cout, std::uint64_t seed) {
    auto rng = substream(seed, name);
    const T sd = std::sqrt(T(2) / static_cast<T>(cin + cout));
    W = Param<T>(name + ".W", Tensor<T>::randn({cin, cout}, sd, rng));
    b = Param<T>(name + ".b", Tensor<T>::zeros({cout}));
  }

  Var<T> operator()(const Fwd<T>& f, Var<T> x) { return add_bias(matmul(x, f.p(W)), f.p(b)); }

  template <typename Sink>
  void collect(Sink& reg) {
    reg.add(W);
    reg.add(b);
  }
};

template <typename T>
struct LayerNormLayer {
  Param<T> gamma, beta;

  LayerNormLayer() = default;
  LayerNormLayer(const std::string& name, std::int64_t c) {
    gamma = Param<T>(name + ".gamma", Tensor<T>::full({c}, T(1)));
    beta = Param<T>(name + ".beta", Tensor<T>::zeros({c}));
  }

  Var<T> operator()(const Fwd<T>& f, Var<T> x) { return layernorm(x, f.p(gamma), f.p(beta)); }

  template <typename Sink>
  void collect(Sink& reg) {
    reg.add(gamma);
    reg.add(beta);
  }
};

template <typename T>
struct ConvLayer {
  Param<T> W, b;
  ConvSpec spec;

  ConvLayer() = default;
  ConvLayer(const std::string& name, std::int64_t cin, std::int64_t cout, const ConvSpec& s, std::uint64_t seed)
      : spec(s) {
    auto rng = substream(seed, name);
    const std::int64_t fan_in = static_cast<std::int64_t>(s.kh) * s.kw * cin;
    const T sd = std::sqrt(T(2) / static_cast<T>(fan_in));
    W = Param<T>(name + ".W", Tensor<T>::randn({fan_in, cout}, sd, rng));
    b = Param<T>(name + ".b", Tensor<T>::zeros({cout}));
  }

  Var<T> operator()(const Fwd<T>& f, Var<T> x) { return conv2d(x, f.p(W), f.p(b), spec); }

  template <typename Sink>
  void collect(Sink& reg) {
    reg.add(W);
    reg.add(b);
  }
};

/// Multi-head attention with queries from `q` and keys/values from `kv`
/// (pass the same var twice for self-attention).
template <typename T>
struct AttentionLayer {
  LinearLayer<T> wq, wk, wv, wo;
  int heads = 4;
  std::int64_t dim = 64;

  AttentionLayer() = default;
  AttentionLayer(const std::string& name, std::int64_t c, int n_heads, std::uint64_t seed)
      : wq(name + ".q", c, c, seed), wk(name + ".k", c, c, seed), wv(name + ".v", c, c, seed),
        wo(name + ".o", c, c, seed), heads(n_heads), dim(c) {
    check(c % n_heads == 0, "attention: heads must divide dim");
  }

  Var<T> operator()(const Fwd<T>& f, Var<T> q, Var<T> kv) {
    Var<T> Q = wq(f, q), K = wk(f, kv), V = wv(f, kv);
    const std::int64_t dh = dim / heads;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Var<T>> outs;
    for (int h = 0; h < heads; ++h) {
      auto Qh = slice_cols(Q, h * dh, (h + 1) * dh);
      auto Kh = slice_cols(K, h * dh, (h + 1) * dh);
      auto Vh = slice_cols(V, h * dh, (h + 1) * dh);
      auto A = softmax_rows(scale(matmul(Qh, transpose(Kh)), inv_sqrt));
      outs.push_back(matmul(A, Vh));
    }
    return wo(f, concat_cols(outs));
  }

  template <typename Sink>
  void collect(Sink& reg) {
    wq.collect(reg);
    wk.collect(reg);
    wv.collect(reg);
    wo.collect(reg);
  }
};

template <typename T>
struct MlpLayer {
  LinearLayer<T> fc1, fc2;

  MlpLayer() = default;
  MlpLayer(const std::string& name, std::int64_t c, std::int64_t hidden, std::uint64_t seed)
      : fc1(name + ".fc1", c, hidden, seed), fc2(name + ".fc2", hidden, c, seed) {}

  Var<T> operator()(const Fwd<T>& f, Var<T> x) { return fc2(f, gelu(fc1(f, x))); }

  template <typename Sink>
  void collect(Sink& reg) {
    fc1.collect(reg);
    fc2.collect(reg);
  }
};

/// Pre-norm transformer encoder block.
template <typename T>
struct EncoderBlock {
  LayerNormLayer<T> ln1, ln2;
  AttentionLayer<T> attn;
  MlpLayer<T> mlp;

  EncoderBlock() = default;
  EncoderBlock(const std::string& name, std::int64_t c, int heads, int mlp_ratio, std::uint64_t seed)
      : ln1(name + ".ln1", c), ln2(name + ".ln2", c), attn(name + ".attn", c, heads, seed),
        mlp(name + ".mlp", c, c * mlp_ratio, seed) {}

  Var<T> operator()(const Fwd<T>& f, Var<T> x) {
    auto n = ln1(f, x);
    x = add(x, attn(f, n, n));
    x = add(x, mlp(f, ln2(f, x)));
    return x;
  }

  template <typename Sink>
  void collect(Sink& reg) {
    ln1.collect(reg);
    ln2.collect(reg);
    attn.collect(reg);
    mlp.collect(reg);
  }
};

/// Decoder block that updates tokens from image features and image features
/// from tokens (the two-way pattern of promptable mask decoders).
template <typename T>
struct TwoWayBlock {
  LayerNormLayer<T> ln1, ln2, ln3, ln4;
  AttentionLayer<T> self_attn, cross_t2i, cross_i2t;
  MlpLayer<T> mlp;

  TwoWayBlock() = default;
  TwoWayBlock(const std::string& name, std::int64_t c, int heads, int mlp_ratio, std::uint64_t seed)
      : ln1(name + ".ln1", c), ln2(name + ".ln2", c), ln3(name + ".ln3", c), ln4(name + ".ln4", c),
        self_attn(name + ".self", c, heads, seed), cross_t2i(name + ".t2i", c, heads, seed),
        cross_i2t(name + ".i2t", c, heads, seed), mlp(name + ".mlp", c, c * mlp_ratio, seed) {}

  void operator()(const Fwd<T>& f, Var<T>& tokens, Var<T>& img) {
    auto n = ln1(f, tokens);
    tokens = add(tokens, self_attn(f, n, n));
    tokens = add(tokens, cross_t2i(f, ln2(f, tokens), img));
    tokens = add(tokens, mlp(f, ln3(f, tokens)));
    img = add(img, cross_i2t(f, ln4(f, img), tokens));
  }

  template <typename Sink>
  void collect(Sink& reg) {
    ln1.collect(reg);
    ln2.collect(reg);
    ln3.collect(reg);
    ln4.collect(reg);
    self_attn.collect(reg);
    cross_t2i.collect(reg);
    cross_i2t.collect(reg);
    mlp.collect(reg);
  }
};

}  // namespace unseg::model
