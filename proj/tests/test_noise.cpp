#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "gradcheck.hpp"
#include "unseg/noise/noisegen.hpp"

using namespace unseg;
using namespace unseg::noise;
using model::PromptableSegModel;
using model::SegModelConfig;

namespace {

SegModelConfig gen_cfg(int size = 32, int dim = 16) {
  SegModelConfig c;
  c.image_size = size;
  c.embed_dim = dim;
  c.patch = 4;
  c.encoder_blocks = 1;
  c.decoder_blocks = 1;
  c.heads = 2;
  c.with_noise_tokens = true;
  return c;
}

data::Image random_image(int size, std::uint64_t seed) {
  auto rng = substream(seed, "img");
  data::Image img;
  img.pixels = Tensor<float>::rand_uniform({size, size, 3}, 0.0f, 1.0f, rng);
  return img;
}

data::MaskPrompt block_prompt(int size, int y0, int y1, int x0, int x1) {
  data::MaskPrompt p;
  p.kind = data::PromptKind::mask;
  p.mask = Tensor<std::uint8_t>({size, size});
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) p.mask.at(y, x) = 1;
  return p;
}

}  // namespace

TEST_CASE("hand-computed 2x2 oracle for the noise equation") {
  // Independent scalar arithmetic: R = tanh(F . T_c), delta = R * eps / v.
  Tape<double> tp;
  Tensor<double> F({2, 2, 2});
  F.at(0, 0, 0) = 0.3;  F.at(0, 0, 1) = -0.7;
  F.at(0, 1, 0) = 1.2;  F.at(0, 1, 1) = 0.4;
  F.at(1, 0, 0) = -0.5; F.at(1, 0, 1) = 0.9;
  F.at(1, 1, 0) = 2.0;  F.at(1, 1, 1) = -1.1;
  Tensor<double> T({3, 2});
  T.at(0, 0) = 0.6;  T.at(0, 1) = -0.2;
  T.at(1, 0) = -1.0; T.at(1, 1) = 0.5;
  T.at(2, 0) = 0.1;  T.at(2, 1) = 0.8;
  Tensor<double> eps({2, 2, 3});
  const double et = 8.0 / 255.0, eu = 2.0 / 255.0;
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x)
      for (int c = 0; c < 3; ++c) eps.at(y, x, c) = (y == 0) ? et : eu;  // top row is the prompt region

  auto f = tp.leaf(F), t = tp.leaf(T);
  auto delta_infer = noise_from_features(f, t, eps, NoiseMode::infer, 4);
  auto delta_train = noise_from_features(tp.leaf(F), tp.leaf(T), eps, NoiseMode::train, 4);

  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x)
      for (int c = 0; c < 3; ++c) {
        const double dot = F.at(y, x, 0) * T.at(c, 0) + F.at(y, x, 1) * T.at(c, 1);
        const double expect = std::tanh(dot) * eps.at(y, x, c);
        REQUIRE(tp.value(delta_infer).at(y, x, c) == Catch::Approx(expect).margin(1e-12));
        REQUIRE(tp.value(delta_train).at(y, x, c) == Catch::Approx(expect / 4.0).margin(1e-12));
      }
}

TEST_CASE("zero noise tokens produce an identically zero field") {
  Tape<float> tp;
  auto rng = substream(9, "F");
  Tensor<float> F = Tensor<float>::randn({4, 4, 8}, 1.0f, rng);
  Tensor<float> zero_tokens({3, 8});
  Tensor<float> eps({4, 4, 3}, 8.0f / 255.0f);
  auto d = noise_from_features(tp.leaf(F), tp.leaf(zero_tokens), eps, NoiseMode::infer, 1);
  for (std::int64_t i = 0; i < tp.value(d).numel(); ++i) REQUIRE(tp.value(d)[i] == 0.0f);
}

TEST_CASE("budget bounds hold strictly, per region, by construction") {
  PromptableSegModel<float> gen(gen_cfg(), 17);
  NoiseBudget budget;
  for (std::uint64_t trial = 0; trial < 8; ++trial) {
    auto img = random_image(32, 100 + trial);
    auto prompt = block_prompt(32, 4, 18, 6, 20);
    NoiseField f = generate_noise(gen, img, prompt, budget, NoiseMode::infer);
    for (std::int64_t y = 0; y < 32; ++y)
      for (std::int64_t x = 0; x < 32; ++x)
        for (int c = 0; c < 3; ++c) {
          const float v = std::abs(f.delta.at(y, x, c));
          REQUIRE(v < budget.eps_target);
          if (!prompt.mask.at(y, x)) REQUIRE(v < budget.eps_unrelated);
        }
  }
}

TEST_CASE("generate_noise rejects an empty prompt") {
  PromptableSegModel<float> gen(gen_cfg(), 17);
  auto img = random_image(32, 5);
  data::MaskPrompt empty;
  empty.mask = Tensor<std::uint8_t>({32, 32});
  REQUIRE_THROWS_AS(generate_noise(gen, img, empty, NoiseBudget{}, NoiseMode::infer), Error);
}

TEST_CASE("eps region: disk for point prompts, identity otherwise") {
  data::MaskPrompt point;
  point.kind = data::PromptKind::point;
  point.mask = Tensor<std::uint8_t>({16, 16});
  point.mask.at(8, 8) = 1;
  auto region = eps_region(point);
  std::int64_t count = 0;
  for (std::int64_t y = 0; y < 16; ++y)
    for (std::int64_t x = 0; x < 16; ++x) {
      if (region.at(y, x)) {
        ++count;
        REQUIRE((y - 8) * (y - 8) + (x - 8) * (x - 8) <= 9);
      }
    }
  REQUIRE(count == 29);  // pixels with squared distance <= 9

  auto box = block_prompt(16, 2, 6, 2, 6);
  box.kind = data::PromptKind::box;
  auto region2 = eps_region(box);
  for (std::int64_t i = 0; i < region2.numel(); ++i) REQUIRE(region2[i] == box.mask[i]);
}

TEST_CASE("prompt locality: the eps map follows the prompt region") {
  NoiseBudget b;
  auto p1 = block_prompt(16, 0, 4, 0, 4);
  auto p2 = block_prompt(16, 10, 14, 9, 13);
  auto m1 = eps_map<float>(eps_region(p1), b.eps_target, b.eps_unrelated);
  auto m2 = eps_map<float>(eps_region(p2), b.eps_target, b.eps_unrelated);
  for (std::int64_t y = 0; y < 16; ++y)
    for (std::int64_t x = 0; x < 16; ++x) {
      REQUIRE(m1.at(y, x, 0) == (p1.mask.at(y, x) ? b.eps_target : b.eps_unrelated));
      REQUIRE(m2.at(y, x, 0) == (p2.mask.at(y, x) ? b.eps_target : b.eps_unrelated));
    }
}

TEST_CASE("apply_noise: identity at zero, clipping at the range edge, quantization slack") {
  auto img = random_image(16, 6);
  NoiseField zero;
  zero.delta = Tensor<float>({16, 16, 3});
  auto same = apply_noise(img, zero);
  for (std::int64_t i = 0; i < img.pixels.numel(); ++i) REQUIRE(same.pixels[i] == img.pixels[i]);

  data::Image bright;
  bright.pixels = Tensor<float>({4, 4, 3}, 1.0f);
  NoiseField up;
  up.delta = Tensor<float>({4, 4, 3}, 8.0f / 255.0f);
  auto clipped = apply_noise(bright, up);
  for (std::int64_t i = 0; i < clipped.pixels.numel(); ++i) REQUIRE(clipped.pixels[i] == 1.0f);

  // 8-bit quantization changes each channel by at most 1/255
  for (std::int64_t i = 0; i < img.pixels.numel(); ++i) {
    const float q = data::dequantize8(data::quantize8(img.pixels[i]));
    REQUIRE(std::abs(q - img.pixels[i]) <= 1.0f / 255.0f);
  }
}

TEST_CASE("epsilon generalization: exact scaling relation") {
  PromptableSegModel<float> gen(gen_cfg(), 23);
  auto img = random_image(32, 7);
  auto prompt = block_prompt(32, 8, 24, 8, 24);

  SECTION("v=1: train and infer fields identical") {
    NoiseBudget b;
    b.train_scale = 1;
    auto r = eg_scaling_check(gen, img, prompt, b);
    REQUIRE(r.exact);
  }
  SECTION("v=4: train field is exactly one quarter of infer field") {
    NoiseBudget b;
    b.train_scale = 4;
    NoiseField t = generate_noise(gen, img, prompt, b, NoiseMode::train);
    NoiseField i = generate_noise(gen, img, prompt, b, NoiseMode::infer);
    for (std::int64_t k = 0; k < t.delta.numel(); ++k) REQUIRE(t.delta[k] * 4.0f == i.delta[k]);
  }
  SECTION("v in {2,3,5}: ratio exact in floating point") {
    for (int v : {2, 3, 5}) {
      NoiseBudget b;
      b.train_scale = v;
      auto r = eg_scaling_check(gen, img, prompt, b);
      REQUIRE(r.exact);
    }
  }
}

TEST_CASE("linearity in the budget") {
  PromptableSegModel<float> gen(gen_cfg(), 29);
  auto img = random_image(32, 8);
  auto prompt = block_prompt(32, 4, 12, 4, 12);
  NoiseBudget b1;  // 8/255, 2/255
  NoiseBudget b2;
  const float a = 2.5f;
  b2.eps_target = b1.eps_target * a;
  b2.eps_unrelated = b1.eps_unrelated * a;
  NoiseField f1 = generate_noise(gen, img, prompt, b1, NoiseMode::infer);
  NoiseField f2 = generate_noise(gen, img, prompt, b2, NoiseMode::infer);
  for (std::int64_t i = 0; i < f1.delta.numel(); ++i)
    REQUIRE(f2.delta[i] == Catch::Approx(a * f1.delta[i]).epsilon(1e-5).margin(1e-9));
}

TEST_CASE("budget validation") {
  NoiseBudget bad;
  bad.eps_unrelated = 0.5f;
  bad.eps_target = 0.1f;
  REQUIRE_THROWS_AS(bad.validate(), Error);
  NoiseBudget bad2;
  bad2.train_scale = 0;
  REQUIRE_THROWS_AS(bad2.validate(), Error);
}

TEST_CASE("gradient flows from loss through apply+generate into the noise tokens") {
  // double precision toy configuration, central finite differences
  SegModelConfig cfg;
  cfg.image_size = 8;
  cfg.embed_dim = 8;
  cfg.patch = 2;
  cfg.encoder_blocks = 1;
  cfg.decoder_blocks = 1;
  cfg.heads = 2;
  cfg.with_noise_tokens = true;
  PromptableSegModel<double> gen(cfg, 31);
  PromptableSegModel<double> surrogate([&] {
    SegModelConfig c = cfg;
    c.with_noise_tokens = false;
    return c;
  }(), 37);

  auto rng = substream(41, "img");
  Tensor<double> img = Tensor<double>::rand_uniform({8, 8, 3}, 0.15, 0.85, rng);
  data::MaskPrompt prompt;
  prompt.kind = data::PromptKind::mask;
  prompt.mask = Tensor<std::uint8_t>({8, 8});
  for (int y = 2; y < 6; ++y)
    for (int x = 2; x < 6; ++x) prompt.mask.at(y, x) = 1;
  Tensor<double> prompt_f({8, 8});
  for (std::int64_t i = 0; i < prompt_f.numel(); ++i) prompt_f[i] = prompt.mask[i];
  Tensor<std::uint8_t> target = prompt.mask;

  NoiseBudget budget;
  budget.train_scale = 2;

  auto run = [&](bool want_grads) {
    Tape<double> tp;
    auto x = tp.leaf(img);
    auto delta = generate_noise_var(tp, gen, x, prompt, budget, NoiseMode::train,
                                    want_grads ? model::TrainMode::noise_only : model::TrainMode::frozen);
    auto noised = clamp01(add(x, delta));
    auto out = surrogate.forward(tp, noised, prompt_f, model::TrainMode::frozen);
    auto loss = model::seg_loss(out.mask_logits, target, false);
    return std::pair<Tape<double>, Var<double>>(std::move(tp), loss);
  };

  Param<double>& tokens = gen.noise_token_param();
  std::vector<std::pair<Tensor<double>*, std::int64_t>> entries;
  for (std::int64_t i = 0; i < 5; ++i) entries.push_back({&tokens.value, (i * 7) % tokens.value.numel()});

  auto eval_loss = [&] {
    Tape<double> tp;
    auto x = tp.leaf(img);
    auto delta = generate_noise_var(tp, gen, x, prompt, budget, NoiseMode::train, model::TrainMode::frozen);
    auto noised = clamp01(add(x, delta));
    auto out = surrogate.forward(tp, noised, prompt_f, model::TrainMode::frozen);
    return tp.value(model::seg_loss(out.mask_logits, target, false))[0];
  };
  auto eval_grads = [&] {
    Tape<double> tp;
    auto x = tp.leaf(img);
    auto delta = generate_noise_var(tp, gen, x, prompt, budget, NoiseMode::train, model::TrainMode::noise_only);
    auto noised = clamp01(add(x, delta));
    auto out = surrogate.forward(tp, noised, prompt_f, model::TrainMode::frozen);
    auto loss = model::seg_loss(out.mask_logits, target, false);
    tp.backward(loss);
    Tensor<double> g;
    tp.for_each_param_grad([&](Param<double>& p, const Tensor<double>& grad) {
      if (&p == &tokens) g = grad;
    });
    REQUIRE(g.numel() == tokens.value.numel());
    std::vector<double> out_g;
    for (auto [tensor, idx] : entries) out_g.push_back(g[idx]);
    return out_g;
  };
  auto r = testutil::finite_diff_check(eval_loss, eval_grads, entries, 1e-5);
  INFO("max rel err " << r.max_rel_err);
  REQUIRE(r.max_rel_err < 1e-3);
}
