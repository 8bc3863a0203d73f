#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "unseg/core/optim.hpp"
#include "unseg/core/parallel.hpp"
#include "unseg/core/rng.hpp"
#include "unseg/core/tape.hpp"

using namespace unseg;

namespace {

// Generic harness: builds the graph via `build`, checks d(loss)/d(entries of
// every listed tensor) against central differences in double precision.
void check_op(const std::function<Var<double>(Tape<double>&, std::vector<Param<double>*>&)>& build,
              std::vector<Param<double>*> params, double tol = 1e-6) {
  auto eval_loss = [&] {
    Tape<double> tp;
    auto ps = params;
    return tp.value(build(tp, ps))[0];
  };
  std::vector<std::pair<Tensor<double>*, std::int64_t>> entries;
  for (auto* p : params)
    for (std::int64_t i = 0; i < p->value.numel(); ++i) entries.push_back({&p->value, i});
  auto eval_grads = [&] {
    Tape<double> tp;
    auto ps = params;
    Var<double> loss = build(tp, ps);
    tp.backward(loss);
    std::vector<double> out;
    std::vector<Tensor<double>> grads(params.size());
    tp.for_each_param_grad([&](Param<double>& p, const Tensor<double>& g) {
      for (std::size_t k = 0; k < params.size(); ++k)
        if (params[k] == &p) grads[k] = g;
    });
    for (std::size_t k = 0; k < params.size(); ++k) {
      REQUIRE(grads[k].numel() == params[k]->value.numel());
      for (std::int64_t i = 0; i < grads[k].numel(); ++i) out.push_back(grads[k][i]);
    }
    return out;
  };
  auto r = testutil::finite_diff_check(eval_loss, eval_grads, entries);
  INFO("max rel err = " << r.max_rel_err << ", max abs err = " << r.max_abs_err);
  REQUIRE((r.max_rel_err < tol || r.max_abs_err < tol));
}

Param<double> make_param(const std::string& name, std::vector<std::int64_t> dims, std::uint64_t seed,
                         double stddev = 1.0) {
  auto rng = substream(seed, name);
  return Param<double>(name, Tensor<double>::randn(std::move(dims), stddev, rng));
}

}  // namespace

TEST_CASE("elementwise ops gradients") {
  auto a = make_param("a", {3, 4}, 1);
  auto b = make_param("b", {3, 4}, 2);
  check_op(
      [](Tape<double>& tp, std::vector<Param<double>*>& ps) {
        auto va = tp.param(*ps[0]), vb = tp.param(*ps[1]);
        return mean_all(mul(add(va, vb), sub(va, vb)));
      },
      {&a, &b});
  check_op(
      [](Tape<double>& tp, std::vector<Param<double>*>& ps) {
        auto va = tp.param(*ps[0]);
        return mean_all(scale(mul(va, va), 0.5));
      },
      {&a});
}

TEST_CASE("activation gradients") {
  auto a = make_param("a", {4, 5}, 3, 0.8);
  for (auto act : {0, 1, 2, 3}) {
    check_op(
        [act](Tape<double>& tp, std::vector<Param<double>*>& ps) {
          auto v = tp.param(*ps[0]);
          Var<double> y;
          switch (act) {
            case 0: y = relu(v); break;
            case 1: y = gelu(v); break;
            case 2: y = tanh_open(v); break;
            default: y = sigmoid(v); break;
          }
          return mean_all(mul(y, y));
        },
        {&a}, 1e-5);
  }
}

TEST_CASE("clamp01 passes gradient only inside the interval") {
  Tape<double> tp;
  Tensor<double> x({4}, std::vector<double>{-0.5, 0.25, 0.75, 1.5});
  auto v = tp.leaf(x, true);
  auto y = clamp01(v);
  REQUIRE(tp.value(y)[0] == 0.0);
  REQUIRE(tp.value(y)[3] == 1.0);
  auto loss = mean_all(y);
  tp.backward(loss);
  const auto& g = tp.grad(v);
  REQUIRE(g[0] == 0.0);
  REQUIRE(g[1] == Catch::Approx(0.25));
  REQUIRE(g[2] == Catch::Approx(0.25));
  REQUIRE(g[3] == 0.0);
}

TEST_CASE("matmul/transpose/bias gradients") {
  auto a = make_param("a", {3, 4}, 4, 0.5);
  auto b = make_param("b", {4, 2}, 5, 0.5);
  auto c = make_param("c", {2}, 6, 0.5);
  check_op(
      [](Tape<double>& tp, std::vector<Param<double>*>& ps) {
        auto va = tp.param(*ps[0]), vb = tp.param(*ps[1]), vc = tp.param(*ps[2]);
        auto y = add_bias(matmul(va, vb), vc);
        return mean_all(mul(y, transpose(transpose(y))));
      },
      {&a, &b, &c});
}

TEST_CASE("slice/concat gradients") {
  auto a = make_param("a", {4, 6}, 7, 0.5);
  check_op(
      [](Tape<double>& tp, std::vector<Param<double>*>& ps) {
        auto v = tp.param(*ps[0]);
        auto top = slice_rows(v, 0, 2);
        auto bottom = slice_rows(v, 2, 4);
        auto joined = concat_rows<double>({bottom, top});
        auto left = slice_cols(joined, 0, 3);
        auto right = slice_cols(joined, 3, 6);
        auto swapped = concat_cols<double>({right, left});
        return mean_all(mul(swapped, swapped));
      },
      {&a});
}

TEST_CASE("layernorm gradients") {
  auto x = make_param("x", {5, 8}, 8);
  auto g = make_param("g", {8}, 9, 0.3);
  auto b = make_param("b", {8}, 10, 0.3);
  check_op(
      [](Tape<double>& tp, std::vector<Param<double>*>& ps) {
        auto vx = tp.param(*ps[0]), vg = tp.param(*ps[1]), vb = tp.param(*ps[2]);
        auto y = layernorm(vx, vg, vb);
        return mean_all(mul(y, y));
      },
      {&x, &g, &b}, 1e-5);
}

TEST_CASE("softmax gradients") {
  auto x = make_param("x", {4, 6}, 11);
  auto w = make_param("w", {4, 6}, 12, 0.4);
  check_op(
      [](Tape<double>& tp, std::vector<Param<double>*>& ps) {
        auto vx = tp.param(*ps[0]), vw = tp.param(*ps[1]);
        return mean_all(mul(softmax_rows(vx), vw));
      },
      {&x, &w}, 1e-5);
}

TEST_CASE("conv2d gradients, stride and dilation") {
  struct CaseSpec {
    ConvSpec s;
    std::int64_t h, w, ci, co;
  };
  std::vector<CaseSpec> cases = {
      {ConvSpec::same3x3(1), 5, 6, 2, 3},
      {ConvSpec::same3x3(2), 7, 7, 2, 2},
      {ConvSpec::strided3x3(2), 6, 6, 2, 3},
      {ConvSpec::patchify(2), 6, 6, 3, 4},
      {ConvSpec::k1x1(), 4, 4, 3, 2},
  };
  int idx = 0;
  for (const auto& cs : cases) {
    auto x = make_param("x" + std::to_string(idx), {cs.h, cs.w, cs.ci}, 13 + static_cast<std::uint64_t>(idx), 0.5);
    auto w = make_param("w" + std::to_string(idx),
                        {static_cast<std::int64_t>(cs.s.kh) * cs.s.kw * cs.ci, cs.co},
                        50 + static_cast<std::uint64_t>(idx), 0.5);
    auto b = make_param("b" + std::to_string(idx), {cs.co}, 90 + static_cast<std::uint64_t>(idx), 0.5);
    check_op(
        [spec = cs.s](Tape<double>& tp, std::vector<Param<double>*>& ps) {
          auto vx = tp.param(*ps[0]), vw = tp.param(*ps[1]), vb = tp.param(*ps[2]);
          auto y = conv2d(vx, vw, vb, spec);
          return mean_all(mul(y, y));
        },
        {&x, &w, &b}, 1e-5);
    ++idx;
  }
}

TEST_CASE("pooling and upsampling gradients") {
  auto x = make_param("x", {4, 4, 3}, 21, 0.5);
  check_op(
      [](Tape<double>& tp, std::vector<Param<double>*>& ps) {
        auto v = tp.param(*ps[0]);
        auto y = avgpool2d(v, 2);
        return mean_all(mul(y, y));
      },
      {&x});
  check_op(
      [](Tape<double>& tp, std::vector<Param<double>*>& ps) {
        auto v = tp.param(*ps[0]);
        auto y = upsample_bilinear(v, 2);
        return mean_all(mul(y, y));
      },
      {&x});
}

TEST_CASE("loss gradients") {
  auto z = make_param("z", {3, 4}, 22);
  Tensor<double> target({3, 4});
  {
    auto rng = substream(23, "target");
    std::bernoulli_distribution coin(0.5);
    for (auto& t : target.v) t = coin(rng) ? 1.0 : 0.0;
  }
  check_op(
      [&target](Tape<double>& tp, std::vector<Param<double>*>& ps) {
        return bce_with_logits_mean(tp.param(*ps[0]), target);
      },
      {&z}, 1e-5);

  Tensor<std::int32_t> labels({3});
  labels[0] = 0;
  labels[1] = 2;
  labels[2] = 3;
  check_op(
      [&labels](Tape<double>& tp, std::vector<Param<double>*>& ps) {
        return softmax_xent_mean(tp.param(*ps[0]), labels);
      },
      {&z}, 1e-5);
}

TEST_CASE("bce analytic values") {
  Tape<double> tp;
  Tensor<double> z({2, 2}, 0.0);
  Tensor<double> t({2, 2}, 1.0);
  auto v = tp.leaf(z);
  REQUIRE(tp.value(bce_with_logits_mean(v, t))[0] == Catch::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("tanh_open stays strictly inside (-1, 1)") {
  for (float x : {5.f, 9.f, 20.f, 100.f}) {
    REQUIRE(tanh_open_scalar(x) < 1.0f);
    REQUIRE(tanh_open_scalar(-x) > -1.0f);
  }
  REQUIRE(tanh_open_scalar(0.0f) == 0.0f);
}

TEST_CASE("adam minimizes a quadratic") {
  Param<float> p("p", Tensor<float>({4}, 2.0f));
  ParamRegistry<float> reg;
  reg.add(p);
  Adam<float> opt(reg, 0.05f);
  for (int i = 0; i < 400; ++i) {
    GradBuffer<float> g(reg);
    Tape<float> tp;
    auto v = tp.param(p);
    auto loss = mean_all(mul(v, v));
    tp.backward(loss);
    g.accumulate_from(tp, 1.0f);
    opt.step(reg, g);
  }
  REQUIRE(p.value.max_abs() < 1e-2f);
}

TEST_CASE("batch gradients are invariant to worker count") {
  Param<float> w("w", Tensor<float>({8, 4}));
  {
    auto rng = substream(7, "w");
    w.value = Tensor<float>::randn({8, 4}, 0.5f, rng);
  }
  ParamRegistry<float> reg;
  reg.add(w);

  std::vector<Tensor<float>> xs;
  auto rng = substream(8, "xs");
  for (int i = 0; i < 7; ++i) xs.push_back(Tensor<float>::rand_uniform({1, 8}, -1.f, 1.f, rng));

  auto forward = [&](Tape<float>& tp, std::int64_t i) {
    auto vw = tp.param(w);
    auto x = tp.leaf(xs[static_cast<std::size_t>(i)]);
    auto y = matmul(x, vw);
    return mean_all(mul(y, y));
  };

  std::vector<std::int64_t> samples{0, 1, 2, 3, 4, 5, 6};
  auto r1 = batch_grads<float>(reg, samples, 1, forward);
  auto r4 = batch_grads<float>(reg, samples, 4, forward);
  REQUIRE(r1.mean_loss == r4.mean_loss);
  for (std::size_t i = 0; i < r1.grads.slots.size(); ++i)
    for (std::int64_t j = 0; j < r1.grads.slots[i].numel(); ++j)
      REQUIRE(r1.grads.slots[i][j] == r4.grads.slots[i][j]);
}

TEST_CASE("substream determinism and independence") {
  auto a1 = substream(42, "alpha");
  auto a2 = substream(42, "alpha");
  auto b = substream(42, "beta");
  REQUIRE(a1() == a2());
  REQUIRE(a1() != b());
}
