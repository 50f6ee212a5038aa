#include <cmath>
#include <random>

#include "doctest.h"
#include "triplet/gradcheck.hpp"
#include "triplet/ops.hpp"

using namespace triplet;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, float scale = 1.0f) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, scale);
  for (auto& v : t.vec()) v = n(rng);
  return t;
}

// Direct sextuple loop with zero padding.
Tensor conv_oracle(const Tensor& x, const Tensor& k, const Tensor& b, int stride, int pad) {
  const auto B = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const auto Co = k.dim(0), K = k.dim(2);
  const auto OD = (D + 2 * pad - K) / stride + 1, OH = (H + 2 * pad - K) / stride + 1,
             OW = (W + 2 * pad - K) / stride + 1;
  Tensor out(Shape{B, Co, OD, OH, OW});
  for (std::int64_t n = 0; n < B; ++n)
    for (std::int64_t o = 0; o < Co; ++o)
      for (std::int64_t z = 0; z < OD; ++z)
        for (std::int64_t y = 0; y < OH; ++y)
          for (std::int64_t xx = 0; xx < OW; ++xx) {
            double s = b.empty() ? 0.0 : b[static_cast<std::size_t>(o)];
            for (std::int64_t c = 0; c < C; ++c)
              for (std::int64_t i = 0; i < K; ++i)
                for (std::int64_t j = 0; j < K; ++j)
                  for (std::int64_t l = 0; l < K; ++l) {
                    const auto iz = z * stride - pad + i, iy = y * stride - pad + j, ix = xx * stride - pad + l;
                    if (iz < 0 || iz >= D || iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                    s += static_cast<double>(x.at(n, c, iz, iy, ix)) * k.at(o, c, i, j, l);
                  }
            out.at(n, o, z, y, xx) = static_cast<float>(s);
          }
  return out;
}

struct NormBuffers {
  Tensor mean = Tensor::zeros(Shape{2});
  Tensor var = Tensor::ones(Shape{2});
  Tensor seen = Tensor::zeros(Shape{1});
  ops::BatchNormStats stats() { return {&mean, &var, &seen}; }
};

}  // namespace

TEST_CASE("conv3: delta kernel is the identity") {
  const Tensor x = random_tensor(Shape{2, 1, 3, 4, 5}, 1);
  Tensor k(Shape{1, 1, 3, 3, 3});
  k.at(0, 0, 1, 1, 1) = 1.0f;
  Tape tape(false);
  auto y = ops::conv3(tape, make_var(x), make_var(k), make_var(Tensor::zeros(Shape{1})));
  CHECK(y->value.vec() == x.vec());
}

TEST_CASE("conv3: all-ones kernel on constant input gives 27 in the interior") {
  Tape tape(false);
  auto y = ops::conv3(tape, make_var(Tensor::ones(Shape{1, 1, 4, 4, 4})), make_var(Tensor::ones(Shape{1, 1, 3, 3, 3})),
                      nullptr);
  CHECK(y->value.at(0, 0, 1, 1, 1) == doctest::Approx(27.0));
  CHECK(y->value.at(0, 0, 0, 0, 0) == doctest::Approx(8.0));
}

TEST_CASE("conv3 matches the brute-force oracle") {
  const Tensor x = random_tensor(Shape{1, 1, 4, 4, 4}, 2);
  const Tensor k = random_tensor(Shape{1, 1, 3, 3, 3}, 3);
  const Tensor b = random_tensor(Shape{1}, 4);
  Tape tape(false);
  auto y = ops::conv3(tape, make_var(x), make_var(k), make_var(b));
  const Tensor ref = conv_oracle(x, k, b, 1, 1);
  for (std::size_t i = 0; i < ref.numel(); ++i) CHECK(std::fabs(y->value[i] - ref[i]) <= 1e-5);

  // Multi-channel, strided variant.
  const Tensor x2 = random_tensor(Shape{2, 3, 6, 5, 4}, 5);
  const Tensor k2 = random_tensor(Shape{4, 3, 4, 4, 4}, 6);
  auto y2 = ops::conv3d(tape, make_var(x2), make_var(k2), nullptr, 2, 1);
  const Tensor ref2 = conv_oracle(x2, k2, Tensor(), 2, 1);
  REQUIRE(y2->shape() == ref2.shape());
  for (std::size_t i = 0; i < ref2.numel(); ++i) CHECK(std::fabs(y2->value[i] - ref2[i]) <= 1e-4);
}

TEST_CASE("conv3 rejects channel mismatch with a shape error") {
  Tape tape(false);
  CHECK_THROWS_AS(ops::conv3(tape, make_var(Tensor(Shape{1, 2, 3, 3, 3})), make_var(Tensor(Shape{1, 3, 3, 3, 3})),
                             nullptr),
                  ShapeError);
}

TEST_CASE("conv3 gradients pass finite differences") {
  const Tensor x = random_tensor(Shape{1, 2, 3, 4, 3}, 7);
  const Tensor k = random_tensor(Shape{2, 2, 3, 3, 3}, 8, 0.3f);
  const Tensor b = random_tensor(Shape{2}, 9);
  auto wrt_input = grad_check(
      [&](Tape& t, const Var& v) { return ops::conv3(t, v, make_var(k), make_var(b)); }, x);
  CHECK(wrt_input.passed);
  auto wrt_kernel = grad_check(
      [&](Tape& t, const Var& v) { return ops::conv3(t, make_var(x), v, make_var(b)); }, k);
  CHECK(wrt_kernel.passed);
  auto wrt_bias = grad_check(
      [&](Tape& t, const Var& v) { return ops::conv3(t, make_var(x), make_var(k), v); }, b);
  CHECK(wrt_bias.passed);
}

TEST_CASE("batch_norm: constant input maps to zero") {
  NormBuffers nb;
  Tape tape(false);
  auto y = ops::batch_norm(tape, make_var(Tensor(Shape{2, 2, 2, 2, 2}, 3.0f)), make_var(Tensor::ones(Shape{2})),
                           make_var(Tensor::zeros(Shape{2})), nb.stats(), 1e-5f, 0.1f, ops::NormMode::Train);
  for (float v : y->value.vec()) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("batch_norm: train output is standardized per channel and stats update") {
  NormBuffers nb;
  Tape tape(false);
  const Tensor x = random_tensor(Shape{4, 2, 3, 3, 3}, 10, 2.0f);
  auto y = ops::batch_norm(tape, make_var(x), make_var(Tensor::ones(Shape{2})), make_var(Tensor::zeros(Shape{2})),
                           nb.stats(), 0.0f, 0.1f, ops::NormMode::Train);
  for (int c = 0; c < 2; ++c) {
    double s = 0, s2 = 0;
    int n = 0;
    for (int b = 0; b < 4; ++b)
      for (int i = 0; i < 27; ++i) {
        const double v = y->value[static_cast<std::size_t>((b * 2 + c) * 27 + i)];
        s += v;
        s2 += v * v;
        ++n;
      }
    CHECK(std::fabs(s / n) <= 1e-4);
    CHECK(std::fabs(s2 / n - 1.0) <= 1e-4);
  }
  CHECK(nb.seen[0] == 1.0f);
  CHECK(nb.mean[0] != 0.0f);
}

TEST_CASE("batch_norm: eval before training uses the initial statistics") {
  NormBuffers nb;
  Tape tape(false);
  const Tensor x = random_tensor(Shape{1, 2, 2, 2, 2}, 3);
  Var y = ops::batch_norm(tape, make_var(x), make_var(Tensor(Shape{2}, 2.0f)), make_var(Tensor(Shape{2}, 0.5f)),
                          nb.stats(), 1e-5f, 0.1f, ops::NormMode::Eval);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y->value[i] == doctest::Approx(2.0 * x[i] / std::sqrt(1.0 + 1e-5) + 0.5));
  CHECK(nb.seen[0] == 0.0f);
  CHECK_THROWS(ops::batch_norm(tape, make_var(x), make_var(Tensor::ones(Shape{2})), make_var(Tensor::zeros(Shape{2})),
                               {nullptr, nullptr, nullptr}, 1e-5f, 0.1f, ops::NormMode::Eval));
}

TEST_CASE("batch_norm gradients pass finite differences in both modes") {
  const Tensor x = random_tensor(Shape{2, 2, 2, 3, 2}, 11);
  const Tensor gamma = random_tensor(Shape{2}, 12);
  const Tensor beta = random_tensor(Shape{2}, 13);
  for (auto mode : {ops::NormMode::Train, ops::NormMode::Eval}) {
    auto f = [&](Tape& t, const Var& v) {
      NormBuffers nb;
      nb.seen[0] = 1.0f;
      nb.mean[1] = 0.3f;
      nb.var[0] = 2.0f;
      return ops::batch_norm(t, v, make_var(gamma), make_var(beta), nb.stats(), 1e-5f, 0.1f, mode);
    };
    CHECK(grad_check(f, x).passed);
    auto fg = [&](Tape& t, const Var& v) {
      NormBuffers nb;
      nb.seen[0] = 1.0f;
      return ops::batch_norm(t, make_var(x), v, make_var(beta), nb.stats(), 1e-5f, 0.1f, mode);
    };
    CHECK(grad_check(fg, gamma).passed);
  }
}

TEST_CASE("layer_norm examples") {
  Tape tape(false);
  auto zeros = ops::layer_norm(tape, make_var(Tensor(Shape{2, 4}, 5.0f)), make_var(Tensor::ones(Shape{4})),
                               make_var(Tensor::zeros(Shape{4})), 1e-5f);
  for (float v : zeros->value.vec()) CHECK(v == doctest::Approx(0.0));

  // Direct mean/variance oracle for [1,2,3].
  const std::vector<double> in{1.0, 2.0, 3.0};
  const double mu = (in[0] + in[1] + in[2]) / 3.0;
  double var = 0.0;
  for (double v : in) var += (v - mu) * (v - mu) / 3.0;
  auto y = ops::layer_norm(tape, make_var(Tensor(Shape{1, 3}, {1, 2, 3})), make_var(Tensor::ones(Shape{3})),
                           make_var(Tensor::zeros(Shape{3})), 0.0f);
  for (int i = 0; i < 3; ++i) CHECK(y->value[static_cast<std::size_t>(i)] == doctest::Approx((in[i] - mu) / std::sqrt(var)));
  CHECK(y->value[0] == doctest::Approx(-std::sqrt(1.5)));

  const Tensor beta(Shape{3}, {0.5f, -1.0f, 2.0f});
  auto g0 = ops::layer_norm(tape, make_var(random_tensor(Shape{4, 3}, 14)), make_var(Tensor::zeros(Shape{3})),
                            make_var(beta), 1e-5f);
  for (int r = 0; r < 4; ++r)
    for (int i = 0; i < 3; ++i) CHECK(g0->value[static_cast<std::size_t>(r * 3 + i)] == beta[static_cast<std::size_t>(i)]);
}

TEST_CASE("layer_norm over the channel axis of a feature map passes gradcheck") {
  const Tensor x = random_tensor(Shape{2, 4, 2, 2, 3}, 15);
  const Tensor gamma = random_tensor(Shape{4}, 16);
  const Tensor beta = random_tensor(Shape{4}, 17);
  auto f = [&](Tape& t, const Var& v) { return ops::layer_norm(t, v, make_var(gamma), make_var(beta), 1e-5f, 1); };
  CHECK(grad_check(f, x).passed);
  auto fg = [&](Tape& t, const Var& v) { return ops::layer_norm(t, make_var(x), v, make_var(beta), 1e-5f, 1); };
  CHECK(grad_check(fg, gamma).passed);
}

TEST_CASE("elementwise primitives pass gradcheck away from kinks") {
  Tensor x = random_tensor(Shape{3, 5}, 18);
  for (auto& v : x.vec()) {
    if (std::fabs(v) < 0.05f) v = 0.2f;  // stay away from the ReLU kink
  }
  const Tensor y = random_tensor(Shape{3, 5}, 19);
  CHECK(grad_check([](Tape& t, const Var& v) { return ops::relu(t, v); }, x).passed);
  CHECK(grad_check([](Tape& t, const Var& v) { return ops::leaky_relu(t, v, 0.2f); }, x).passed);
  CHECK(grad_check([](Tape& t, const Var& v) { return ops::sigmoid(t, v); }, x).passed);
  CHECK(grad_check([](Tape& t, const Var& v) { return ops::gelu(t, v); }, x).passed);
  CHECK(grad_check([](Tape& t, const Var& v) { return ops::square(t, v); }, x).passed);
  CHECK(grad_check([&](Tape& t, const Var& v) { return ops::mul(t, v, make_var(y)); }, x).passed);
  CHECK(grad_check([&](Tape& t, const Var& v) { return ops::sub(t, make_var(y), v); }, x).passed);
  CHECK(grad_check([&](Tape& t, const Var& v) { return ops::mse(t, v, make_var(y)); }, x).passed);
  CHECK(grad_check([&](Tape& t, const Var& v) { return ops::mean(t, v); }, x).passed);
}

TEST_CASE("structural primitives pass gradcheck") {
  const Tensor x = random_tensor(Shape{1, 2, 2, 3, 2}, 20);
  const Tensor other = random_tensor(Shape{1, 1, 2, 3, 2}, 21);
  CHECK(grad_check([](Tape& t, const Var& v) { return ops::upsample_nearest2(t, v); }, x).passed);
  CHECK(grad_check([&](Tape& t, const Var& v) { return ops::concat_channels(t, v, make_var(other)); }, x).passed);
  CHECK(grad_check([](Tape& t, const Var& v) { return ops::pad_or_crop(t, v, {4, 4, 4}); }, x).passed);
  CHECK(grad_check([](Tape& t, const Var& v) { return ops::pad_or_crop(t, v, {1, 2, 2}); }, x).passed);
  const Tensor w = random_tensor(Shape{3, 2}, 22);
  const Tensor b = random_tensor(Shape{3}, 23);
  CHECK(grad_check([&](Tape& t, const Var& v) { return ops::pointwise_linear(t, v, make_var(w), make_var(b)); }, x)
            .passed);
  CHECK(grad_check([&](Tape& t, const Var& v) { return ops::pointwise_linear(t, make_var(x), v, make_var(b)); }, w)
            .passed);
}

TEST_CASE("composite conv3 -> ReLU -> MSE gradient matches finite differences") {
  const Tensor x = random_tensor(Shape{1, 1, 4, 4, 4}, 24);
  const Tensor target = random_tensor(Shape{1, 2, 4, 4, 4}, 25);
  const Tensor b = random_tensor(Shape{2}, 26, 0.1f);
  const Tensor k = random_tensor(Shape{2, 1, 3, 3, 3}, 27, 0.4f);
  auto f = [&](Tape& t, const Var& v) {
    return ops::mse(t, ops::relu(t, ops::conv3(t, make_var(x), v, make_var(b))), make_var(target));
  };
  const auto rep = grad_check(f, k);
  CHECK(rep.passed);
  CHECK(rep.max_rel_error <= 1e-3);
}

TEST_CASE("grad_check reference cases") {
  const Tensor x = random_tensor(Shape{6}, 28);
  const auto sum_rep = grad_check([](Tape& t, const Var& v) { return ops::sum(t, v); }, x);
  CHECK(sum_rep.passed);
  for (double a : sum_rep.analytic) CHECK(a == 1.0);
  CHECK(sum_rep.max_rel_error <= 1e-6);

  const auto sin_rep = grad_check([](Tape& t, const Var& v) { return ops::sum(t, ops::sin(t, v)); }, x,
                                  GradCheckOptions{1e-3, 1e-4});
  CHECK(sin_rep.passed);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(sin_rep.analytic[i] == doctest::Approx(std::cos(x[i])).epsilon(1e-5));

  // ReLU at exactly 0 is flagged and excluded.
  Tensor k(Shape{3}, {0.0f, 1.0f, -2.0f});
  const auto relu_rep = grad_check([](Tape& t, const Var& v) { return ops::sum(t, ops::relu(t, v)); }, k);
  CHECK(relu_rep.kink[0]);
  CHECK_FALSE(relu_rep.kink[1]);
  CHECK(relu_rep.kinks == 1);
  CHECK(relu_rep.passed);
}

TEST_CASE("forward passes are bit-deterministic") {
  const Tensor x = random_tensor(Shape{2, 2, 4, 4, 4}, 29);
  const Tensor k = random_tensor(Shape{3, 2, 3, 3, 3}, 30);
  Tape t1(false), t2(false);
  auto a = ops::gelu(t1, ops::conv3(t1, make_var(x), make_var(k), nullptr));
  auto b = ops::gelu(t2, ops::conv3(t2, make_var(x), make_var(k), nullptr));
  CHECK(a->value.vec() == b->value.vec());
}
