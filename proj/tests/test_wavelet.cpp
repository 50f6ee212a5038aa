#include <cmath>
#include <random>

#include "doctest.h"
#include "triplet/gradcheck.hpp"
#include "triplet/wavelet.hpp"

using namespace triplet;
using namespace triplet::wavelet;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (auto& v : t.vec()) v = n(rng);
  return t;
}

double energy(const Tensor& t) {
  double s = 0;
  for (float v : t.vec()) s += static_cast<double>(v) * v;
  return s;
}

// 8x8 Haar matrix as the Kronecker product h (x) h (x) h of the 2-point
// orthonormal Haar matrix; row = band (D,H,W bits), column = voxel (D,H,W bits).
std::array<std::array<double, 8>, 8> haar8() {
  const double r = 1.0 / std::sqrt(2.0);
  const double h[2][2] = {{r, r}, {r, -r}};
  std::array<std::array<double, 8>, 8> m{};
  for (int b = 0; b < 8; ++b)
    for (int t = 0; t < 8; ++t) m[b][t] = h[b >> 2][t >> 2] * h[(b >> 1) & 1][(t >> 1) & 1] * h[b & 1][t & 1];
  return m;
}

}  // namespace

TEST_CASE("constant volume: LLL band is 2*sqrt2*c, other bands vanish") {
  const float c = 1.5f;
  const auto set = dwt3(Tensor(Shape{1, 4, 4, 4}, c), 1);
  REQUIRE(set.bands.size() == 8);
  for (float v : set.bands[0].vec()) CHECK(v == doctest::Approx(2.0 * std::sqrt(2.0) * c));
  for (int b = 1; b < 8; ++b)
    for (float v : set.bands[static_cast<std::size_t>(b)].vec()) CHECK(std::fabs(v) <= 1e-6);
}

TEST_CASE("2x2x2 input 0..7 matches the 8-point Haar matrix") {
  Tensor x(Shape{1, 2, 2, 2});
  for (int i = 0; i < 8; ++i) x[static_cast<std::size_t>(i)] = static_cast<float>(i);
  const auto set = dwt3(x, 1);
  const auto m = haar8();
  for (int b = 0; b < 8; ++b) {
    double ref = 0;
    for (int t = 0; t < 8; ++t) ref += m[b][t] * t;
    CHECK(set.bands[static_cast<std::size_t>(b)][0] == doctest::Approx(ref).epsilon(1e-6));
  }
}

TEST_CASE("impulse in one band synthesizes the Haar basis element") {
  const auto m = haar8();
  for (int b = 1; b < 8; ++b) {
    SubbandSet set;
    set.level = 1;
    for (int k = 0; k < 8; ++k) set.bands.push_back(Tensor(Shape{1, 1, 1, 1}));
    set.bands[static_cast<std::size_t>(b)][0] = 1.0f;
    const Tensor v = idwt3(set);
    for (int t = 0; t < 8; ++t) CHECK(v[static_cast<std::size_t>(t)] == doctest::Approx(m[b][t]).epsilon(1e-6));
  }
}

TEST_CASE("perfect reconstruction and Parseval over levels") {
  for (int level = 1; level <= 4; ++level) {
    const std::int64_t n = std::int64_t{1} << level;
    const Tensor x = random_tensor(Shape{2, 2 * n, n, 3 * n}, static_cast<std::uint64_t>(level));
    const auto set = dwt3(x, level);
    CHECK(set.bands.size() == static_cast<std::size_t>(1) << (3 * level));
    for (const auto& b : set.bands) CHECK(b.shape() == Shape{2, 2, 1, 3});
    double e = 0;
    for (const auto& b : set.bands) e += energy(b);
    CHECK(std::fabs(e - energy(x)) / energy(x) <= 1e-4);
    const Tensor back = idwt3(set);
    REQUIRE(back.shape() == x.shape());
    double err = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) err = std::max(err, static_cast<double>(std::fabs(back[i] - x[i])));
    CHECK(err <= 1e-5);
  }
}

TEST_CASE("all-zero bands give a zero volume") {
  SubbandSet set;
  set.level = 2;
  for (int k = 0; k < 64; ++k) set.bands.push_back(Tensor(Shape{1, 1, 2, 1}));
  const Tensor v = idwt3(set);
  CHECK(v.abs_max() == 0.0f);
}

TEST_CASE("two-level packet order: the first level is the least significant digit") {
  const Tensor x = random_tensor(Shape{1, 4, 4, 4}, 9);
  const auto two = dwt3(x, 2);
  const auto one = dwt3(x, 1);
  // Apply the second level to every first-level band by hand.
  for (int b1 = 0; b1 < 8; ++b1) {
    const auto child = dwt3(one.bands[static_cast<std::size_t>(b1)], 1);
    for (int b2 = 0; b2 < 8; ++b2) {
      const auto& got = two.bands[static_cast<std::size_t>(b1 + 8 * b2)];
      CHECK(got.vec() == child.bands[static_cast<std::size_t>(b2)].vec());
    }
  }
}

TEST_CASE("transform errors") {
  CHECK_THROWS_AS(dwt3(Tensor(Shape{1, 3, 4, 4}), 1), ShapeError);
  CHECK_THROWS_AS(dwt3(Tensor(Shape{1, 4, 4, 4}), 3), ShapeError);
  SubbandSet bad;
  bad.level = 1;
  bad.bands.assign(7, Tensor(Shape{1, 1, 1, 1}));
  CHECK_THROWS(idwt3(bad));
}

TEST_CASE("linearity") {
  const Tensor a = random_tensor(Shape{1, 4, 4, 4}, 10);
  const Tensor b = random_tensor(Shape{1, 4, 4, 4}, 11);
  Tensor s(a.shape());
  for (std::size_t i = 0; i < s.numel(); ++i) s[i] = 2.0f * a[i] + b[i];
  const Tensor ta = dwt3(a, 2).to_tensor(), tb = dwt3(b, 2).to_tensor(), ts = dwt3(s, 2).to_tensor();
  for (std::size_t i = 0; i < ts.numel(); ++i) CHECK(ts[i] == doctest::Approx(2.0f * ta[i] + tb[i]).epsilon(1e-5));
}

TEST_CASE("batched level ops agree with dwt3 and invert each other") {
  const Tensor x = random_tensor(Shape{2, 3, 4, 2, 6}, 12);
  Tape tape(false);
  auto y = dwt_level(tape, make_var(x));
  REQUIRE(y->shape() == Shape{2, 24, 2, 1, 3});
  // Sample 1 of the batch against the unbatched transform.
  const Tensor s1 = dwt3(Tensor(Shape{3, 4, 2, 6}, std::vector<float>(x.vec().begin() + 3 * 48, x.vec().end())), 1)
                        .to_tensor();
  for (std::size_t i = 0; i < s1.numel(); ++i) CHECK(y->value[24 * 6 + i] == s1[i]);
  auto back = idwt_level(tape, y);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(std::fabs(back->value[i] - x[i]) <= 1e-5);

  auto bands = dwt_bands(tape, make_var(random_tensor(Shape{2, 1, 2, 2, 2}, 13)));
  CHECK(bands.size() == 8);
  CHECK(bands[3]->shape() == Shape{2, 1, 1, 1, 1});
}

TEST_CASE("level ops pass gradcheck") {
  const Tensor x = random_tensor(Shape{1, 2, 2, 4, 2}, 14);
  CHECK(grad_check([](Tape& t, const Var& v) { return dwt_level(t, v); }, x).passed);
  const Tensor c = random_tensor(Shape{1, 8, 1, 2, 1}, 15);
  CHECK(grad_check([](Tape& t, const Var& v) { return idwt_level(t, v); }, c).passed);
  const Tensor s = random_tensor(Shape{2, 1, 2, 2, 4}, 16);
  for (int b = 0; b < 8; ++b)
    CHECK(grad_check([b](Tape& t, const Var& v) { return dwt_bands(t, v)[static_cast<std::size_t>(b)]; }, s).passed);
}
