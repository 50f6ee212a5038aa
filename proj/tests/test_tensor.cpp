#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "triplet/autograd.hpp"
#include "triplet/ops.hpp"
#include "triplet/tensor.hpp"

using namespace triplet;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("triplet_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (auto& v : t.vec()) v = n(rng);
  return t;
}

}  // namespace

TEST_CASE("tensor shape invariants") {
  Tensor t(Shape{2, 3, 4});
  CHECK(t.numel() == 24);
  CHECK(t.dim(2) == 4);
  CHECK_THROWS_AS(t.dim(3), ShapeError);
  CHECK_THROWS_AS(Tensor(Shape{2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<float>(3)), ShapeError);
  CHECK_THROWS_AS(t.reshaped(Shape{5, 5}), ShapeError);
  CHECK(t.reshaped(Shape{6, 4}).shape() == Shape{6, 4});
}

TEST_CASE("TNSR layout is bit-exact and round-trips") {
  const auto dir = temp_dir("tnsr");
  Tensor t(Shape{2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6.5f});
  save_tnsr(t, dir / "a.tnsr");

  std::ifstream in(dir / "a.tnsr", std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), {});
  REQUIRE(bytes.size() == 4 + 1 + 1 + 2 * 8 + 6 * 4);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "TNSR");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 2);
  CHECK(bytes[6] == 2);
  for (int i = 7; i < 14; ++i) CHECK(bytes[i] == 0);
  CHECK(bytes[14] == 3);
  float last = 0;
  std::memcpy(&last, bytes.data() + bytes.size() - 4, 4);
  CHECK(last == 6.5f);

  const Tensor back = load_tnsr(dir / "a.tnsr");
  CHECK(back.shape() == t.shape());
  CHECK(back.vec() == t.vec());

  std::ofstream(dir / "bad.tnsr") << "NOPE";
  CHECK_THROWS(load_tnsr(dir / "bad.tnsr"));
}

TEST_CASE("backward of sum(x^2)/2 gives x") {
  Tape tape;
  const Tensor xv = random_tensor(Shape{3, 4}, 1);
  auto x = make_var(xv, true);
  auto loss = ops::scale(tape, ops::sum(tape, ops::square(tape, x)), 0.5f);
  tape.backward(loss);
  REQUIRE(x->has_grad());
  for (std::size_t i = 0; i < xv.numel(); ++i) CHECK(x->grad[i] == doctest::Approx(xv[i]).epsilon(1e-6));
  CHECK(tape.size() == 0);
}

TEST_CASE("backward of a constant loss leaves zero grads") {
  Tape tape;
  auto x = make_var(random_tensor(Shape{4}, 2), true);
  auto c = make_var(Tensor::scalar(3.0f), false);
  auto loss = ops::scale(tape, c, 2.0f);
  tape.backward(loss);
  CHECK_FALSE(x->has_grad());
}

TEST_CASE("backward rejects non-scalar loss") {
  Tape tape;
  auto x = make_var(random_tensor(Shape{4}, 3), true);
  auto y = ops::square(tape, x);
  CHECK_THROWS_AS(tape.backward(y), ShapeError);
}

TEST_CASE("shared subexpressions accumulate gradient") {
  Tape tape;
  auto x = make_var(Tensor(Shape{1}, 3.0f), true);
  auto y = ops::mul(tape, x, x);
  auto loss = ops::sum(tape, ops::add(tape, y, x));
  tape.backward(loss);
  CHECK(x->grad[0] == doctest::Approx(7.0));
}

TEST_CASE("Tape::gradient isolates one leaf and leaves grads clear") {
  Tape tape;
  auto a = make_var(Tensor(Shape{2}, 2.0f), true);
  auto b = make_var(Tensor(Shape{2}, 5.0f), true);
  auto loss = ops::sum(tape, ops::mul(tape, a, b));
  const Tensor ga = tape.gradient(loss, a);
  CHECK(ga[0] == doctest::Approx(5.0));
  CHECK_FALSE(a->has_grad());
  CHECK_FALSE(b->has_grad());
  CHECK(tape.size() > 0);
  tape.backward(loss);
  CHECK(b->grad[1] == doctest::Approx(2.0));
}

TEST_CASE("Adam with zero gradient leaves parameters unchanged") {
  ParamGroup g("net");
  auto w = g.add("w", random_tensor(Shape{5}, 4));
  const auto before = g.hash();
  w->grad_buffer();  // explicit zeros
  g.adam_step(AdamConfig{});
  CHECK(g.hash() == before);
  CHECK(g.first_moment("w").shape() == w->shape());
  CHECK(g.second_moment("w").shape() == w->shape());
}

TEST_CASE("Adam moves against the gradient; frozen groups never move") {
  ParamGroup g("net");
  auto w = g.add("w", Tensor(Shape{3}, 1.0f));
  w->grad_buffer().fill(1.0f);
  g.adam_step(AdamConfig{0.1f});
  for (std::size_t i = 0; i < 3; ++i) CHECK(w->value[i] == doctest::Approx(0.9).epsilon(1e-5));

  ParamGroup f("frozen");
  auto v = f.add("v", Tensor(Shape{3}, 1.0f));
  f.set_frozen(true);
  CHECK_FALSE(v->requires_grad);
  const auto h = f.hash();
  v->grad_buffer().fill(1.0f);
  f.adam_step(AdamConfig{0.1f});
  CHECK(f.hash() == h);
}

TEST_CASE("param group checkpoint round-trip") {
  const auto dir = temp_dir("params");
  ParamGroup g("net");
  g.add("conv/w", random_tensor(Shape{2, 3}, 5));
  g.set_buffer("bn/mean", random_tensor(Shape{3}, 6));
  save_param_group(g, dir);
  CHECK(std::filesystem::exists(dir / "manifest.json"));

  ParamGroup h("net");
  h.add("conv/w", Tensor(Shape{2, 3}));
  load_param_group(h, dir);
  CHECK(h.hash() == g.hash());

  ParamGroup wrong("net");
  wrong.add("conv/w", Tensor(Shape{3, 2}));
  CHECK_THROWS_AS(load_param_group(wrong, dir), ShapeError);
}
