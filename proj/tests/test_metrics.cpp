#include <png.h>

#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "doctest.h"
#include "triplet/datagen.hpp"
#include "triplet/metrics.hpp"

using namespace triplet;
using namespace triplet::metrics;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, float lo = 0.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  for (auto& v : t.vec()) v = u(rng);
  return t;
}

// Canonical SSIM evaluated window by window with explicit 2D weights.
double ssim_reference(const Tensor& x, const Tensor& y) {
  const int n = 11;
  const double sigma = 1.5;
  double g[11][11], gs = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) gs += g[i][j] = std::exp(-((i - 5.0) * (i - 5.0) + (j - 5.0) * (j - 5.0)) / (2 * sigma * sigma));
  const double range = static_cast<double>(y.max()) - y.min();
  const double c1 = std::pow(0.01 * range, 2), c2 = std::pow(0.03 * range, 2);
  const std::int64_t h = x.dim(0), w = x.dim(1);
  double total = 0.0;
  int count = 0;
  for (std::int64_t r = 0; r + n <= h; ++r)
    for (std::int64_t c = 0; c + n <= w; ++c) {
      double mx = 0, my = 0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          const double wgt = g[i][j] / gs;
          mx += wgt * x[static_cast<std::size_t>((r + i) * w + c + j)];
          my += wgt * y[static_cast<std::size_t>((r + i) * w + c + j)];
        }
      double vx = 0, vy = 0, cxy = 0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          const double wgt = g[i][j] / gs;
          const double dx = x[static_cast<std::size_t>((r + i) * w + c + j)] - mx;
          const double dy = y[static_cast<std::size_t>((r + i) * w + c + j)] - my;
          vx += wgt * dx * dx;
          vy += wgt * dy * dy;
          cxy += wgt * dx * dy;
        }
      total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return total / count;
}

std::vector<unsigned char> read_png_gray(const std::filesystem::path& path, int& h, int& w) {
  FILE* fp = std::fopen(path.string().c_str(), "rb");
  REQUIRE(fp != nullptr);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  png_init_io(png, fp);
  png_read_info(png, info);
  w = static_cast<int>(png_get_image_width(png, info));
  h = static_cast<int>(png_get_image_height(png, info));
  REQUIRE(png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY);
  REQUIRE(png_get_bit_depth(png, info) == 8);
  std::vector<unsigned char> px(static_cast<std::size_t>(h * w));
  for (int r = 0; r < h; ++r) png_read_row(png, px.data() + static_cast<std::size_t>(r * w), nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return px;
}

}  // namespace

TEST_CASE("psnr: sentinel, closed form and formula oracle") {
  const Tensor y = random_tensor(Shape{8, 8, 4}, 1);
  CHECK(std::isinf(psnr(y, y)));
  CHECK(psnr(y, y) > 0);

  // y_max = 1, every error 0.1 -> MSE 0.01 -> 20 dB
  Tensor ref(Shape{10}, 0.5f), x(Shape{10});
  ref[3] = 1.0f;
  for (std::size_t i = 0; i < 10; ++i) x[i] = ref[i] + (i % 2 ? 0.1f : -0.1f);
  CHECK(psnr(x, ref) == doctest::Approx(20.0).epsilon(1e-5));

  const Tensor a = random_tensor(Shape{6, 7, 5}, 2), b = random_tensor(Shape{6, 7, 5}, 3);
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
  m /= static_cast<double>(a.numel());
  const double oracle = 10.0 * std::log10(double(b.max()) * b.max() / m);
  CHECK(std::fabs(psnr(a, b) - oracle) <= 1e-6);
  // the reference supplies the peak, so swapping arguments changes the value
  CHECK(psnr(a, b) != psnr(b, a));
  CHECK_THROWS_AS(psnr(a, Tensor(Shape{6, 7})), ShapeError);
}

TEST_CASE("rrmse: closed forms, oracle and zero-mean reference") {
  const Tensor y(Shape{5, 5}, 2.0f), x(Shape{5, 5}, 3.0f);
  CHECK(rrmse(x, y) == doctest::Approx(0.5));
  CHECK(rrmse(y, y) == 0.0);
  const Tensor a = random_tensor(Shape{40}, 4), b = random_tensor(Shape{40}, 5);
  double m = 0.0, mean = 0.0;
  for (std::size_t i = 0; i < 40; ++i) {
    m += (double(a[i]) - b[i]) * (double(a[i]) - b[i]) / 40.0;
    mean += b[i] / 40.0;
  }
  CHECK(std::fabs(rrmse(a, b) - std::sqrt(m) / mean) <= 1e-6);
  CHECK_THROWS_AS(rrmse(a, Tensor(Shape{40})), std::invalid_argument);
}

TEST_CASE("ssim: identity, inverted contrast, reference formula, window guard") {
  const Tensor y = random_tensor(Shape{16, 16}, 6);
  CHECK(ssim(y, y) == doctest::Approx(1.0).epsilon(1e-12));
  Tensor inv(y.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) inv[i] = 1.0f - y[i];
  CHECK(ssim(inv, y) < 1.0);

  const Tensor x = random_tensor(Shape{16, 16}, 7);
  Tensor blend(y.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) blend[i] = 0.7f * y[i] + 0.3f * x[i];
  CHECK(std::fabs(ssim(x, y) - ssim_reference(x, y)) <= 1e-4);
  CHECK(std::fabs(ssim(blend, y) - ssim_reference(blend, y)) <= 1e-4);
  CHECK(std::fabs(ssim(blend, y) - ssim(y, blend)) <= 0.05);

  // slice-wise average over the last axis
  Tensor vol(Shape{16, 16, 2}), ref(Shape{16, 16, 2});
  for (std::size_t i = 0; i < 256; ++i) {
    vol[2 * i] = blend[i];
    ref[2 * i] = y[i];
    vol[2 * i + 1] = y[i];
    ref[2 * i + 1] = y[i];
  }
  const double expect = 0.5 * (ssim(blend, y) + 1.0);
  CHECK(ssim(vol, ref) == doctest::Approx(expect).epsilon(1e-9));
  CHECK_THROWS_AS(ssim(Tensor(Shape{10, 16}), Tensor(Shape{10, 16})), std::invalid_argument);
}

TEST_CASE("diff map and mid-slice png pixel audit") {
  const Tensor a = random_tensor(Shape{8, 8, 4}, 8), b = random_tensor(Shape{8, 8, 4}, 9);
  CHECK(diff_map(a, a).abs_max() == 0.0f);
  float inf_norm = 0.0f;
  for (std::size_t i = 0; i < a.numel(); ++i) inf_norm = std::max(inf_norm, std::fabs(a[i] - b[i]));
  CHECK(diff_map(a, b).max() == inf_norm);
  CHECK_THROWS_AS(diff_map(a, Tensor(Shape{8, 8})), ShapeError);

  // step along columns: left half 0, right half 2
  Tensor step(Shape{6, 8, 4});
  for (std::int64_t r = 0; r < 6; ++r)
    for (std::int64_t c = 4; c < 8; ++c)
      for (std::int64_t s = 0; s < 4; ++s) step[static_cast<std::size_t>((r * 8 + c) * 4 + s)] = 2.0f;
  step[static_cast<std::size_t>((0 * 8 + 5) * 4 + 2)] = 1.0f;  // one mid-grey pixel in the axial slice
  const auto dir = std::filesystem::temp_directory_path() / "triplet_png_audit";
  std::filesystem::remove_all(dir);
  const auto files = write_mid_slices(step, dir, "step");
  int h = 0, w = 0;
  const auto axial = read_png_gray(files[0], h, w);
  CHECK(h == 6);
  CHECK(w == 8);
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 8; ++c) {
      const int expect = (r == 0 && c == 5) ? 128 : (c >= 4 ? 255 : 0);
      CHECK(axial[static_cast<std::size_t>(r * 8 + c)] == expect);
    }
  const auto coronal = read_png_gray(files[1], h, w);
  CHECK(h == 4);
  CHECK(w == 8);
  CHECK(coronal[0] == 0);
  CHECK(coronal[7] == 255);
  const auto sagittal = read_png_gray(files[2], h, w);
  CHECK(h == 4);
  CHECK(w == 6);
  for (auto v : sagittal) CHECK(v == 255);
  std::filesystem::remove_all(dir);
}

TEST_CASE("csv header is stable and inf is spelled out") {
  CHECK(csv_header() == "id,psnr,ssim,rrmse");
  std::ostringstream os;
  write_csv(os, {{"a", std::numeric_limits<double>::infinity(), 1.0, 0.0}, {"b", 20.0, 0.5, 0.25}});
  CHECK(os.str() == "id,psnr,ssim,rrmse\na,inf,1.000000,0.000000\nb,20.000000,0.500000,0.250000\n");
  const auto [m, s] = mean_std({{"f0", 10, 0.5, 0.1}, {"f1", 20, 0.7, 0.3}});
  CHECK(m.id == "mean");
  CHECK(m.psnr == doctest::Approx(15));
  CHECK(s.psnr == doctest::Approx(5));
  CHECK(s.ssim == doctest::Approx(0.1));
  CHECK(median({3, 1, 2}) == 2);
  CHECK(median({4, 1, 2, 3}) == 2.5);
}

TEST_CASE("simulated pairs: standard image beats its low-dose counterpart") {
  data::DatasetConfig cfg;
  cfg.n_phantoms = 3;
  cfg.patches_per_phantom = 3;
  cfg.folds = 1;
  const auto ds = data::build_dataset(cfg, 5);
  for (const auto& s : ds.samples) {
    CHECK(psnr(s.pair.i_std, s.pair.i_std) > psnr(s.pair.i_low, s.pair.i_std));
    const auto row = evaluate("x", s.pair.i_low, s.pair.i_std);
    CHECK(row.rrmse >= 0.0);
    CHECK((row.ssim > 0.0 && row.ssim < 1.0));
  }
}
