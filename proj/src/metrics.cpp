#include "triplet/metrics.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace triplet::metrics {

namespace {

double mse(const Tensor& x, const Tensor& y) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double d = static_cast<double>(x[i]) - y[i];
    s += d * d;
  }
  return s / static_cast<double>(x.numel());
}

void check_pair(const Tensor& x, const Tensor& ref, const char* what) {
  require_same_shape(x, ref, what);
  if (x.empty()) throw std::invalid_argument(std::string(what) + ": empty input");
}

// "valid" separable filtering of a [h,w] plane
std::vector<double> filter_valid(const std::vector<double>& img, std::int64_t h, std::int64_t w,
                                 const std::vector<double>& k) {
  const auto n = static_cast<std::int64_t>(k.size());
  const std::int64_t oh = h - n + 1, ow = w - n + 1;
  std::vector<double> rows(static_cast<std::size_t>(h * ow));
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < ow; ++c) {
      double a = 0.0;
      for (std::int64_t t = 0; t < n; ++t) a += k[static_cast<std::size_t>(t)] * img[static_cast<std::size_t>(r * w + c + t)];
      rows[static_cast<std::size_t>(r * ow + c)] = a;
    }
  std::vector<double> out(static_cast<std::size_t>(oh * ow));
  for (std::int64_t r = 0; r < oh; ++r)
    for (std::int64_t c = 0; c < ow; ++c) {
      double a = 0.0;
      for (std::int64_t t = 0; t < n; ++t) a += k[static_cast<std::size_t>(t)] * rows[static_cast<std::size_t>((r + t) * ow + c)];
      out[static_cast<std::size_t>(r * ow + c)] = a;
    }
  return out;
}

}  // namespace

double psnr(const Tensor& x, const Tensor& ref) {
  check_pair(x, ref, "psnr");
  const double m = mse(x, ref);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(static_cast<double>(ref.max()) / std::sqrt(m));
}

double rrmse(const Tensor& x, const Tensor& ref) {
  check_pair(x, ref, "rrmse");
  const double mean = ref.mean();
  if (mean == 0.0) throw std::invalid_argument("rrmse: reference mean is zero");
  return std::sqrt(mse(x, ref)) / mean;
}

double ssim(const Tensor& x, const Tensor& ref, const SsimOptions& opt) {
  check_pair(x, ref, "ssim");
  if (x.rank() != 2 && x.rank() != 3) throw ShapeError("ssim: expected [H,W] or [H,W,Z], got " + shape_str(x.shape()));
  const std::int64_t h = x.dim(0), w = x.dim(1), z = x.rank() == 3 ? x.dim(2) : 1;
  if (h < opt.window || w < opt.window) {
    throw std::invalid_argument("ssim: slice " + std::to_string(h) + "x" + std::to_string(w) + " is smaller than the " +
                                std::to_string(opt.window) + "-pixel window");
  }
  std::vector<double> k(static_cast<std::size_t>(opt.window));
  double ks = 0.0;
  const double c0 = (opt.window - 1) / 2.0;
  for (int t = 0; t < opt.window; ++t) ks += k[static_cast<std::size_t>(t)] = std::exp(-0.5 * (t - c0) * (t - c0) / (opt.sigma * opt.sigma));
  for (auto& v : k) v /= ks;

  double range = static_cast<double>(ref.max()) - ref.min();
  if (range <= 0.0) range = 1.0;
  const double c1 = (opt.k1 * range) * (opt.k1 * range), c2 = (opt.k2 * range) * (opt.k2 * range);

  const auto plane = static_cast<std::size_t>(h * w);
  std::vector<double> a(plane), b(plane), aa(plane), bb(plane), ab(plane);
  double total = 0.0;
  for (std::int64_t s = 0; s < z; ++s) {
    for (std::size_t i = 0; i < plane; ++i) {
      const double u = x[i * static_cast<std::size_t>(z) + static_cast<std::size_t>(s)];
      const double v = ref[i * static_cast<std::size_t>(z) + static_cast<std::size_t>(s)];
      a[i] = u;
      b[i] = v;
      aa[i] = u * u;
      bb[i] = v * v;
      ab[i] = u * v;
    }
    const auto mu_a = filter_valid(a, h, w, k), mu_b = filter_valid(b, h, w, k);
    const auto s_aa = filter_valid(aa, h, w, k), s_bb = filter_valid(bb, h, w, k), s_ab = filter_valid(ab, h, w, k);
    double acc = 0.0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
      const double va = s_aa[i] - mu_a[i] * mu_a[i];
      const double vb = s_bb[i] - mu_b[i] * mu_b[i];
      const double cov = s_ab[i] - mu_a[i] * mu_b[i];
      acc += ((2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2)) /
             ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
    }
    total += acc / static_cast<double>(mu_a.size());
  }
  return total / static_cast<double>(z);
}

Tensor diff_map(const Tensor& x, const Tensor& y) {
  require_same_shape(x, y, "diff_map");
  Tensor d(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) d[i] = std::fabs(x[i] - y[i]);
  return d;
}

void write_png(const Tensor& image, const std::filesystem::path& path, float lo, float hi) {
  if (image.rank() != 2) throw ShapeError("write_png: expected [H,W], got " + shape_str(image.shape()));
  const auto h = static_cast<png_uint_32>(image.dim(0)), w = static_cast<png_uint_32>(image.dim(1));
  std::vector<png_byte> px(static_cast<std::size_t>(h) * w);
  const double span = hi > lo ? static_cast<double>(hi) - lo : 1.0;
  for (std::size_t i = 0; i < px.size(); ++i) {
    const double t = std::clamp((static_cast<double>(image[i]) - lo) / span, 0.0, 1.0);
    px[i] = static_cast<png_byte>(std::lround(255.0 * t));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw std::runtime_error("write_png: cannot open " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("write_png: libpng failure writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (png_uint_32 r = 0; r < h; ++r) png_write_row(png, px.data() + static_cast<std::size_t>(r) * w);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

std::vector<std::filesystem::path> write_mid_slices(const Tensor& volume, const std::filesystem::path& dir,
                                                    const std::string& prefix, float hi) {
  if (volume.rank() != 3) throw ShapeError("write_mid_slices: expected [N,N,Z], got " + shape_str(volume.shape()));
  const std::int64_t n0 = volume.dim(0), n1 = volume.dim(1), n2 = volume.dim(2);
  const float top = hi > 0.0f ? hi : std::max(volume.max(), 1e-12f);
  auto at = [&](std::int64_t r, std::int64_t c, std::int64_t s) {
    return volume[static_cast<std::size_t>((r * n1 + c) * n2 + s)];
  };
  Tensor axial(Shape{n0, n1}), coronal(Shape{n2, n1}), sagittal(Shape{n2, n0});
  for (std::int64_t r = 0; r < n0; ++r)
    for (std::int64_t c = 0; c < n1; ++c) axial[static_cast<std::size_t>(r * n1 + c)] = at(r, c, n2 / 2);
  // slice index runs top to bottom in the side views
  for (std::int64_t s = 0; s < n2; ++s) {
    for (std::int64_t c = 0; c < n1; ++c) coronal[static_cast<std::size_t>(s * n1 + c)] = at(n0 / 2, c, n2 - 1 - s);
    for (std::int64_t r = 0; r < n0; ++r) sagittal[static_cast<std::size_t>(s * n0 + r)] = at(r, n1 / 2, n2 - 1 - s);
  }
  std::vector<std::filesystem::path> out = {dir / (prefix + "_axial.png"), dir / (prefix + "_coronal.png"),
                                            dir / (prefix + "_sagittal.png")};
  write_png(axial, out[0], 0.0f, top);
  write_png(coronal, out[1], 0.0f, top);
  write_png(sagittal, out[2], 0.0f, top);
  return out;
}

MetricsRow evaluate(const std::string& id, const Tensor& pred, const Tensor& ref) {
  return {id, psnr(pred, ref), ssim(pred, ref), rrmse(pred, ref)};
}

std::string csv_header() { return "id,psnr,ssim,rrmse"; }

std::string csv_line(const MetricsRow& row) {
  auto num = [](double v) {
    if (std::isinf(v)) return std::string(v > 0 ? "inf" : "-inf");
    if (std::isnan(v)) return std::string("nan");
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  return row.id + "," + num(row.psnr) + "," + num(row.ssim) + "," + num(row.rrmse);
}

void write_csv(std::ostream& out, const std::vector<MetricsRow>& rows) {
  out << csv_header() << '\n';
  for (const auto& r : rows) out << csv_line(r) << '\n';
}

std::pair<MetricsRow, MetricsRow> mean_std(const std::vector<MetricsRow>& rows) {
  if (rows.empty()) throw std::invalid_argument("mean_std: no rows");
  const double n = static_cast<double>(rows.size());
  MetricsRow m{"mean"}, s{"std"};
  for (const auto& r : rows) {
    m.psnr += r.psnr / n;
    m.ssim += r.ssim / n;
    m.rrmse += r.rrmse / n;
  }
  for (const auto& r : rows) {
    s.psnr += (r.psnr - m.psnr) * (r.psnr - m.psnr) / n;
    s.ssim += (r.ssim - m.ssim) * (r.ssim - m.ssim) / n;
    s.rrmse += (r.rrmse - m.rrmse) * (r.rrmse - m.rrmse) / n;
  }
  s.psnr = std::sqrt(s.psnr);
  s.ssim = std::sqrt(s.ssim);
  s.rrmse = std::sqrt(s.rrmse);
  return {m, s};
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace triplet::metrics
