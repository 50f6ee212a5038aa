#include "triplet/projection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <random>
#include <stdexcept>
#include <tuple>

namespace triplet::projection {

Geometry Geometry::for_image(int image_size, int n_angles) {
  Geometry g;
  g.image_size = image_size;
  g.n_angles = n_angles;
  int bins = static_cast<int>(std::ceil(std::numbers::sqrt2 * image_size));
  if (bins % 2) ++bins;
  g.n_bins = bins;
  return g;
}

void Geometry::validate() const {
  if (n_angles < 1) throw std::invalid_argument("geometry: n_angles must be >= 1");
  if (image_size < 1) throw std::invalid_argument("geometry: image_size must be >= 1");
  if (bin_spacing <= 0.0 || sample_step <= 0.0) throw std::invalid_argument("geometry: spacings must be positive");
  const double coverage = n_bins * bin_spacing;
  const double diagonal = std::numbers::sqrt2 * image_size;
  if (coverage < std::floor(diagonal)) {
    throw std::invalid_argument("geometry: detector coverage " + std::to_string(coverage) +
                                " is smaller than the image diagonal " + std::to_string(diagonal));
  }
}

double Geometry::angle(int a) const { return std::numbers::pi * a / n_angles; }

Filter parse_filter(const std::string& name) {
  if (name == "ramp") return Filter::Ramp;
  if (name == "hann") return Filter::Hann;
  throw std::invalid_argument("unknown filter '" + name + "' (expected ramp|hann)");
}

namespace {

/// Sparse ray-by-pixel weights; row r = a * n_bins + t.
struct SystemMatrix {
  std::vector<std::int64_t> row_ptr;
  std::vector<std::int32_t> col;
  std::vector<float> weight;
};

std::shared_ptr<const SystemMatrix> build_system_matrix(const Geometry& g) {
  auto m = std::make_shared<SystemMatrix>();
  const int n = g.image_size;
  const double half = (n - 1) / 2.0;
  const double radius = 0.5 * g.n_bins * g.bin_spacing + 1.0;
  const int samples = static_cast<int>(std::ceil(2.0 * radius / g.sample_step));
  m->row_ptr.push_back(0);
  std::vector<std::pair<std::int32_t, double>> acc;
  for (int a = 0; a < g.n_angles; ++a) {
    const double c = std::cos(g.angle(a));
    const double s = std::sin(g.angle(a));
    for (int t = 0; t < g.n_bins; ++t) {
      const double offset = (t - (g.n_bins - 1) / 2.0) * g.bin_spacing;
      acc.clear();
      for (int k = 0; k < samples; ++k) {
        const double u = -radius + (k + 0.5) * g.sample_step;
        const double x = offset * c - u * s;
        const double y = offset * s + u * c;
        const double fc = x + half;
        const double fr = y + half;
        const double c0 = std::floor(fc);
        const double r0 = std::floor(fr);
        const double dc = fc - c0;
        const double dr = fr - r0;
        for (int i = 0; i < 2; ++i) {
          const int row = static_cast<int>(r0) + i;
          if (row < 0 || row >= n) continue;
          const double wr = i ? dr : 1.0 - dr;
          for (int j = 0; j < 2; ++j) {
            const int colx = static_cast<int>(c0) + j;
            if (colx < 0 || colx >= n) continue;
            const double w = wr * (j ? dc : 1.0 - dc) * g.sample_step;
            if (w > 0.0) acc.emplace_back(row * n + colx, w);
          }
        }
      }
      std::sort(acc.begin(), acc.end());
      for (std::size_t i = 0; i < acc.size();) {
        std::size_t j = i;
        double w = 0.0;
        while (j < acc.size() && acc[j].first == acc[i].first) w += acc[j++].second;
        m->col.push_back(acc[i].first);
        m->weight.push_back(static_cast<float>(w));
        i = j;
      }
      m->row_ptr.push_back(static_cast<std::int64_t>(m->col.size()));
    }
  }
  return m;
}

std::shared_ptr<const SystemMatrix> system_matrix(const Geometry& g) {
  static std::mutex mu;
  static std::map<std::tuple<int, int, double, int, double>, std::shared_ptr<const SystemMatrix>> cache;
  const auto key = std::make_tuple(g.n_angles, g.n_bins, g.bin_spacing, g.image_size, g.sample_step);
  std::lock_guard lock(mu);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto m = build_system_matrix(g);
  cache.emplace(key, m);
  return m;
}

// Handles angles a_begin, a_begin + a_step, ... (one OSEM subset).
template <typename T>
void project_rows(const SystemMatrix& m, const Geometry& g, const T* vol, std::int64_t z, T* sino, int a_begin,
                  int a_step) {
  for (int a = a_begin; a < g.n_angles; a += a_step) {
    for (int t = 0; t < g.n_bins; ++t) {
      const std::int64_t r = static_cast<std::int64_t>(a) * g.n_bins + t;
      T* out = sino + r * z;
      std::fill(out, out + z, T(0));
      for (std::int64_t e = m.row_ptr[r]; e < m.row_ptr[r + 1]; ++e) {
        const T w = static_cast<T>(m.weight[e]);
        const T* src = vol + static_cast<std::int64_t>(m.col[e]) * z;
        for (std::int64_t k = 0; k < z; ++k) out[k] += w * src[k];
      }
    }
  }
}

template <typename T>
void backproject_rows(const SystemMatrix& m, const Geometry& g, const T* sino, std::int64_t z, T* vol, int a_begin,
                      int a_step) {
  for (int a = a_begin; a < g.n_angles; a += a_step) {
    for (int t = 0; t < g.n_bins; ++t) {
      const std::int64_t r = static_cast<std::int64_t>(a) * g.n_bins + t;
      const T* in = sino + r * z;
      for (std::int64_t e = m.row_ptr[r]; e < m.row_ptr[r + 1]; ++e) {
        const T w = static_cast<T>(m.weight[e]);
        T* dst = vol + static_cast<std::int64_t>(m.col[e]) * z;
        for (std::int64_t k = 0; k < z; ++k) dst[k] += w * in[k];
      }
    }
  }
}

void check_volume(const Tensor& v, const Geometry& g) {
  if (v.rank() != 3 || v.dim(0) != g.image_size || v.dim(1) != g.image_size) {
    throw ShapeError("volume " + shape_str(v.shape()) + " does not match geometry image size " +
                     std::to_string(g.image_size));
  }
}

void check_sinogram(const Tensor& s, const Geometry& g) {
  if (s.rank() != 3 || s.dim(0) != g.n_angles || s.dim(1) != g.n_bins) {
    throw ShapeError("sinogram " + shape_str(s.shape()) + " does not match geometry [" + std::to_string(g.n_angles) +
                     "," + std::to_string(g.n_bins) + ",Z]");
  }
}

/// Spatial kernel of the (apodized) ramp filter, lags -(n_bins-1)..(n_bins-1).
/// Designed on a zero-padded frequency grid from the band-limited ramp
/// (Ram-Lak) kernel, so convolving with it equals padded FFT filtering.
std::vector<double> filter_kernel(const Geometry& g, Filter filter) {
  static std::mutex mu;
  static std::map<std::tuple<int, double, int>, std::vector<double>> cache;
  const auto key = std::make_tuple(g.n_bins, g.bin_spacing, static_cast<int>(filter));
  std::lock_guard lock(mu);
  if (auto it = cache.find(key); it != cache.end()) return it->second;

  int m = 1;
  while (m < 2 * g.n_bins) m <<= 1;
  const double tau = g.bin_spacing;
  const double pi = std::numbers::pi;
  std::vector<double> h(static_cast<std::size_t>(m), 0.0);
  for (int i = 0; i < m; ++i) {
    const int lag = i <= m / 2 ? i : i - m;
    if (lag == 0) {
      h[i] = 1.0 / (4.0 * tau * tau);
    } else if (lag % 2 != 0) {
      h[i] = -1.0 / (pi * pi * lag * lag * tau * tau);
    }
  }
  std::vector<double> kernel(static_cast<std::size_t>(2 * g.n_bins - 1), 0.0);
  if (filter == Filter::Ramp) {
    for (int lag = -(g.n_bins - 1); lag <= g.n_bins - 1; ++lag) kernel[lag + g.n_bins - 1] = h[(lag + m) % m];
  } else {
    // h is real and even, so its DFT is real: H[k] = sum_i h[i] cos(2 pi k i / m).
    std::vector<double> response(static_cast<std::size_t>(m), 0.0);
    for (int k = 0; k < m; ++k) {
      double s = 0.0;
      for (int i = 0; i < m; ++i) s += h[i] * std::cos(2.0 * pi * k * i / m);
      const int fk = k <= m / 2 ? k : m - k;
      const double window = 0.5 * (1.0 + std::cos(pi * fk / (m / 2.0)));
      response[k] = s * window;
    }
    for (int lag = -(g.n_bins - 1); lag <= g.n_bins - 1; ++lag) {
      double s = 0.0;
      for (int k = 0; k < m; ++k) s += response[k] * std::cos(2.0 * pi * k * lag / m);
      kernel[lag + g.n_bins - 1] = s / m;
    }
  }
  cache.emplace(key, kernel);
  return kernel;
}

// q[a,t,z] = tau * sum_k p[a,k,z] * h[t-k]. Symmetric kernel: self-adjoint.
std::vector<double> apply_filter(const Tensor& sino, const Geometry& g, Filter filter) {
  const auto kernel = filter_kernel(g, filter);
  const std::int64_t z = sino.dim(2);
  const int nb = g.n_bins;
  std::vector<double> out(sino.numel(), 0.0);
  for (int a = 0; a < g.n_angles; ++a) {
    const float* p = sino.ptr() + static_cast<std::int64_t>(a) * nb * z;
    double* q = out.data() + static_cast<std::int64_t>(a) * nb * z;
    for (int t = 0; t < nb; ++t)
      for (int k = 0; k < nb; ++k) {
        const double w = kernel[t - k + nb - 1] * g.bin_spacing;
        const float* src = p + static_cast<std::int64_t>(k) * z;
        double* dst = q + static_cast<std::int64_t>(t) * z;
        for (std::int64_t i = 0; i < z; ++i) dst[i] += w * src[i];
      }
  }
  return out;
}

// Pixel-driven backprojection with linear interpolation along s, scaled by
// pi / n_angles.
Tensor pixel_backproject(const std::vector<double>& q, const Geometry& g, std::int64_t z) {
  const int n = g.image_size;
  const double half = (n - 1) / 2.0;
  const double center_bin = (g.n_bins - 1) / 2.0;
  std::vector<double> acc(static_cast<std::size_t>(n) * n * z, 0.0);
  for (int a = 0; a < g.n_angles; ++a) {
    const double c = std::cos(g.angle(a));
    const double s = std::sin(g.angle(a));
    const double* qa = q.data() + static_cast<std::int64_t>(a) * g.n_bins * z;
    for (int row = 0; row < n; ++row)
      for (int col = 0; col < n; ++col) {
        const double pos = ((col - half) * c + (row - half) * s) / g.bin_spacing + center_bin;
        const double f = std::floor(pos);
        const int t0 = static_cast<int>(f);
        const double frac = pos - f;
        double* dst = acc.data() + (static_cast<std::int64_t>(row) * n + col) * z;
        if (t0 >= 0 && t0 < g.n_bins) {
          const double* src = qa + static_cast<std::int64_t>(t0) * z;
          for (std::int64_t i = 0; i < z; ++i) dst[i] += (1.0 - frac) * src[i];
        }
        if (t0 + 1 >= 0 && t0 + 1 < g.n_bins) {
          const double* src = qa + static_cast<std::int64_t>(t0 + 1) * z;
          for (std::int64_t i = 0; i < z; ++i) dst[i] += frac * src[i];
        }
      }
  }
  Tensor out(Shape{n, n, z});
  const double scale = std::numbers::pi / g.n_angles;
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] * scale);
  return out;
}

// Adjoint of pixel_backproject.
Tensor pixel_backproject_adjoint(const Tensor& image, const Geometry& g) {
  const int n = g.image_size;
  const std::int64_t z = image.dim(2);
  const double half = (n - 1) / 2.0;
  const double center_bin = (g.n_bins - 1) / 2.0;
  const double scale = std::numbers::pi / g.n_angles;
  std::vector<double> acc(static_cast<std::size_t>(g.n_angles) * g.n_bins * z, 0.0);
  for (int a = 0; a < g.n_angles; ++a) {
    const double c = std::cos(g.angle(a));
    const double s = std::sin(g.angle(a));
    double* qa = acc.data() + static_cast<std::int64_t>(a) * g.n_bins * z;
    for (int row = 0; row < n; ++row)
      for (int col = 0; col < n; ++col) {
        const double pos = ((col - half) * c + (row - half) * s) / g.bin_spacing + center_bin;
        const double f = std::floor(pos);
        const int t0 = static_cast<int>(f);
        const double frac = pos - f;
        const float* src = image.ptr() + (static_cast<std::int64_t>(row) * n + col) * z;
        if (t0 >= 0 && t0 < g.n_bins) {
          double* dst = qa + static_cast<std::int64_t>(t0) * z;
          for (std::int64_t i = 0; i < z; ++i) dst[i] += (1.0 - frac) * scale * src[i];
        }
        if (t0 + 1 >= 0 && t0 + 1 < g.n_bins) {
          double* dst = qa + static_cast<std::int64_t>(t0 + 1) * z;
          for (std::int64_t i = 0; i < z; ++i) dst[i] += frac * scale * src[i];
        }
      }
  }
  Tensor out(Shape{g.n_angles, g.n_bins, z});
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i]);
  return out;
}

}  // namespace

Tensor forward_project(const Tensor& volume, const Geometry& geom) {
  geom.validate();
  check_volume(volume, geom);
  const auto m = system_matrix(geom);
  const std::int64_t z = volume.dim(2);
  Tensor out(Shape{geom.n_angles, geom.n_bins, z});
  project_rows(*m, geom, volume.ptr(), z, out.ptr(), 0, 1);
  return out;
}

Tensor back_project(const Tensor& sinogram, const Geometry& geom) {
  geom.validate();
  check_sinogram(sinogram, geom);
  const auto m = system_matrix(geom);
  const std::int64_t z = sinogram.dim(2);
  Tensor out(Shape{geom.image_size, geom.image_size, z});
  backproject_rows(*m, geom, sinogram.ptr(), z, out.ptr(), 0, 1);
  return out;
}

std::vector<double> forward_project_f64(const std::vector<double>& image, const Geometry& geom, int z) {
  const auto m = system_matrix(geom);
  std::vector<double> out(static_cast<std::size_t>(geom.n_angles) * geom.n_bins * z);
  project_rows(*m, geom, image.data(), z, out.data(), 0, 1);
  return out;
}

Tensor fbp(const Tensor& sinogram, const Geometry& geom, Filter filter) {
  geom.validate();
  check_sinogram(sinogram, geom);
  if (geom.n_angles < 2) throw std::invalid_argument("fbp: needs at least two angles");
  const auto q = apply_filter(sinogram, geom, filter);
  return pixel_backproject(q, geom, sinogram.dim(2));
}

Tensor fbp_adjoint(const Tensor& image, const Geometry& geom, Filter filter) {
  geom.validate();
  check_volume(image, geom);
  const Tensor spread = pixel_backproject_adjoint(image, geom);
  const auto q = apply_filter(spread, geom, filter);
  Tensor out(spread.shape());
  for (std::size_t i = 0; i < q.size(); ++i) out[i] = static_cast<float>(q[i]);
  return out;
}

Var fbp_op(Tape& tape, const Var& sinograms, const Geometry& geom, Filter filter) {
  const Tensor& sv = sinograms->value;
  if (sv.rank() != 5 || sv.dim(1) != 1 || sv.dim(2) != geom.n_angles || sv.dim(3) != geom.n_bins) {
    throw ShapeError("fbp_op: expected [B,1," + std::to_string(geom.n_angles) + "," + std::to_string(geom.n_bins) +
                     ",Z], got " + shape_str(sv.shape()));
  }
  const std::int64_t batch = sv.dim(0);
  const std::int64_t z = sv.dim(4);
  const std::int64_t n = geom.image_size;
  const std::int64_t sino_size = static_cast<std::int64_t>(geom.n_angles) * geom.n_bins * z;
  const std::int64_t img_size = n * n * z;
  Tensor out(Shape{batch, 1, n, n, z});
  for (std::int64_t b = 0; b < batch; ++b) {
    Tensor s(Shape{geom.n_angles, geom.n_bins, z},
             std::vector<float>(sv.ptr() + b * sino_size, sv.ptr() + (b + 1) * sino_size));
    const Tensor img = fbp(s, geom, filter);
    std::copy(img.vec().begin(), img.vec().end(), out.vec().begin() + b * img_size);
  }
  return tape.record(std::move(out), {sinograms}, [sinograms, geom, filter, batch, z, n, sino_size,
                                                   img_size](const Tensor& g) {
    Tensor& gs = sinograms->grad_buffer();
    for (std::int64_t b = 0; b < batch; ++b) {
      Tensor gi(Shape{n, n, z}, std::vector<float>(g.ptr() + b * img_size, g.ptr() + (b + 1) * img_size));
      const Tensor adj = fbp_adjoint(gi, geom, filter);
      float* dst = gs.ptr() + b * sino_size;
      for (std::int64_t i = 0; i < sino_size; ++i) dst[i] += adj[static_cast<std::size_t>(i)];
    }
  });
}

Tensor simulate_low_dose(const Tensor& sino_std, double dose_factor, double scale_counts, std::uint64_t seed) {
  if (!(dose_factor > 0.0) || dose_factor > 1.0) throw std::invalid_argument("simulate_low_dose: dose_factor must be in (0,1]");
  if (!(scale_counts > 0.0)) throw std::invalid_argument("simulate_low_dose: scale_counts must be positive");
  std::mt19937_64 rng(seed);
  const double k = dose_factor * scale_counts;
  Tensor out(sino_std.shape());
  for (std::size_t i = 0; i < sino_std.numel(); ++i) {
    const double mean = std::max(0.0, static_cast<double>(sino_std[i])) * k;
    if (mean <= 0.0) {
      out[i] = 0.0f;
      continue;
    }
    std::poisson_distribution<long long> pois(mean);
    out[i] = static_cast<float>(static_cast<double>(pois(rng)) / k);
  }
  return out;
}

double poisson_log_likelihood(const Tensor& sinogram, const std::vector<double>& image, const Geometry& geom) {
  const auto z = static_cast<int>(sinogram.dim(2));
  const auto expected = forward_project_f64(image, geom, z);
  double ll = 0.0;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const double y = sinogram[i];
    const double e = expected[i];
    if (e > 0.0) {
      ll += y * std::log(e) - e;
    } else if (y > 0.0) {
      return -std::numeric_limits<double>::infinity();
    }
  }
  return ll;
}

Tensor mlem_osem(const Tensor& sinogram, const Geometry& geom, const OsemOptions& opt) {
  geom.validate();
  check_sinogram(sinogram, geom);
  if (opt.subsets < 1 || geom.n_angles % opt.subsets != 0) {
    throw std::invalid_argument("mlem_osem: subsets (" + std::to_string(opt.subsets) + ") must divide n_angles (" +
                                std::to_string(geom.n_angles) + ")");
  }
  if (opt.iterations < 0) throw std::invalid_argument("mlem_osem: iterations must be nonnegative");
  if (!(opt.init_value > 0.0)) throw std::invalid_argument("mlem_osem: init value must be positive");
  if (sinogram.min() < 0.0f) throw std::invalid_argument("mlem_osem: sinogram must be nonnegative");
  const auto m = system_matrix(geom);
  const std::int64_t z = sinogram.dim(2);
  const std::int64_t nvox = static_cast<std::int64_t>(geom.image_size) * geom.image_size * z;
  const std::size_t nsino = sinogram.numel();
  std::vector<double> y(sinogram.vec().begin(), sinogram.vec().end());
  std::vector<double> x(static_cast<std::size_t>(nvox), opt.init_value);

  std::vector<std::vector<double>> sens(static_cast<std::size_t>(opt.subsets));
  {
    const std::vector<double> ones(nsino, 1.0);
    for (int s = 0; s < opt.subsets; ++s) {
      sens[s].assign(static_cast<std::size_t>(nvox), 0.0);
      backproject_rows(*m, geom, ones.data(), z, sens[s].data(), s, opt.subsets);
      for (auto& v : sens[s]) v = std::max(v, 1e-8);
    }
  }
  std::vector<double> expected(nsino);
  std::vector<double> ratio(nsino);
  std::vector<double> correction(static_cast<std::size_t>(nvox));
  for (int it = 0; it < opt.iterations; ++it) {
    for (int s = 0; s < opt.subsets; ++s) {
      project_rows(*m, geom, x.data(), z, expected.data(), s, opt.subsets);
      std::fill(ratio.begin(), ratio.end(), 0.0);
      for (int a = s; a < geom.n_angles; a += opt.subsets) {
        const std::size_t begin = static_cast<std::size_t>(a) * geom.n_bins * z;
        const std::size_t end = begin + static_cast<std::size_t>(geom.n_bins) * z;
        for (std::size_t i = begin; i < end; ++i) {
          ratio[i] = y[i] > 0.0 ? y[i] / std::max(expected[i], 1e-30) : 0.0;
        }
      }
      std::fill(correction.begin(), correction.end(), 0.0);
      backproject_rows(*m, geom, ratio.data(), z, correction.data(), s, opt.subsets);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] *= correction[i] / sens[s][i];
    }
    if (opt.on_iteration) opt.on_iteration(it, x);
  }
  Tensor out(Shape{geom.image_size, geom.image_size, z});
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(x[i]);
  return out;
}

}  // namespace triplet::projection
