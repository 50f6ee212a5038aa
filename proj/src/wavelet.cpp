#include "triplet/wavelet.hpp"

#include <cmath>
#include <stdexcept>

namespace triplet::wavelet {

namespace {

constexpr float kInvSqrt8 = 0.35355339059327373f;  // (1/sqrt2)^3

// Sign of tap (i,j,k) in band (bd,bh,bw): the high filter flips the second tap.
inline float tap_sign(int band, int i, int j, int k) {
  const int bd = (band >> 2) & 1, bh = (band >> 1) & 1, bw = band & 1;
  const int flips = (bd & i) + (bh & j) + (bw & k);
  return (flips & 1) ? -1.0f : 1.0f;
}

void check_even(std::int64_t d, std::int64_t h, std::int64_t w, const char* what) {
  if (d % 2 || h % 2 || w % 2) {
    throw ShapeError(std::string(what) + ": extents " + std::to_string(d) + "x" + std::to_string(h) + "x" +
                     std::to_string(w) + " are not divisible by 2");
  }
}

// src: n volumes of [D,H,W]; band b of volume v lands at
// dst + (b * n + v) * d*h*w/8 (band-major over volumes).
void analyze(const float* src, std::int64_t n, std::int64_t d, std::int64_t h, std::int64_t w, float* dst) {
  const std::int64_t hd = d / 2, hh = h / 2, hw = w / 2;
  const std::int64_t sub = hd * hh * hw;
  for (std::int64_t v = 0; v < n; ++v) {
    const float* x = src + v * d * h * w;
    for (std::int64_t z = 0; z < hd; ++z)
      for (std::int64_t y = 0; y < hh; ++y)
        for (std::int64_t xx = 0; xx < hw; ++xx) {
          float cube[8];
          for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j)
              for (int k = 0; k < 2; ++k) cube[i * 4 + j * 2 + k] = x[((2 * z + i) * h + 2 * y + j) * w + 2 * xx + k];
          const std::int64_t o = (z * hh + y) * hw + xx;
          for (int band = 0; band < 8; ++band) {
            float s = 0.0f;
            for (int t = 0; t < 8; ++t) s += tap_sign(band, t >> 2, (t >> 1) & 1, t & 1) * cube[t];
            dst[(band * n + v) * sub + o] = s * kInvSqrt8;
          }
        }
  }
}

// Inverse of analyze: src holds 8 band blocks of n volumes each.
void synthesize(const float* src, std::int64_t n, std::int64_t hd, std::int64_t hh, std::int64_t hw, float* dst) {
  const std::int64_t d = 2 * hd, h = 2 * hh, w = 2 * hw;
  const std::int64_t sub = hd * hh * hw;
  for (std::int64_t v = 0; v < n; ++v) {
    float* x = dst + v * d * h * w;
    for (std::int64_t z = 0; z < hd; ++z)
      for (std::int64_t y = 0; y < hh; ++y)
        for (std::int64_t xx = 0; xx < hw; ++xx) {
          const std::int64_t o = (z * hh + y) * hw + xx;
          float coeff[8];
          for (int band = 0; band < 8; ++band) coeff[band] = src[(band * n + v) * sub + o];
          for (int t = 0; t < 8; ++t) {
            float s = 0.0f;
            for (int band = 0; band < 8; ++band) s += tap_sign(band, t >> 2, (t >> 1) & 1, t & 1) * coeff[band];
            x[((2 * z + (t >> 2)) * h + 2 * y + ((t >> 1) & 1)) * w + 2 * xx + (t & 1)] = s * kInvSqrt8;
          }
        }
  }
}

// [C,D,H,W] -> [8C,D/2,H/2,W/2], band-major.
Tensor analyze_stack(const Tensor& x) {
  const std::int64_t c = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
  check_even(d, h, w, "dwt3");
  Tensor out(Shape{8 * c, d / 2, h / 2, w / 2});
  analyze(x.ptr(), c, d, h, w, out.ptr());
  return out;
}

Tensor synthesize_stack(const Tensor& x) {
  if (x.dim(0) % 8 != 0) throw ShapeError("idwt3: channel count " + std::to_string(x.dim(0)) + " not a multiple of 8");
  const std::int64_t c = x.dim(0) / 8;
  Tensor out(Shape{c, 2 * x.dim(1), 2 * x.dim(2), 2 * x.dim(3)});
  synthesize(x.ptr(), c, x.dim(1), x.dim(2), x.dim(3), out.ptr());
  return out;
}

}  // namespace

Tensor SubbandSet::to_tensor() const {
  if (bands.empty()) throw ShapeError("SubbandSet: no bands");
  const Shape& s = bands.front().shape();
  const std::int64_t c = s[0];
  const std::int64_t per = static_cast<std::int64_t>(bands.front().numel());
  Tensor out(Shape{static_cast<std::int64_t>(bands.size()) * c, s[1], s[2], s[3]});
  for (std::size_t b = 0; b < bands.size(); ++b) {
    if (bands[b].shape() != s) throw ShapeError("SubbandSet: inconsistent band shapes");
    std::copy(bands[b].vec().begin(), bands[b].vec().end(), out.vec().begin() + static_cast<std::ptrdiff_t>(b) * per);
  }
  return out;
}

SubbandSet SubbandSet::from_tensor(const Tensor& stacked, int level) {
  if (stacked.rank() != 4 || level < 1) throw ShapeError("SubbandSet::from_tensor: expected rank-4 stack and level>=1");
  const std::int64_t nb = static_cast<std::int64_t>(std::llround(std::pow(8.0, level)));
  if (stacked.dim(0) % nb != 0) {
    throw ShapeError("SubbandSet::from_tensor: " + std::to_string(stacked.dim(0)) + " channels not divisible by " +
                     std::to_string(nb) + " bands");
  }
  const std::int64_t c = stacked.dim(0) / nb;
  SubbandSet set;
  set.level = level;
  const Shape band_shape{c, stacked.dim(1), stacked.dim(2), stacked.dim(3)};
  const auto per = static_cast<std::ptrdiff_t>(shape_numel(band_shape));
  for (std::int64_t b = 0; b < nb; ++b) {
    std::vector<float> data(stacked.vec().begin() + b * per, stacked.vec().begin() + (b + 1) * per);
    set.bands.emplace_back(band_shape, std::move(data));
  }
  return set;
}

SubbandSet dwt3(const Tensor& input, int levels) {
  if (input.rank() != 4) throw ShapeError("dwt3: expected [C,D,H,W], got " + shape_str(input.shape()));
  if (levels < 1) throw std::invalid_argument("dwt3: levels must be >= 1");
  const std::int64_t f = std::int64_t{1} << levels;
  for (std::size_t a = 1; a < 4; ++a) {
    if (input.dim(a) % f != 0) {
      throw ShapeError("dwt3: extents " + shape_str(input.shape()) + " not divisible by 2^" + std::to_string(levels));
    }
  }
  // Band-major stacking at every level yields channel = band * C + c with
  // the first level as the least significant digit of `band`.
  Tensor cur = input;
  for (int l = 0; l < levels; ++l) cur = analyze_stack(cur);
  return SubbandSet::from_tensor(cur, levels);
}

Tensor idwt3(const SubbandSet& set) {
  if (set.level < 1) throw ShapeError("idwt3: level must be >= 1");
  const std::int64_t nb = static_cast<std::int64_t>(std::llround(std::pow(8.0, set.level)));
  if (static_cast<std::int64_t>(set.bands.size()) != nb) {
    throw ShapeError("idwt3: expected " + std::to_string(nb) + " bands, got " + std::to_string(set.bands.size()));
  }
  if (set.bands.front().rank() != 4) throw ShapeError("idwt3: bands must be [C,d,h,w]");
  Tensor cur = set.to_tensor();
  for (int l = 0; l < set.level; ++l) cur = synthesize_stack(cur);
  return cur;
}

Var dwt_level(Tape& tape, const Var& x) {
  const Tensor& xv = x->value;
  if (xv.rank() != 5) throw ShapeError("dwt_level: expected [B,C,D,H,W], got " + shape_str(xv.shape()));
  const std::int64_t b = xv.dim(0), c = xv.dim(1), d = xv.dim(2), h = xv.dim(3), w = xv.dim(4);
  check_even(d, h, w, "dwt_level");
  Tensor out(Shape{b, 8 * c, d / 2, h / 2, w / 2});
  const std::int64_t in_stride = c * d * h * w;
  for (std::int64_t n = 0; n < b; ++n) analyze(xv.ptr() + n * in_stride, c, d, h, w, out.ptr() + n * in_stride);
  return tape.record(std::move(out), {x}, [x, b, c, d, h, w, in_stride](const Tensor& g) {
    Tensor& gx = x->grad_buffer();
    std::vector<float> tmp(static_cast<std::size_t>(in_stride));
    for (std::int64_t n = 0; n < b; ++n) {
      synthesize(g.ptr() + n * in_stride, c, d / 2, h / 2, w / 2, tmp.data());
      float* dst = gx.ptr() + n * in_stride;
      for (std::int64_t i = 0; i < in_stride; ++i) dst[i] += tmp[static_cast<std::size_t>(i)];
    }
  });
}

Var idwt_level(Tape& tape, const Var& x) {
  const Tensor& xv = x->value;
  if (xv.rank() != 5) throw ShapeError("idwt_level: expected [B,8C,d,h,w], got " + shape_str(xv.shape()));
  if (xv.dim(1) % 8 != 0) throw ShapeError("idwt_level: channel count not a multiple of 8: " + shape_str(xv.shape()));
  const std::int64_t b = xv.dim(0), c = xv.dim(1) / 8, d = xv.dim(2), h = xv.dim(3), w = xv.dim(4);
  Tensor out(Shape{b, c, 2 * d, 2 * h, 2 * w});
  const std::int64_t stride = 8 * c * d * h * w;
  for (std::int64_t n = 0; n < b; ++n) synthesize(xv.ptr() + n * stride, c, d, h, w, out.ptr() + n * stride);
  return tape.record(std::move(out), {x}, [x, b, c, d, h, w, stride](const Tensor& g) {
    Tensor& gx = x->grad_buffer();
    std::vector<float> tmp(static_cast<std::size_t>(stride));
    for (std::int64_t n = 0; n < b; ++n) {
      analyze(g.ptr() + n * stride, c, 2 * d, 2 * h, 2 * w, tmp.data());
      float* dst = gx.ptr() + n * stride;
      for (std::int64_t i = 0; i < stride; ++i) dst[i] += tmp[static_cast<std::size_t>(i)];
    }
  });
}

std::vector<Var> dwt_bands(Tape& tape, const Var& x) {
  const Tensor& xv = x->value;
  if (xv.rank() != 5 || xv.dim(1) != 1) throw ShapeError("dwt_bands: expected [B,1,D,H,W], got " + shape_str(xv.shape()));
  Var stacked = dwt_level(tape, x);
  const std::int64_t b = xv.dim(0);
  const Shape& s = stacked->shape();
  const std::int64_t sub = s[2] * s[3] * s[4];
  std::vector<Var> bands;
  for (std::int64_t band = 0; band < 8; ++band) {
    Tensor t(Shape{b, 1, s[2], s[3], s[4]});
    for (std::int64_t n = 0; n < b; ++n)
      std::copy_n(stacked->value.ptr() + (n * 8 + band) * sub, sub, t.ptr() + n * sub);
    bands.push_back(tape.record(std::move(t), {stacked}, [stacked, band, b, sub](const Tensor& g) {
      Tensor& gs = stacked->grad_buffer();
      for (std::int64_t n = 0; n < b; ++n) {
        float* dst = gs.ptr() + (n * 8 + band) * sub;
        const float* src = g.ptr() + n * sub;
        for (std::int64_t i = 0; i < sub; ++i) dst[i] += src[i];
      }
    }));
  }
  return bands;
}

}  // namespace triplet::wavelet
