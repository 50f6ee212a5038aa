#include "triplet/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace triplet::ops {

namespace {

template <typename Fwd, typename Deriv>
Var unary(Tape& tape, const Var& a, Fwd fwd, Deriv deriv) {
  Tensor out(a->shape());
  const float* x = a->value.ptr();
  float* y = out.ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) y[i] = fwd(x[i]);
  return tape.record(std::move(out), {a}, [a, deriv](const Tensor& g) {
    Tensor& ga = a->grad_buffer();
    const float* x = a->value.ptr();
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * deriv(x[i]);
  });
}

Var scalar_out(Tape& tape, double v, std::vector<Var> inputs, Tape::BackwardFn fn) {
  Var out = tape.record(Tensor::scalar(static_cast<float>(v)), std::move(inputs), std::move(fn));
  out->precise = v;
  return out;
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

std::int64_t spatial_size(const Tensor& t) {
  std::int64_t n = 1;
  for (std::size_t i = 2; i < t.rank(); ++i) n *= t.shape()[i];
  return n;
}

struct ConvGeom {
  std::int64_t c, d, h, w, k, s, p, od, oh, ow;
  std::int64_t rows() const { return c * k * k * k; }
  std::int64_t cols() const { return od * oh * ow; }
};

// Column matrix for output depth slices [od0, od1): rows = c*k^3, columns
// = (od1-od0)*oh*ow.
void im2col(const float* x, const ConvGeom& g, float* col, std::int64_t od0, std::int64_t od1) {
  const std::int64_t ncols = (od1 - od0) * g.oh * g.ow;
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t kd = 0; kd < g.k; ++kd) {
      for (std::int64_t kh = 0; kh < g.k; ++kh) {
        for (std::int64_t kw = 0; kw < g.k; ++kw) {
          const std::int64_t row = ((c * g.k + kd) * g.k + kh) * g.k + kw;
          float* dst = col + row * ncols;
          for (std::int64_t od = od0; od < od1; ++od) {
            const std::int64_t id = od * g.s - g.p + kd;
            for (std::int64_t oh = 0; oh < g.oh; ++oh) {
              const std::int64_t ih = oh * g.s - g.p + kh;
              float* out = dst + ((od - od0) * g.oh + oh) * g.ow;
              if (id < 0 || id >= g.d || ih < 0 || ih >= g.h) {
                std::fill(out, out + g.ow, 0.0f);
                continue;
              }
              const float* src = x + ((c * g.d + id) * g.h + ih) * g.w;
              if (g.s == 1) {
                // Contiguous copy of the valid span, zeros at the edges.
                const std::int64_t lo = std::max<std::int64_t>(0, g.p - kw);
                const std::int64_t hi = std::min<std::int64_t>(g.ow, g.w + g.p - kw);
                std::fill(out, out + lo, 0.0f);
                if (hi > lo) std::copy(src + lo - g.p + kw, src + hi - g.p + kw, out + lo);
                std::fill(out + std::max(lo, hi), out + g.ow, 0.0f);
                continue;
              }
              for (std::int64_t ow = 0; ow < g.ow; ++ow) {
                const std::int64_t iw = ow * g.s - g.p + kw;
                out[ow] = (iw >= 0 && iw < g.w) ? src[iw] : 0.0f;
              }
            }
          }
        }
      }
    }
  }
}

void col2im(const float* col, const ConvGeom& g, float* x, std::int64_t od0, std::int64_t od1) {
  const std::int64_t ncols = (od1 - od0) * g.oh * g.ow;
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t kd = 0; kd < g.k; ++kd) {
      for (std::int64_t kh = 0; kh < g.k; ++kh) {
        for (std::int64_t kw = 0; kw < g.k; ++kw) {
          const std::int64_t row = ((c * g.k + kd) * g.k + kh) * g.k + kw;
          const float* src = col + row * ncols;
          for (std::int64_t od = od0; od < od1; ++od) {
            const std::int64_t id = od * g.s - g.p + kd;
            if (id < 0 || id >= g.d) continue;
            for (std::int64_t oh = 0; oh < g.oh; ++oh) {
              const std::int64_t ih = oh * g.s - g.p + kh;
              if (ih < 0 || ih >= g.h) continue;
              const float* in = src + ((od - od0) * g.oh + oh) * g.ow;
              float* dst = x + ((c * g.d + id) * g.h + ih) * g.w;
              if (g.s == 1) {
                const std::int64_t lo = std::max<std::int64_t>(0, g.p - kw);
                const std::int64_t hi = std::min<std::int64_t>(g.ow, g.w + g.p - kw);
                for (std::int64_t ow = lo; ow < hi; ++ow) dst[ow - g.p + kw] += in[ow];
                continue;
              }
              for (std::int64_t ow = 0; ow < g.ow; ++ow) {
                const std::int64_t iw = ow * g.s - g.p + kw;
                if (iw >= 0 && iw < g.w) dst[iw] += in[ow];
              }
            }
          }
        }
      }
    }
  }
}

// Output depth slices per column block, sized so the block stays in cache.
std::int64_t depth_tile(const ConvGeom& g) {
  constexpr std::int64_t kBudget = 256 * 1024;  // floats
  const std::int64_t per_slice = g.rows() * g.oh * g.ow;
  return std::clamp<std::int64_t>(kBudget / std::max<std::int64_t>(per_slice, 1), 1, g.od);
}

}  // namespace

Var add(Tape& tape, const Var& a, const Var& b) {
  require_same_shape(a->value, b->value, "add");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  Var r = tape.record(std::move(out), {a, b}, [a, b](const Tensor& g) {
    if (a->requires_grad) a->accumulate(g);
    if (b->requires_grad) b->accumulate(g);
  });
  r->precise = a->precise + b->precise;
  return r;
}

Var sub(Tape& tape, const Var& a, const Var& b) {
  require_same_shape(a->value, b->value, "sub");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  Var r = tape.record(std::move(out), {a, b}, [a, b](const Tensor& g) {
    if (a->requires_grad) a->accumulate(g);
    if (b->requires_grad) {
      Tensor& gb = b->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
  r->precise = a->precise - b->precise;
  return r;
}

Var mul(Tape& tape, const Var& a, const Var& b) {
  require_same_shape(a->value, b->value, "mul");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return tape.record(std::move(out), {a, b}, [a, b](const Tensor& g) {
    if (a->requires_grad) {
      Tensor& ga = a->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * b->value[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * a->value[i];
    }
  });
}

Var scale(Tape& tape, const Var& a, float s) {
  Tensor out = a->value;
  for (auto& v : out.vec()) v *= s;
  Var r = tape.record(std::move(out), {a}, [a, s](const Tensor& g) {
    Tensor& ga = a->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * s;
  });
  r->precise = a->precise * s;
  return r;
}

Var relu(Tape& tape, const Var& a) {
  return unary(tape, a, [](float x) { return x > 0.0f ? x : 0.0f; },
               [](float x) { return x > 0.0f ? 1.0f : 0.0f; });
}

Var leaky_relu(Tape& tape, const Var& a, float slope) {
  return unary(tape, a, [slope](float x) { return x > 0.0f ? x : slope * x; },
               [slope](float x) { return x > 0.0f ? 1.0f : slope; });
}

Var sigmoid(Tape& tape, const Var& a) {
  auto f = [](float x) {
    // Branches keep exp() from overflowing on either tail.
    if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
    const float e = std::exp(x);
    return e / (1.0f + e);
  };
  return unary(tape, a, f, [f](float x) {
    const float s = f(x);
    return s * (1.0f - s);
  });
}

Var gelu(Tape& tape, const Var& a) {
  constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
  constexpr float kA = 0.044715f;
  // Tanh approximation written as x * sigmoid(2u), u = kC (x + kA x^3).
  return unary(
      tape, a,
      [](float x) { return x / (1.0f + std::exp(-2.0f * kC * (x + kA * x * x * x))); },
      [](float x) {
        const float sg = 1.0f / (1.0f + std::exp(-2.0f * kC * (x + kA * x * x * x)));
        return sg + x * sg * (1.0f - sg) * 2.0f * kC * (1.0f + 3.0f * kA * x * x);
      });
}

Var sin(Tape& tape, const Var& a) {
  return unary(tape, a, [](float x) { return std::sin(x); }, [](float x) { return std::cos(x); });
}

Var square(Tape& tape, const Var& a) {
  return unary(tape, a, [](float x) { return x * x; }, [](float x) { return 2.0f * x; });
}

Var sum(Tape& tape, const Var& a) {
  return scalar_out(tape, a->value.sum(), {a}, [a](const Tensor& g) {
    Tensor& ga = a->grad_buffer();
    for (auto& v : ga.vec()) v += g[0];
  });
}

Var mean(Tape& tape, const Var& a) {
  const double n = static_cast<double>(a->value.numel());
  return scalar_out(tape, a->value.sum() / n, {a}, [a, n](const Tensor& g) {
    Tensor& ga = a->grad_buffer();
    const float s = static_cast<float>(g[0] / n);
    for (auto& v : ga.vec()) v += s;
  });
}

Var mse(Tape& tape, const Var& a, const Var& b) {
  require_same_shape(a->value, b->value, "mse");
  const std::size_t n = a->value.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a->value[i]) - b->value[i];
    acc += d * d;
  }
  return scalar_out(tape, acc / static_cast<double>(n), {a, b}, [a, b, n](const Tensor& g) {
    const float s = static_cast<float>(2.0 * g[0] / static_cast<double>(n));
    if (a->requires_grad) {
      Tensor& ga = a->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) ga[i] += s * (a->value[i] - b->value[i]);
    }
    if (b->requires_grad) {
      Tensor& gb = b->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) gb[i] -= s * (a->value[i] - b->value[i]);
    }
  });
}

Var weighted_sum(Tape& tape, const std::vector<Var>& terms, const std::vector<float>& weights) {
  if (terms.size() != weights.size()) throw ShapeError("weighted_sum: term/weight count mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i]->value.numel() != 1) throw ShapeError("weighted_sum: terms must be scalars");
    acc += static_cast<double>(weights[i]) * scalar_value(terms[i]);
  }
  return scalar_out(tape, acc, terms, [terms, weights](const Tensor& g) {
    for (std::size_t i = 0; i < terms.size(); ++i) {
      if (terms[i]->requires_grad) terms[i]->grad_buffer()[0] += g[0] * weights[i];
    }
  });
}

Var detach(const Var& a) { return make_var(a->value, false); }

Var conv3d(Tape& tape, const Var& x, const Var& kernel, const Var& bias, int stride, int padding) {
  const Tensor& xv = x->value;
  const Tensor& kv = kernel->value;
  require_rank(xv, 5, "conv3d input");
  require_rank(kv, 5, "conv3d kernel");
  const std::int64_t k = kv.dim(2);
  if (kv.dim(3) != k || kv.dim(4) != k) throw ShapeError("conv3d: kernel must be cubic, got " + shape_str(kv.shape()));
  if (kv.dim(1) != xv.dim(1)) {
    throw ShapeError("conv3d: input channels " + std::to_string(xv.dim(1)) + " do not match kernel " +
                     shape_str(kv.shape()));
  }
  const std::int64_t co = kv.dim(0);
  if (bias && (bias->value.rank() != 1 || bias->value.dim(0) != co)) {
    throw ShapeError("conv3d: bias shape " + shape_str(bias->shape()) + " does not match " + std::to_string(co) +
                     " output channels");
  }
  ConvGeom g{xv.dim(1), xv.dim(2), xv.dim(3), xv.dim(4), k, stride, padding, 0, 0, 0};
  g.od = (g.d + 2 * g.p - g.k) / g.s + 1;
  g.oh = (g.h + 2 * g.p - g.k) / g.s + 1;
  g.ow = (g.w + 2 * g.p - g.k) / g.s + 1;
  if (g.od < 1 || g.oh < 1 || g.ow < 1) throw ShapeError("conv3d: input " + shape_str(xv.shape()) + " too small");
  const std::int64_t batch = xv.dim(0);
  const std::int64_t rows = g.rows();
  const std::int64_t cols = g.cols();
  const std::int64_t in_stride = g.c * g.d * g.h * g.w;

  Tensor out(Shape{batch, co, g.od, g.oh, g.ow});
  const std::int64_t tile = depth_tile(g);
  const std::int64_t plane = g.oh * g.ow;
  std::vector<float> col(static_cast<std::size_t>(rows * tile * plane));
  for (std::int64_t b = 0; b < batch; ++b) {
    float* y = out.ptr() + b * co * cols;
    if (bias) {
      for (std::int64_t o = 0; o < co; ++o) std::fill(y + o * cols, y + (o + 1) * cols, bias->value[o]);
    }
    for (std::int64_t od0 = 0; od0 < g.od; od0 += tile) {
      const std::int64_t od1 = std::min(g.od, od0 + tile);
      const std::int64_t n = (od1 - od0) * plane;
      im2col(xv.ptr() + b * in_stride, g, col.data(), od0, od1);
      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(co), static_cast<int>(n),
                  static_cast<int>(rows), 1.0f, kv.ptr(), static_cast<int>(rows), col.data(), static_cast<int>(n),
                  bias ? 1.0f : 0.0f, y + od0 * plane, static_cast<int>(cols));
    }
  }

  std::vector<Var> inputs{x, kernel};
  if (bias) inputs.push_back(bias);
  return tape.record(std::move(out), std::move(inputs), [x, kernel, bias, g, batch, co, rows, cols, in_stride](
                                                            const Tensor& grad) {
    const std::int64_t tile = depth_tile(g);
    const std::int64_t plane = g.oh * g.ow;
    std::vector<float> col(static_cast<std::size_t>(rows * tile * plane));
    std::vector<float> dcol;
    if (x->requires_grad) dcol.resize(col.size());
    for (std::int64_t b = 0; b < batch; ++b) {
      const float* dy = grad.ptr() + b * co * cols;
      if (bias && bias->requires_grad) {
        Tensor& gb = bias->grad_buffer();
        for (std::int64_t o = 0; o < co; ++o) {
          double s = 0.0;
          for (std::int64_t i = 0; i < cols; ++i) s += dy[o * cols + i];
          gb[static_cast<std::size_t>(o)] += static_cast<float>(s);
        }
      }
      for (std::int64_t od0 = 0; od0 < g.od; od0 += tile) {
        const std::int64_t od1 = std::min(g.od, od0 + tile);
        const std::int64_t n = (od1 - od0) * plane;
        const float* dyt = dy + od0 * plane;
        if (kernel->requires_grad) {
          im2col(x->value.ptr() + b * in_stride, g, col.data(), od0, od1);
          cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(co), static_cast<int>(rows),
                      static_cast<int>(n), 1.0f, dyt, static_cast<int>(cols), col.data(), static_cast<int>(n), 1.0f,
                      kernel->grad_buffer().ptr(), static_cast<int>(rows));
        }
        if (x->requires_grad) {
          cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(rows), static_cast<int>(n),
                      static_cast<int>(co), 1.0f, kernel->value.ptr(), static_cast<int>(rows), dyt,
                      static_cast<int>(cols), 0.0f, dcol.data(), static_cast<int>(n));
          col2im(dcol.data(), g, x->grad_buffer().ptr() + b * in_stride, od0, od1);
        }
      }
    }
  });
}

Var pointwise_linear(Tape& tape, const Var& x, const Var& weight, const Var& bias) {
  const Tensor& xv = x->value;
  const Tensor& wv = weight->value;
  if (xv.rank() < 2) throw ShapeError("pointwise_linear: input needs a channel axis, got " + shape_str(xv.shape()));
  require_rank(wv, 2, "pointwise_linear weight");
  const std::int64_t c = xv.dim(1);
  const std::int64_t co = wv.dim(0);
  if (wv.dim(1) != c) {
    throw ShapeError("pointwise_linear: weight " + shape_str(wv.shape()) + " incompatible with input " +
                     shape_str(xv.shape()));
  }
  if (bias && (bias->value.rank() != 1 || bias->value.dim(0) != co)) {
    throw ShapeError("pointwise_linear: bias shape " + shape_str(bias->shape()));
  }
  const std::int64_t batch = xv.dim(0);
  const std::int64_t v = spatial_size(xv);
  Shape out_shape = xv.shape();
  out_shape[1] = co;
  Tensor out(out_shape);
  for (std::int64_t b = 0; b < batch; ++b) {
    float* y = out.ptr() + b * co * v;
    if (bias) {
      for (std::int64_t o = 0; o < co; ++o) std::fill(y + o * v, y + (o + 1) * v, bias->value[o]);
    }
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(co), static_cast<int>(v),
                static_cast<int>(c), 1.0f, wv.ptr(), static_cast<int>(c), xv.ptr() + b * c * v, static_cast<int>(v),
                bias ? 1.0f : 0.0f, y, static_cast<int>(v));
  }
  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(bias);
  return tape.record(std::move(out), std::move(inputs), [x, weight, bias, batch, c, co, v](const Tensor& grad) {
    for (std::int64_t b = 0; b < batch; ++b) {
      const float* dy = grad.ptr() + b * co * v;
      if (weight->requires_grad) {
        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(co), static_cast<int>(c),
                    static_cast<int>(v), 1.0f, dy, static_cast<int>(v), x->value.ptr() + b * c * v,
                    static_cast<int>(v), 1.0f, weight->grad_buffer().ptr(), static_cast<int>(c));
      }
      if (bias && bias->requires_grad) {
        Tensor& gb = bias->grad_buffer();
        for (std::int64_t o = 0; o < co; ++o) {
          double s = 0.0;
          for (std::int64_t i = 0; i < v; ++i) s += dy[o * v + i];
          gb[static_cast<std::size_t>(o)] += static_cast<float>(s);
        }
      }
      if (x->requires_grad) {
        cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(c), static_cast<int>(v),
                    static_cast<int>(co), 1.0f, weight->value.ptr(), static_cast<int>(c), dy, static_cast<int>(v),
                    1.0f, x->grad_buffer().ptr() + b * c * v, static_cast<int>(v));
      }
    }
  });
}

Var batch_norm(Tape& tape, const Var& x, const Var& gamma, const Var& beta, BatchNormStats stats, float eps,
               float momentum, NormMode mode) {
  const Tensor& xv = x->value;
  if (xv.rank() < 2) throw ShapeError("batch_norm: input needs a channel axis, got " + shape_str(xv.shape()));
  const std::int64_t batch = xv.dim(0);
  const std::int64_t c = xv.dim(1);
  const std::int64_t v = spatial_size(xv);
  if (gamma->value.numel() != static_cast<std::size_t>(c) || beta->value.numel() != static_cast<std::size_t>(c)) {
    throw ShapeError("batch_norm: affine parameters do not match " + std::to_string(c) + " channels");
  }
  const std::int64_t count = batch * v;
  Tensor mean_t(Shape{c});
  Tensor invstd(Shape{c});
  if (mode == NormMode::Train) {
    if (count < 2) throw ShapeError("batch_norm: train mode needs more than one value per channel");
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      double s2 = 0.0;
      for (std::int64_t b = 0; b < batch; ++b) {
        const float* p = xv.ptr() + (b * c + ch) * v;
        for (std::int64_t i = 0; i < v; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      for (std::int64_t b = 0; b < batch; ++b) {
        const float* p = xv.ptr() + (b * c + ch) * v;
        for (std::int64_t i = 0; i < v; ++i) s2 += (p[i] - mu) * (p[i] - mu);
      }
      const double var = s2 / static_cast<double>(count);
      mean_t[static_cast<std::size_t>(ch)] = static_cast<float>(mu);
      invstd[static_cast<std::size_t>(ch)] = static_cast<float>(1.0 / std::sqrt(var + eps));
      const double unbiased = s2 / static_cast<double>(count - 1);
      if (stats.running_mean && stats.running_var) {
        Tensor& rm = *stats.running_mean;
        Tensor& rv = *stats.running_var;
        const auto idx = static_cast<std::size_t>(ch);
        rm[idx] = static_cast<float>((1.0 - momentum) * rm[idx] + momentum * mu);
        rv[idx] = static_cast<float>((1.0 - momentum) * rv[idx] + momentum * unbiased);
      }
    }
    if (stats.batches_seen) (*stats.batches_seen)[0] += 1.0f;
  } else {
    if (!stats.running_mean || !stats.running_var) {
      throw std::logic_error("batch_norm: eval mode needs running statistics");
    }
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const auto idx = static_cast<std::size_t>(ch);
      mean_t[idx] = (*stats.running_mean)[idx];
      invstd[idx] = 1.0f / std::sqrt((*stats.running_var)[idx] + eps);
    }
  }

  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const auto idx = static_cast<std::size_t>(ch);
      const std::int64_t off = (b * c + ch) * v;
      for (std::int64_t i = 0; i < v; ++i) {
        const float h = (xv[static_cast<std::size_t>(off + i)] - mean_t[idx]) * invstd[idx];
        xhat[static_cast<std::size_t>(off + i)] = h;
        out[static_cast<std::size_t>(off + i)] = gamma->value[idx] * h + beta->value[idx];
      }
    }
  }
  const bool train = mode == NormMode::Train;
  return tape.record(std::move(out), {x, gamma, beta},
                     [x, gamma, beta, xhat = std::move(xhat), invstd, batch, c, v, count, train](const Tensor& g) {
                       for (std::int64_t ch = 0; ch < c; ++ch) {
                         const auto idx = static_cast<std::size_t>(ch);
                         double sg = 0.0;
                         double sgx = 0.0;
                         for (std::int64_t b = 0; b < batch; ++b) {
                           const std::int64_t off = (b * c + ch) * v;
                           for (std::int64_t i = 0; i < v; ++i) {
                             const auto j = static_cast<std::size_t>(off + i);
                             sg += g[j];
                             sgx += static_cast<double>(g[j]) * xhat[j];
                           }
                         }
                         if (gamma->requires_grad) gamma->grad_buffer()[idx] += static_cast<float>(sgx);
                         if (beta->requires_grad) beta->grad_buffer()[idx] += static_cast<float>(sg);
                         if (!x->requires_grad) continue;
                         Tensor& gx = x->grad_buffer();
                         const double scale = gamma->value[idx] * invstd[idx];
                         const double n = static_cast<double>(count);
                         for (std::int64_t b = 0; b < batch; ++b) {
                           const std::int64_t off = (b * c + ch) * v;
                           for (std::int64_t i = 0; i < v; ++i) {
                             const auto j = static_cast<std::size_t>(off + i);
                             if (train) {
                               gx[j] += static_cast<float>(scale * (g[j] - sg / n - xhat[j] * sgx / n));
                             } else {
                               gx[j] += static_cast<float>(scale * g[j]);
                             }
                           }
                         }
                       }
                     });
}

Var layer_norm(Tape& tape, const Var& x, const Var& gamma, const Var& beta, float eps, int axis) {
  const Tensor& xv = x->value;
  const int rank = static_cast<int>(xv.rank());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("layer_norm: axis out of range for " + shape_str(xv.shape()));
  const std::int64_t e = xv.dim(static_cast<std::size_t>(axis));
  if (gamma->value.numel() != static_cast<std::size_t>(e) || beta->value.numel() != static_cast<std::size_t>(e)) {
    throw ShapeError("layer_norm: affine parameters do not match normalized extent " + std::to_string(e));
  }
  std::int64_t outer = 1;
  std::int64_t inner = 1;
  for (int i = 0; i < axis; ++i) outer *= xv.shape()[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= xv.shape()[static_cast<std::size_t>(i)];

  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  Tensor invstd(Shape{outer * inner});
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * e * inner + in;
      double s = 0.0;
      for (std::int64_t k = 0; k < e; ++k) s += xv[static_cast<std::size_t>(base + k * inner)];
      const double mu = s / static_cast<double>(e);
      double s2 = 0.0;
      for (std::int64_t k = 0; k < e; ++k) {
        const double d = xv[static_cast<std::size_t>(base + k * inner)] - mu;
        s2 += d * d;
      }
      const double is = 1.0 / std::sqrt(s2 / static_cast<double>(e) + eps);
      invstd[static_cast<std::size_t>(o * inner + in)] = static_cast<float>(is);
      for (std::int64_t k = 0; k < e; ++k) {
        const auto j = static_cast<std::size_t>(base + k * inner);
        const float h = static_cast<float>((xv[j] - mu) * is);
        xhat[j] = h;
        out[j] = gamma->value[static_cast<std::size_t>(k)] * h + beta->value[static_cast<std::size_t>(k)];
      }
    }
  }
  return tape.record(std::move(out), {x, gamma, beta},
                     [x, gamma, beta, xhat = std::move(xhat), invstd = std::move(invstd), outer, inner,
                      e](const Tensor& g) {
                       Tensor* gx = x->requires_grad ? &x->grad_buffer() : nullptr;
                       Tensor* gg = gamma->requires_grad ? &gamma->grad_buffer() : nullptr;
                       Tensor* gbeta = beta->requires_grad ? &beta->grad_buffer() : nullptr;
                       for (std::int64_t o = 0; o < outer; ++o) {
                         for (std::int64_t in = 0; in < inner; ++in) {
                           const std::int64_t base = o * e * inner + in;
                           double sdx = 0.0;
                           double sdxx = 0.0;
                           for (std::int64_t k = 0; k < e; ++k) {
                             const auto j = static_cast<std::size_t>(base + k * inner);
                             const auto kk = static_cast<std::size_t>(k);
                             if (gg) (*gg)[kk] += g[j] * xhat[j];
                             if (gbeta) (*gbeta)[kk] += g[j];
                             const double dxh = static_cast<double>(g[j]) * gamma->value[kk];
                             sdx += dxh;
                             sdxx += dxh * xhat[j];
                           }
                           if (!gx) continue;
                           const double is = invstd[static_cast<std::size_t>(o * inner + in)];
                           const double n = static_cast<double>(e);
                           for (std::int64_t k = 0; k < e; ++k) {
                             const auto j = static_cast<std::size_t>(base + k * inner);
                             const double dxh = static_cast<double>(g[j]) * gamma->value[static_cast<std::size_t>(k)];
                             (*gx)[j] += static_cast<float>(is * (dxh - sdx / n - xhat[j] * sdxx / n));
                           }
                         }
                       }
                     });
}

Var concat_channels(Tape& tape, const Var& a, const Var& b) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  if (av.rank() < 2 || av.rank() != bv.rank() || av.dim(0) != bv.dim(0)) {
    throw ShapeError("concat_channels: incompatible " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  }
  for (std::size_t i = 2; i < av.rank(); ++i) {
    if (av.dim(i) != bv.dim(i)) {
      throw ShapeError("concat_channels: spatial mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    }
  }
  const std::int64_t batch = av.dim(0);
  const std::int64_t ca = av.dim(1);
  const std::int64_t cb = bv.dim(1);
  const std::int64_t v = spatial_size(av);
  Shape shape = av.shape();
  shape[1] = ca + cb;
  Tensor out(shape);
  for (std::int64_t n = 0; n < batch; ++n) {
    std::copy_n(av.ptr() + n * ca * v, ca * v, out.ptr() + n * (ca + cb) * v);
    std::copy_n(bv.ptr() + n * cb * v, cb * v, out.ptr() + n * (ca + cb) * v + ca * v);
  }
  return tape.record(std::move(out), {a, b}, [a, b, batch, ca, cb, v](const Tensor& g) {
    for (std::int64_t n = 0; n < batch; ++n) {
      const float* src = g.ptr() + n * (ca + cb) * v;
      if (a->requires_grad) {
        float* dst = a->grad_buffer().ptr() + n * ca * v;
        for (std::int64_t i = 0; i < ca * v; ++i) dst[i] += src[i];
      }
      if (b->requires_grad) {
        float* dst = b->grad_buffer().ptr() + n * cb * v;
        for (std::int64_t i = 0; i < cb * v; ++i) dst[i] += src[ca * v + i];
      }
    }
  });
}

Var upsample_nearest2(Tape& tape, const Var& x) {
  const Tensor& xv = x->value;
  require_rank(xv, 5, "upsample_nearest2");
  const std::int64_t bc = xv.dim(0) * xv.dim(1);
  const std::int64_t d = xv.dim(2), h = xv.dim(3), w = xv.dim(4);
  Tensor out(Shape{xv.dim(0), xv.dim(1), 2 * d, 2 * h, 2 * w});
  auto src_index = [=](std::int64_t n, std::int64_t z, std::int64_t y, std::int64_t xx) {
    return static_cast<std::size_t>(((n * d + z / 2) * h + y / 2) * w + xx / 2);
  };
  std::size_t j = 0;
  for (std::int64_t n = 0; n < bc; ++n)
    for (std::int64_t z = 0; z < 2 * d; ++z)
      for (std::int64_t y = 0; y < 2 * h; ++y)
        for (std::int64_t xx = 0; xx < 2 * w; ++xx) out[j++] = xv[src_index(n, z, y, xx)];
  return tape.record(std::move(out), {x}, [x, bc, d, h, w, src_index](const Tensor& g) {
    Tensor& gx = x->grad_buffer();
    std::size_t j = 0;
    for (std::int64_t n = 0; n < bc; ++n)
      for (std::int64_t z = 0; z < 2 * d; ++z)
        for (std::int64_t y = 0; y < 2 * h; ++y)
          for (std::int64_t xx = 0; xx < 2 * w; ++xx) gx[src_index(n, z, y, xx)] += g[j++];
  });
}

Var pad_or_crop(Tape& tape, const Var& x, std::array<std::int64_t, 3> target) {
  const Tensor& xv = x->value;
  require_rank(xv, 5, "pad_or_crop");
  const std::int64_t bc = xv.dim(0) * xv.dim(1);
  const std::int64_t d = xv.dim(2), h = xv.dim(3), w = xv.dim(4);
  const auto [td, th, tw] = target;
  if (td == d && th == h && tw == w) return x;
  Tensor out(Shape{xv.dim(0), xv.dim(1), td, th, tw});
  const std::int64_t md = std::min(d, td), mh = std::min(h, th), mw = std::min(w, tw);
  for (std::int64_t n = 0; n < bc; ++n)
    for (std::int64_t z = 0; z < md; ++z)
      for (std::int64_t y = 0; y < mh; ++y)
        std::copy_n(xv.ptr() + ((n * d + z) * h + y) * w, mw, out.ptr() + ((n * td + z) * th + y) * tw);
  return tape.record(std::move(out), {x}, [x, bc, d, h, w, td, th, tw, md, mh, mw](const Tensor& g) {
    Tensor& gx = x->grad_buffer();
    for (std::int64_t n = 0; n < bc; ++n)
      for (std::int64_t z = 0; z < md; ++z)
        for (std::int64_t y = 0; y < mh; ++y) {
          const float* src = g.ptr() + ((n * td + z) * th + y) * tw;
          float* dst = gx.ptr() + ((n * d + z) * h + y) * w;
          for (std::int64_t i = 0; i < mw; ++i) dst[i] += src[i];
        }
  });
}

}  // namespace triplet::ops
