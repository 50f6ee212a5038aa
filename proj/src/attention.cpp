#include "triplet/attention.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>

namespace triplet {

Tensor position_encoding(std::array<std::int64_t, 3> shape, int dims_per_axis) {
  if (dims_per_axis <= 0 || dims_per_axis % 2 != 0) {
    throw std::invalid_argument("position_encoding: dims_per_axis must be positive and even");
  }
  const auto [d, h, w] = shape;
  Tensor pe(Shape{3 * dims_per_axis, d, h, w});
  for (int axis = 0; axis < 3; ++axis) {
    for (int i = 0; i < dims_per_axis / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / static_cast<double>(dims_per_axis));
      const std::int64_t c_sin = axis * dims_per_axis + 2 * i;
      const std::int64_t c_cos = c_sin + 1;
      for (std::int64_t z = 0; z < d; ++z)
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t x = 0; x < w; ++x) {
            const std::int64_t coord[3] = {z, y, x};
            const double arg = static_cast<double>(coord[axis]) * freq;
            const std::int64_t v = (z * h + y) * w + x;
            pe[static_cast<std::size_t>(c_sin * d * h * w + v)] = static_cast<float>(std::sin(arg));
            pe[static_cast<std::size_t>(c_cos * d * h * w + v)] = static_cast<float>(std::cos(arg));
          }
    }
  }
  return pe;
}

Tensor position_encoding_for_channels(std::array<std::int64_t, 3> shape, std::int64_t channels) {
  const auto [d, h, w] = shape;
  Tensor out(Shape{channels, d, h, w});
  const int per_axis = static_cast<int>((channels / 3) / 2 * 2);
  if (per_axis == 0) return out;
  const Tensor pe = position_encoding(shape, per_axis);
  std::copy(pe.vec().begin(), pe.vec().end(), out.vec().begin());
  return out;
}

namespace {

struct WindowLayout {
  std::vector<std::vector<std::int64_t>> windows;  // flat spatial indices per window
};

WindowLayout make_windows(std::int64_t d, std::int64_t h, std::int64_t w, std::array<std::int64_t, 3> win) {
  WindowLayout layout;
  for (std::int64_t z0 = 0; z0 < d; z0 += win[0])
    for (std::int64_t y0 = 0; y0 < h; y0 += win[1])
      for (std::int64_t x0 = 0; x0 < w; x0 += win[2]) {
        std::vector<std::int64_t> idx;
        for (std::int64_t z = z0; z < std::min(d, z0 + win[0]); ++z)
          for (std::int64_t y = y0; y < std::min(h, y0 + win[1]); ++y)
            for (std::int64_t x = x0; x < std::min(w, x0 + win[2]); ++x) idx.push_back((z * h + y) * w + x);
        layout.windows.push_back(std::move(idx));
      }
  return layout;
}

// Per-batch projection y[Co x V] = W[Co x C] * x[C x V] + b.
void project(const float* x, std::int64_t c, std::int64_t v, const Tensor& wt, const Tensor& b, float* y) {
  const std::int64_t co = wt.dim(0);
  for (std::int64_t o = 0; o < co; ++o) std::fill(y + o * v, y + (o + 1) * v, b[static_cast<std::size_t>(o)]);
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(co), static_cast<int>(v), static_cast<int>(c),
              1.0f, wt.ptr(), static_cast<int>(c), x, static_cast<int>(v), 1.0f, y, static_cast<int>(v));
}

// dW += dy * x^T, db += rowsum(dy), dx += W^T dy for one batch element.
void project_backward(const float* dy, const float* x, std::int64_t c, std::int64_t v, const Var& w, const Var& b,
                      float* dx) {
  if (w->requires_grad) {
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(c), static_cast<int>(c), static_cast<int>(v),
                1.0f, dy, static_cast<int>(v), x, static_cast<int>(v), 1.0f, w->grad_buffer().ptr(), static_cast<int>(c));
  }
  if (b->requires_grad) {
    Tensor& gb = b->grad_buffer();
    for (std::int64_t o = 0; o < c; ++o) {
      double s = 0.0;
      for (std::int64_t i = 0; i < v; ++i) s += dy[o * v + i];
      gb[static_cast<std::size_t>(o)] += static_cast<float>(s);
    }
  }
  if (dx) {
    cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(c), static_cast<int>(v), static_cast<int>(c),
                1.0f, w->value.ptr(), static_cast<int>(c), dy, static_cast<int>(v), 1.0f, dx, static_cast<int>(v));
  }
}

// c[m x n] = a[m x k] * b[k x n]; the inner loop runs over n.
void mm(const float* a, const float* b, float* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  std::fill(c, c + m * n, 0.0f);
  for (std::int64_t i = 0; i < m; ++i) {
    float* crow = c + i * n;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const float av = a[i * k + kk];
      const float* brow = b + kk * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Dot product with eight explicit partial sums so it vectorizes.
inline float dot(const float* a, const float* b, std::int64_t n) {
  float acc[8] = {};
  std::int64_t j = 0;
  for (; j + 8 <= n; j += 8)
    for (int l = 0; l < 8; ++l) acc[l] += a[j + l] * b[j + l];
  float s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; j < n; ++j) s += a[j] * b[j];
  return s;
}

// c[m x n] = a[m x k] * b[n x k]^T via row dot products.
void mm_nt(const float* a, const float* b, float* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) c[i * n + j] = dot(a + i * k, b + j * k, k);
}

// One head of one window. Feature-major buffers are [dh x t]; q is also kept
// token-major [t x dh] for the score product.
void gather_head(const float* src, std::int64_t vox, std::int64_t off, std::int64_t dh,
                 const std::vector<std::int64_t>& idx, float* tok, float* feat) {
  const std::int64_t t = static_cast<std::int64_t>(idx.size());
  for (std::int64_t e = 0; e < dh; ++e) {
    const float* plane = src + (off + e) * vox;
    for (std::int64_t i = 0; i < t; ++i) {
      const float val = plane[idx[static_cast<std::size_t>(i)]];
      if (tok) tok[i * dh + e] = val;
      if (feat) feat[e * t + i] = val;
    }
  }
}

void scatter_head(const float* feat, std::int64_t vox, std::int64_t off, std::int64_t dh,
                  const std::vector<std::int64_t>& idx, float* dst, bool accumulate) {
  const std::int64_t t = static_cast<std::int64_t>(idx.size());
  for (std::int64_t e = 0; e < dh; ++e) {
    float* plane = dst + (off + e) * vox;
    for (std::int64_t i = 0; i < t; ++i) {
      float& v = plane[idx[static_cast<std::size_t>(i)]];
      v = accumulate ? v + feat[e * t + i] : feat[e * t + i];
    }
  }
}

// exp for x <= 0 (softmax after max subtraction): range reduction to
// 2^n * exp(r), |r| <= ln2/2, degree-6 polynomial. Branch-free so the row
// loops vectorize; accurate to a few float ulps.
inline float exp_nonpositive(float x) {
  x = std::max(x, -87.0f);
  const float n = std::nearbyint(x * 1.44269504088896341f);
  const float r = (x - n * 0.693359375f) + n * 2.12194440e-4f;
  float p = 1.3888889e-3f;
  p = p * r + 8.3333338e-3f;
  p = p * r + 4.1666668e-2f;
  p = p * r + 1.6666667e-1f;
  p = p * r + 0.5f;
  p = p * r + 1.0f;
  p = p * r + 1.0f;
  const std::int32_t bits = (static_cast<std::int32_t>(n) + 127) << 23;
  float scale;
  std::memcpy(&scale, &bits, sizeof(scale));
  return p * scale;
}

// p[t x t] = row-wise softmax(q kt * scale), q [t x dh], kt [dh x t].
void attention_probs(const float* q, const float* kt, float* p, std::int64_t t, std::int64_t dh, float scale) {
  mm(q, kt, p, t, dh, t);
  for (std::int64_t i = 0; i < t; ++i) {
    float* row = p + i * t;
    float mx = row[0];
    for (std::int64_t j = 1; j < t; ++j) mx = std::max(mx, row[j]);
    float z = 0.0f;
    for (std::int64_t j = 0; j < t; ++j) {
      row[j] = exp_nonpositive((row[j] - mx) * scale);
      z += row[j];
    }
    const float inv = 1.0f / z;
    for (std::int64_t j = 0; j < t; ++j) row[j] *= inv;
  }
}

}  // namespace

Var window_msa(Tape& tape, const Var& x, const MsaParams& p, const WindowMsaOptions& opt) {
  const Tensor& xv = x->value;
  if (xv.rank() != 5) throw ShapeError("window_msa: expected [B,C,D,H,W], got " + shape_str(xv.shape()));
  const std::int64_t batch = xv.dim(0);
  const std::int64_t c = xv.dim(1);
  if (opt.heads <= 0 || c % opt.heads != 0) {
    throw std::invalid_argument("window_msa: heads (" + std::to_string(opt.heads) + ") must divide channels (" +
                                std::to_string(c) + ")");
  }
  for (auto e : opt.window) {
    if (e <= 0) throw std::invalid_argument("window_msa: window extents must be positive");
  }
  for (const Var* w : {&p.wq, &p.wk, &p.wv, &p.wo}) {
    if ((*w)->shape() != Shape{c, c}) throw ShapeError("window_msa: projection must be [C,C], got " + shape_str((*w)->shape()));
  }
  for (const Var* b : {&p.bq, &p.bk, &p.bv, &p.bo}) {
    if ((*b)->shape() != Shape{c}) throw ShapeError("window_msa: bias must be [C], got " + shape_str((*b)->shape()));
  }
  const std::int64_t d = xv.dim(2), h = xv.dim(3), w = xv.dim(4);
  const std::int64_t vox = d * h * w;
  const std::int64_t per = c * vox;
  const int heads = opt.heads;
  const std::int64_t dh = c / heads;
  const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(dh)));
  auto layout = std::make_shared<WindowLayout>(make_windows(d, h, w, opt.window));
  // Offset of each window's softmax matrices inside the saved buffer.
  std::vector<std::size_t> p_off;
  std::size_t p_total = 0;
  for (const auto& idx : layout->windows) {
    p_off.push_back(p_total);
    p_total += idx.size() * idx.size() * static_cast<std::size_t>(heads);
  }

  // Saved for backward: x + position code, Q, K, V, the attention output and
  // every softmax matrix.
  auto xp = std::make_shared<Tensor>(xv);
  if (opt.position_encoding) {
    const Tensor pe = position_encoding_for_channels({d, h, w}, c);
    for (std::int64_t b = 0; b < batch; ++b) {
      float* dst = xp->ptr() + b * per;
      for (std::int64_t i = 0; i < per; ++i) dst[i] += pe[static_cast<std::size_t>(i)];
    }
  }
  auto q = std::make_shared<Tensor>(xv.shape());
  auto k = std::make_shared<Tensor>(xv.shape());
  auto v = std::make_shared<Tensor>(xv.shape());
  auto o = std::make_shared<Tensor>(xv.shape());
  auto probs = std::make_shared<std::vector<float>>(p_total * static_cast<std::size_t>(batch));
  Tensor out(xv.shape());
  std::vector<float> qh, kt, vt, ot;
  for (std::int64_t b = 0; b < batch; ++b) {
    const float* xb = xp->ptr() + b * per;
    project(xb, c, vox, p.wq->value, p.bq->value, q->ptr() + b * per);
    project(xb, c, vox, p.wk->value, p.bk->value, k->ptr() + b * per);
    project(xb, c, vox, p.wv->value, p.bv->value, v->ptr() + b * per);
    for (std::size_t wi = 0; wi < layout->windows.size(); ++wi) {
      const auto& idx = layout->windows[wi];
      const std::int64_t t = static_cast<std::int64_t>(idx.size());
      const std::size_t td = static_cast<std::size_t>(t * dh);
      qh.resize(td);
      kt.resize(td);
      vt.resize(td);
      ot.resize(td);
      for (int hd = 0; hd < heads; ++hd) {
        const std::int64_t off = hd * dh;
        float* pm = probs->data() + static_cast<std::size_t>(b) * p_total + p_off[wi] +
                    static_cast<std::size_t>(hd * t * t);
        gather_head(q->ptr() + b * per, vox, off, dh, idx, qh.data(), nullptr);
        gather_head(k->ptr() + b * per, vox, off, dh, idx, nullptr, kt.data());
        gather_head(v->ptr() + b * per, vox, off, dh, idx, nullptr, vt.data());
        attention_probs(qh.data(), kt.data(), pm, t, dh, scale);
        mm_nt(vt.data(), pm, ot.data(), dh, t, t);  // O^T = V^T P^T
        scatter_head(ot.data(), vox, off, dh, idx, o->ptr() + b * per, false);
      }
    }
    project(o->ptr() + b * per, c, vox, p.wo->value, p.bo->value, out.ptr() + b * per);
  }

  return tape.record(
      std::move(out), {x, p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo},
      [x, p, layout, xp, q, k, v, o, probs, p_off, p_total, heads, batch, c, dh, vox, per, scale](const Tensor& g) {
        std::vector<float> d_o(static_cast<std::size_t>(per)), dq(static_cast<std::size_t>(per)),
            dk(static_cast<std::size_t>(per)), dv(static_cast<std::size_t>(per));
        std::vector<float> qt, kt, vh, dot_, dott, ds, dqt, dkt, dvt;
        for (std::int64_t b = 0; b < batch; ++b) {
          const float* gb = g.ptr() + b * per;
          std::fill(d_o.begin(), d_o.end(), 0.0f);
          project_backward(gb, o->ptr() + b * per, c, vox, p.wo, p.bo, d_o.data());
          for (std::size_t wi = 0; wi < layout->windows.size(); ++wi) {
            const auto& idx = layout->windows[wi];
            const std::int64_t t = static_cast<std::int64_t>(idx.size());
            const std::size_t td = static_cast<std::size_t>(t * dh);
            qt.resize(td);
            kt.resize(td);
            vh.resize(td);
            dot_.resize(td);
            dott.resize(td);
            dqt.resize(td);
            dkt.resize(td);
            dvt.resize(td);
            ds.resize(static_cast<std::size_t>(t * t));
            for (int hd = 0; hd < heads; ++hd) {
              const std::int64_t off = hd * dh;
              const float* pm = probs->data() + static_cast<std::size_t>(b) * p_total + p_off[wi] +
                                static_cast<std::size_t>(hd * t * t);
              gather_head(q->ptr() + b * per, vox, off, dh, idx, nullptr, qt.data());
              gather_head(k->ptr() + b * per, vox, off, dh, idx, nullptr, kt.data());
              gather_head(v->ptr() + b * per, vox, off, dh, idx, vh.data(), nullptr);
              gather_head(d_o.data(), vox, off, dh, idx, dot_.data(), dott.data());
              // dV^T = dO^T P
              mm(dott.data(), pm, dvt.data(), dh, t, t);
              // dP = dO V^T, then dS = P * (dP - rowdot(dP, P)) * scale.
              mm_nt(dot_.data(), vh.data(), ds.data(), t, dh, t);
              for (std::int64_t i = 0; i < t; ++i) {
                const float* prow = pm + i * t;
                float* drow = ds.data() + i * t;
                const float rd = dot(drow, prow, t);
                for (std::int64_t j = 0; j < t; ++j) drow[j] = prow[j] * (drow[j] - rd) * scale;
              }
              // dQ^T = K^T dS^T, dK^T = Q^T dS
              mm_nt(kt.data(), ds.data(), dqt.data(), dh, t, t);
              mm(qt.data(), ds.data(), dkt.data(), dh, t, t);
              scatter_head(dvt.data(), vox, off, dh, idx, dv.data(), false);
              scatter_head(dkt.data(), vox, off, dh, idx, dk.data(), false);
              scatter_head(dqt.data(), vox, off, dh, idx, dq.data(), false);
            }
          }
          const float* xb = xp->ptr() + b * per;
          float* dx = x->requires_grad ? x->grad_buffer().ptr() + b * per : nullptr;
          project_backward(dq.data(), xb, c, vox, p.wq, p.bq, dx);
          project_backward(dk.data(), xb, c, vox, p.wk, p.bk, dx);
          project_backward(dv.data(), xb, c, vox, p.wv, p.bv, dx);
        }
      });
}

}  // namespace triplet
