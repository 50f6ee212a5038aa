#include "triplet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace triplet {

namespace {

struct Evaluator {
  const std::function<Var(Tape&, const Var&)>& f;
  std::vector<double> coeff;

  double value(const Tensor& x) {
    Tape tape(false);
    const Var y = f(tape, make_var(x, false));
    return y->value.numel() == 1 ? scalar_value(y) : project(y->value);
  }

  double project(const Tensor& y) const {
    double s = 0.0;
    for (std::size_t j = 0; j < y.numel(); ++j) s += coeff[j] * y[j];
    return s;
  }
};

}  // namespace

GradCheckReport grad_check(const std::function<Var(Tape&, const Var&)>& f, const Tensor& x,
                           const GradCheckOptions& opt) {
  GradCheckReport rep;
  Evaluator eval{f, {}};

  // Analytic gradient through the tape.
  Tape tape;
  const Var xv = make_var(x, true);
  const Var y = f(tape, xv);
  if (y->value.numel() == 1) {
    eval.coeff.assign(1, 1.0);
  } else {
    std::mt19937_64 rng(opt.seed);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    eval.coeff.resize(y->value.numel());
    for (auto& c : eval.coeff) c = uni(rng);
  }
  Tensor seed_grad(y->shape());
  for (std::size_t j = 0; j < seed_grad.numel(); ++j) seed_grad[j] = static_cast<float>(eval.coeff[j]);
  // Reduce through a weighted-sum node so backward() sees a scalar.
  Var loss = tape.record(Tensor::scalar(static_cast<float>(eval.project(y->value))), {y}, [y, seed_grad](const Tensor& g) {
    Tensor& gy = y->grad_buffer();
    for (std::size_t j = 0; j < gy.numel(); ++j) gy[j] += g[0] * seed_grad[j];
  });
  tape.backward(loss);
  const Tensor analytic = xv->has_grad() ? xv->grad : Tensor::zeros(x.shape());

  const std::size_t n = x.numel();
  const std::size_t stride = (opt.max_elements == 0 || n <= opt.max_elements) ? 1 : n / opt.max_elements;
  double scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, std::fabs(static_cast<double>(analytic[i])));
  const double floor = 0.1 * scale;

  Tensor probe = x;
  for (std::size_t i = 0; i < n; i += stride) {
    const float orig = x[i];
    const float plus = static_cast<float>(orig + opt.step);
    const float minus = static_cast<float>(orig - opt.step);
    probe[i] = plus;
    const double fp = eval.value(probe);
    probe[i] = minus;
    const double fm = eval.value(probe);
    probe[i] = static_cast<float>(orig + opt.step / 2);
    const double fp2 = eval.value(probe);
    probe[i] = static_cast<float>(orig - opt.step / 2);
    const double fm2 = eval.value(probe);
    const double half_span = (static_cast<double>(static_cast<float>(orig + opt.step / 2)) -
                              static_cast<double>(static_cast<float>(orig - opt.step / 2)));
    probe[i] = orig;
    const double f0 = eval.value(probe);
    const double hp = static_cast<double>(plus) - orig;
    const double hm = static_cast<double>(orig) - minus;
    const double numeric = (fp - fm) / (hp + hm);
    const double fwd = (fp - f0) / hp;
    const double bwd = (f0 - fm) / hm;
    const double a = analytic[i];
    const double denom = std::max({std::fabs(a), std::fabs(numeric), floor, 1e-12});
    const double rel = std::fabs(a - numeric) / denom;
    const double numeric_half = (fp2 - fm2) / half_span;
    const double spread = std::max({std::fabs(fwd), std::fabs(bwd), floor, 1e-12});
    // A kink inside the stencil shows up as one-sided slopes that disagree, or
    // as a central difference that moves when the step is halved (smooth
    // functions only move by O(step^2)).
    const bool kink = std::fabs(fwd - bwd) > 0.1 * spread || std::fabs(numeric - numeric_half) > opt.tol * spread;
    rep.analytic.push_back(a);
    rep.numeric.push_back(numeric);
    rep.rel_error.push_back(rel);
    rep.kink.push_back(kink);
    ++rep.checked;
    if (kink) {
      ++rep.kinks;
      continue;
    }
    rep.max_rel_error = std::max(rep.max_rel_error, rel);
    if (rel > opt.tol) ++rep.failures;
  }
  rep.passed = rep.failures == 0;
  return rep;
}

}  // namespace triplet
