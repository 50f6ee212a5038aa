#include "triplet/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "triplet/wavelet.hpp"

namespace triplet::losses {

namespace {

Var scalar_node(Tape& tape, double v, std::vector<Var> inputs, Tape::BackwardFn fn) {
  Var out = tape.record(Tensor::scalar(static_cast<float>(v)), std::move(inputs), std::move(fn));
  out->precise = v;
  return out;
}

void check_bands(const std::vector<Var>& f_hat, const std::vector<Var>& f_std) {
  if (f_hat.size() != 8 || f_std.size() != 8) {
    throw std::invalid_argument("frequency loss: expected 8 bands, got " + std::to_string(f_hat.size()) + " and " +
                                std::to_string(f_std.size()));
  }
  for (std::size_t i = 0; i < 8; ++i) require_same_shape(f_hat[i]->value, f_std[i]->value, "frequency loss band");
}

void check_probs(const Var& p) {
  if (p->value.rank() != 1) throw ShapeError("adversarial loss: expected probabilities [B], got " + shape_str(p->shape()));
}

}  // namespace

Var projection_loss(Tape& tape, const Var& s_den, const Var& s_std) {
  require_same_shape(s_den->value, s_std->value, "projection loss");
  return ops::mse(tape, s_den, s_std);
}

std::vector<Tensor> frequency_weights(const std::vector<Var>& f_hat, const std::vector<Var>& f_std, double alpha) {
  check_bands(f_hat, f_std);
  std::vector<Tensor> weights;
  for (std::size_t i = 0; i < 8; ++i) {
    const Tensor& a = f_hat[i]->value;
    const Tensor& b = f_std[i]->value;
    Tensor w(a.shape());
    const std::int64_t batch = a.dim(0);
    const std::int64_t per = static_cast<std::int64_t>(a.numel()) / batch;
    for (std::int64_t n = 0; n < batch; ++n) {
      double mx = 0.0;
      for (std::int64_t j = n * per; j < (n + 1) * per; ++j) {
        const double d = std::fabs(static_cast<double>(a[static_cast<std::size_t>(j)]) - b[static_cast<std::size_t>(j)]);
        const double v = alpha == 1.0 ? d : std::pow(d, alpha);
        w[static_cast<std::size_t>(j)] = static_cast<float>(v);
        mx = std::max(mx, v);
      }
      for (std::int64_t j = n * per; j < (n + 1) * per; ++j) {
        auto& v = w[static_cast<std::size_t>(j)];
        v = mx > 0.0 ? static_cast<float>(v / mx) : 0.0f;
      }
    }
    weights.push_back(std::move(w));
  }
  return weights;
}

Var weighted_band_loss(Tape& tape, const std::vector<Var>& f_hat, const std::vector<Var>& f_std,
                       const std::vector<Tensor>& weights) {
  check_bands(f_hat, f_std);
  if (weights.size() != 8) throw std::invalid_argument("weighted_band_loss: expected 8 weight maps");
  double total = 0.0;
  for (std::size_t i = 0; i < 8; ++i) {
    require_same_shape(weights[i], f_hat[i]->value, "frequency weights");
    const Tensor& a = f_hat[i]->value;
    const Tensor& b = f_std[i]->value;
    double s = 0.0;
    for (std::size_t j = 0; j < a.numel(); ++j) {
      const double d = static_cast<double>(a[j]) - b[j];
      s += weights[i][j] * d * d;
    }
    total += s / static_cast<double>(a.numel());
  }
  std::vector<Var> inputs(f_hat.begin(), f_hat.end());
  inputs.insert(inputs.end(), f_std.begin(), f_std.end());
  return scalar_node(tape, total, std::move(inputs), [f_hat, f_std, weights](const Tensor& g) {
    for (std::size_t i = 0; i < 8; ++i) {
      const Tensor& a = f_hat[i]->value;
      const Tensor& b = f_std[i]->value;
      const float k = static_cast<float>(2.0 * g[0] / static_cast<double>(a.numel()));
      Tensor* ga = f_hat[i]->requires_grad ? &f_hat[i]->grad_buffer() : nullptr;
      Tensor* gb = f_std[i]->requires_grad ? &f_std[i]->grad_buffer() : nullptr;
      for (std::size_t j = 0; j < a.numel(); ++j) {
        const float v = k * weights[i][j] * (a[j] - b[j]);
        if (ga) (*ga)[j] += v;
        if (gb) (*gb)[j] -= v;
      }
    }
  });
}

Var frequency_loss(Tape& tape, const std::vector<Var>& f_hat, const std::vector<Var>& f_std, double alpha) {
  return weighted_band_loss(tape, f_hat, f_std, frequency_weights(f_hat, f_std, alpha));
}

Var frequency_loss_images(Tape& tape, const Var& i_hat, const Var& i_std, double alpha) {
  require_same_shape(i_hat->value, i_std->value, "frequency loss images");
  return frequency_loss(tape, wavelet::dwt_bands(tape, i_hat), wavelet::dwt_bands(tape, ops::detach(i_std)), alpha);
}

Var discriminator_loss_from_probs(Tape& tape, const Var& p_real, const Var& p_fake) {
  check_probs(p_real);
  check_probs(p_fake);
  require_same_shape(p_real->value, p_fake->value, "discriminator probabilities");
  const std::size_t n = p_real->value.numel();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = p_real->value[i] - 1.0;
    const double f = p_fake->value[i];
    s += r * r + f * f;
  }
  return scalar_node(tape, s / static_cast<double>(n), {p_real, p_fake}, [p_real, p_fake, n](const Tensor& g) {
    const float k = static_cast<float>(2.0 * g[0] / static_cast<double>(n));
    if (p_real->requires_grad) {
      Tensor& gr = p_real->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) gr[i] += k * (p_real->value[i] - 1.0f);
    }
    if (p_fake->requires_grad) {
      Tensor& gf = p_fake->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) gf[i] += k * p_fake->value[i];
    }
  });
}

Var generator_loss_from_probs(Tape& tape, const Var& p_fake) {
  check_probs(p_fake);
  const std::size_t n = p_fake->value.numel();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double f = p_fake->value[i] - 1.0;
    s += f * f;
  }
  return scalar_node(tape, s / static_cast<double>(n), {p_fake}, [p_fake, n](const Tensor& g) {
    const float k = static_cast<float>(2.0 * g[0] / static_cast<double>(n));
    Tensor& gf = p_fake->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) gf[i] += k * (p_fake->value[i] - 1.0f);
  });
}

Var discriminator_loss(Tape& tape, nets::AdvNet& adv, const Var& i_low, const Var& i_std, const Var& i_hat) {
  require_same_shape(i_hat->value, i_std->value, "discriminator pair");
  Var p_real = adv.forward(tape, i_low, i_std);
  Var p_fake = adv.forward(tape, i_low, ops::detach(i_hat));
  return discriminator_loss_from_probs(tape, p_real, p_fake);
}

Var generator_adv_loss(Tape& tape, nets::AdvNet& adv, const Var& i_low, const Var& i_hat) {
  return generator_loss_from_probs(tape, adv.forward(tape, i_low, i_hat));
}

ImageLoss image_loss(Tape& tape, nets::AdvNet& adv, const Var& i_hat, const Var& i_std, const Var& i_low) {
  require_same_shape(i_hat->value, i_std->value, "image loss");
  return {ops::mse(tape, i_std, i_hat), generator_adv_loss(tape, adv, i_low, i_hat)};
}

std::vector<double> gradnorm_update(const std::vector<double>& weights, const std::vector<double>& losses,
                                    const std::vector<double>& grad_norms, const std::vector<double>& initial_losses,
                                    const GradNormOptions& opt) {
  const std::size_t t = weights.size();
  if (t == 0 || losses.size() != t || grad_norms.size() != t || initial_losses.size() != t) {
    throw std::invalid_argument("gradnorm_update: inconsistent task counts");
  }
  for (std::size_t i = 0; i < t; ++i) {
    if (!(std::isfinite(losses[i]) && losses[i] > 0.0) || !(std::isfinite(grad_norms[i]) && grad_norms[i] > 0.0)) {
      throw std::invalid_argument("gradnorm_update: losses and gradient norms must be positive and finite");
    }
  }
  std::vector<double> ratio(t);
  double ratio_mean = 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    ratio[i] = initial_losses[i] > 0.0 ? losses[i] / initial_losses[i] : 1.0;
    ratio_mean += ratio[i] / static_cast<double>(t);
  }
  double g_mean = 0.0, norm_mean = 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    g_mean += weights[i] * grad_norms[i] / static_cast<double>(t);
    norm_mean += grad_norms[i] / static_cast<double>(t);
  }
  std::vector<double> out(t);
  double total = 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    const double target = g_mean * std::pow(ratio[i] / ratio_mean, opt.alpha);
    const double diff = weights[i] * grad_norms[i] - target;
    const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
    out[i] = std::max(opt.min_weight, weights[i] - opt.lr * sign * grad_norms[i] / norm_mean);
    total += out[i];
  }
  for (auto& w : out) w *= static_cast<double>(t) / total;
  return out;
}

double shared_grad_norm(Tape& tape, const Var& loss, const Var& shared) {
  const Tensor g = tape.gradient(loss, shared);
  double s = 0.0;
  for (float v : g.vec()) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

}  // namespace triplet::losses
