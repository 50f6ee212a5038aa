#pragma once

#include <vector>

#include "triplet/networks.hpp"

namespace triplet::losses {

/// Sinogram-domain loss: MSE between the denoised and standard-dose sinograms.
Var projection_loss(Tape& tape, const Var& s_den, const Var& s_std);

/// Normalized error weights per band, computed without gradient. For band i
/// of sample n, w = |f_hat - f_std|^alpha divided by its maximum over that
/// sample's band; an exactly matching band gets all-zero weights.
std::vector<Tensor> frequency_weights(const std::vector<Var>& f_hat, const std::vector<Var>& f_std, double alpha);

/// sum_i mean(w_i * (f_hat_i - f_std_i)^2) with constant weights w_i.
Var weighted_band_loss(Tape& tape, const std::vector<Var>& f_hat, const std::vector<Var>& f_std,
                       const std::vector<Tensor>& weights);

/// Wavelet-domain focal loss over the 8 one-level bands. Throws unless both
/// lists hold 8 bands of matching shapes.
Var frequency_loss(Tape& tape, const std::vector<Var>& f_hat, const std::vector<Var>& f_std, double alpha = 1.0);

/// frequency_loss on the one-level Haar bands of two [B,1,D,H,W] images.
Var frequency_loss_images(Tape& tape, const Var& i_hat, const Var& i_std, double alpha = 1.0);

/// Batch mean of (p_real - 1)^2 + p_fake^2 for per-sample probabilities [B].
Var discriminator_loss_from_probs(Tape& tape, const Var& p_real, const Var& p_fake);
/// Batch mean of (p_fake - 1)^2.
Var generator_loss_from_probs(Tape& tape, const Var& p_fake);

/// Discriminator objective; the candidate enters detached.
Var discriminator_loss(Tape& tape, nets::AdvNet& adv, const Var& i_low, const Var& i_std, const Var& i_hat);
/// Least-squares generator term, differentiable in i_hat.
Var generator_adv_loss(Tape& tape, nets::AdvNet& adv, const Var& i_low, const Var& i_hat);

struct ImageLoss {
  Var mse;
  Var g_adv;
};
/// Image-domain terms for the generator step.
ImageLoss image_loss(Tape& tape, nets::AdvNet& adv, const Var& i_hat, const Var& i_std, const Var& i_low);

struct GradNormOptions {
  double alpha = 1.5;
  double lr = 0.025;
  /// Weights are clamped to at least this before renormalizing.
  double min_weight = 1e-3;
};

/// One step on sum_i |G_i - mean(G) * r_i^alpha| with G_i = w_i * norm_i and
/// r_i the loss ratio L_i / L_i(0) over its mean. The step direction is
/// normalized by the mean gradient norm, then weights are clamped positive
/// and rescaled so they sum to the task count. A zero initial loss pins that
/// task's ratio to 1. Throws on non-positive or non-finite losses or norms.
std::vector<double> gradnorm_update(const std::vector<double>& weights, const std::vector<double>& losses,
                                    const std::vector<double>& grad_norms, const std::vector<double>& initial_losses,
                                    const GradNormOptions& opt = {});

/// Euclidean norm of d(loss)/d(shared), leaving all grads cleared.
double shared_grad_norm(Tape& tape, const Var& loss, const Var& shared);

}  // namespace triplet::losses
