#pragma once

#include <array>

#include "triplet/autograd.hpp"

namespace triplet::ops {

// Elementwise. Operands must share a shape; no implicit broadcasting.
Var add(Tape& tape, const Var& a, const Var& b);
Var sub(Tape& tape, const Var& a, const Var& b);
Var mul(Tape& tape, const Var& a, const Var& b);
Var scale(Tape& tape, const Var& a, float s);
Var relu(Tape& tape, const Var& a);
Var leaky_relu(Tape& tape, const Var& a, float slope);
Var sigmoid(Tape& tape, const Var& a);
/// tanh approximation.
Var gelu(Tape& tape, const Var& a);
Var sin(Tape& tape, const Var& a);
Var square(Tape& tape, const Var& a);

// Reductions to a one-element tensor; accumulation in double.
Var sum(Tape& tape, const Var& a);
Var mean(Tape& tape, const Var& a);
/// (1/N) * sum (a - b)^2
Var mse(Tape& tape, const Var& a, const Var& b);
/// sum_i w_i * t_i for a list of scalars and constant weights.
Var weighted_sum(Tape& tape, const std::vector<Var>& terms, const std::vector<float>& weights);

/// Detached copy: same value, no gradient path.
Var detach(const Var& a);

/// 3D convolution on [B,C,D,H,W] with kernel [Co,C,k,k,k], cubic kernel,
/// zero padding. Bias may be null.
Var conv3d(Tape& tape, const Var& x, const Var& kernel, const Var& bias, int stride, int padding);

/// 3x3x3, stride 1, same padding.
inline Var conv3(Tape& tape, const Var& x, const Var& kernel, const Var& bias) {
  return conv3d(tape, x, kernel, bias, 1, 1);
}

/// Per-voxel linear map over channels: [B,C,...] x [Co,C] (+ [Co]) -> [B,Co,...].
Var pointwise_linear(Tape& tape, const Var& x, const Var& weight, const Var& bias);

enum class NormMode { Train, Eval };

/// Running statistics owned by the caller (typically ParamGroup buffers).
struct BatchNormStats {
  Tensor* running_mean;
  Tensor* running_var;
  Tensor* batches_seen;
};

/// Per-channel normalization over batch and spatial axes of [B,C,...].
/// Train mode uses batch statistics and updates the running ones with
/// `momentum`; eval mode uses the running ones (initially mean 0, variance
/// 1) and throws when no buffers are attached.
Var batch_norm(Tape& tape, const Var& x, const Var& gamma, const Var& beta, BatchNormStats stats, float eps,
               float momentum, NormMode mode);

/// Normalization over one axis per position; `axis` defaults to the last.
Var layer_norm(Tape& tape, const Var& x, const Var& gamma, const Var& beta, float eps, int axis = -1);

/// Concatenates [B,C1,...] and [B,C2,...] along axis 1.
Var concat_channels(Tape& tape, const Var& a, const Var& b);

/// Nearest-neighbour x2 upsampling of the three spatial axes of [B,C,D,H,W].
Var upsample_nearest2(Tape& tape, const Var& x);

/// Zero-pads the spatial axes of [B,C,D,H,W] at the high end to `target`,
/// or crops back when `target` is smaller.
Var pad_or_crop(Tape& tape, const Var& x, std::array<std::int64_t, 3> target);

}  // namespace triplet::ops
