#pragma once

#include <array>

#include "triplet/autograd.hpp"

namespace triplet {

/// Sinusoidal encoding evaluated independently along D, H and W and
/// concatenated channel-wise: [3*dims_per_axis, D, H, W]. Within one axis
/// block, channel 2i holds sin(p / 10000^(2i/dims)) and 2i+1 the cosine.
Tensor position_encoding(std::array<std::int64_t, 3> shape, int dims_per_axis);

/// Encoding sized for `channels` token channels: floor(channels/3) rounded
/// down to even per axis, remaining channels zero. Shape [channels, D, H, W].
Tensor position_encoding_for_channels(std::array<std::int64_t, 3> shape, std::int64_t channels);

/// Projection weights for window attention; each weight is [C,C] applied as
/// y = W x + b per token.
struct MsaParams {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};

struct WindowMsaOptions {
  int heads = 1;
  std::array<std::int64_t, 3> window{4, 4, 4};
  bool position_encoding = true;
};

/// Multi-head self-attention restricted to non-overlapping windows of a
/// [B,C,D,H,W] feature map. Extents that do not divide the window are
/// handled by treating the missing tail voxels as masked tokens, so partial
/// windows attend only over real voxels. Output shape equals input shape.
Var window_msa(Tape& tape, const Var& x, const MsaParams& p, const WindowMsaOptions& opt);

}  // namespace triplet
