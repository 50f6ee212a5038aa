#pragma once

#include <vector>

#include "triplet/autograd.hpp"

namespace triplet::wavelet {

/// Full 3D Haar packet decomposition of a [C,D,H,W] tensor.
///
/// Band codes: at one level, band b = 4*d + 2*h + w where each bit selects
/// the low (0) or high (1) filter along D, H and W, so band 0 is LLL and
/// band 7 is HHH. Over L levels the band index is sum_l b_l * 8^(l-1), the
/// first level being the least significant digit. Every band is [C, D/2^L,
/// H/2^L, W/2^L].
struct SubbandSet {
  int level = 0;
  std::vector<Tensor> bands;

  std::int64_t channels() const { return bands.empty() ? 0 : bands.front().dim(0); }
  /// Band-major stack: [8^L * C, d, h, w] with channel = band * C + c.
  Tensor to_tensor() const;
  static SubbandSet from_tensor(const Tensor& stacked, int level);
};

SubbandSet dwt3(const Tensor& input, int levels);
Tensor idwt3(const SubbandSet& bands);

/// One analysis level on a batch: [B,C,D,H,W] -> [B,8C,D/2,H/2,W/2],
/// channel = band * C + c. Differentiable; the adjoint is the synthesis.
Var dwt_level(Tape& tape, const Var& x);
/// Inverse of dwt_level: [B,8C,d,h,w] -> [B,C,2d,2h,2w].
Var idwt_level(Tape& tape, const Var& x);

/// One-level analysis of each [1,D,H,W] image in a [B,1,D,H,W] batch,
/// returned per band as [B,1,d,h,w] nodes (band order as above).
std::vector<Var> dwt_bands(Tape& tape, const Var& x);

}  // namespace triplet::wavelet
