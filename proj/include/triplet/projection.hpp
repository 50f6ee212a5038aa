#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "triplet/autograd.hpp"

namespace triplet::projection {

/// 2D parallel-beam geometry applied slice-wise. Angles are a*pi/n_angles
/// for a in [0, n_angles); bin t sits at s = (t - (n_bins-1)/2) * bin_spacing.
/// Pixel (row, col) of an N x N slice has its centre at
/// (x, y) = (col - (N-1)/2, row - (N-1)/2).
struct Geometry {
  int n_angles = 120;
  int n_bins = 0;
  double bin_spacing = 1.0;
  int image_size = 0;
  /// Ray sampling step for the line integrals, in grid units.
  double sample_step = 0.5;

  /// Desk default: n_bins = ceil(sqrt2 * N) rounded up to even.
  static Geometry for_image(int image_size, int n_angles = 120);

  bool operator==(const Geometry&) const = default;
  /// Throws when the detector does not span the image diagonal.
  void validate() const;
  double angle(int a) const;
};

enum class Filter { Ramp, Hann };

Filter parse_filter(const std::string& name);

/// volume [N,N,Z] -> sinogram [n_angles, n_bins, Z], bilinear ray sampling.
Tensor forward_project(const Tensor& volume, const Geometry& geom);
/// Exact transpose of forward_project.
Tensor back_project(const Tensor& sinogram, const Geometry& geom);

/// Frequency-designed ramp (optionally Hann-apodized) filtering of every
/// angle row followed by pixel-driven backprojection scaled by pi/n_angles.
Tensor fbp(const Tensor& sinogram, const Geometry& geom, Filter filter = Filter::Hann);
/// Adjoint of fbp (used for its gradient).
Tensor fbp_adjoint(const Tensor& image, const Geometry& geom, Filter filter = Filter::Hann);

/// Differentiable FBP on a batch: [B,1,n_angles,n_bins,Z] -> [B,1,N,N,Z].
Var fbp_op(Tape& tape, const Var& sinograms, const Geometry& geom, Filter filter = Filter::Hann);

/// Poisson resampling at reduced dose: counts ~ Poisson(dose*scale*s) per
/// cell, returned divided by dose*scale so the mean equals the input.
Tensor simulate_low_dose(const Tensor& sino_std, double dose_factor, double scale_counts, std::uint64_t seed);

struct OsemOptions {
  int iterations = 10;
  int subsets = 1;
  double init_value = 1.0;
  /// Optional per-iteration hook receiving (iteration, current image).
  std::function<void(int, const std::vector<double>&)> on_iteration;
};

/// Multiplicative EM cycled over interleaved angle subsets; subsets = 1 is
/// plain MLEM. Output is nonnegative [N,N,Z].
Tensor mlem_osem(const Tensor& sinogram, const Geometry& geom, const OsemOptions& opt);

/// Poisson log-likelihood sum(y log(Ax) - Ax), constant terms dropped.
double poisson_log_likelihood(const Tensor& sinogram, const std::vector<double>& image, const Geometry& geom);

/// Double-precision forward projection of a flat [N*N*Z] image.
std::vector<double> forward_project_f64(const std::vector<double>& image, const Geometry& geom, int z);

}  // namespace triplet::projection
