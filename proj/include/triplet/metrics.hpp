#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "triplet/tensor.hpp"

namespace triplet::metrics {

/// 20 log10(max(ref) / sqrt(MSE)); +infinity when x == ref.
double psnr(const Tensor& x, const Tensor& ref);

/// sqrt(MSE) / mean(ref). Throws when mean(ref) is zero.
double rrmse(const Tensor& x, const Tensor& ref);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

/// Mean local SSIM over every full Gaussian window position, computed on the
/// 2D slices of a [H,W] or [H,W,Z] volume (slices along the last axis) and
/// averaged. L = max(ref) - min(ref), or 1 for a constant reference. Throws
/// when H or W is smaller than the window.
double ssim(const Tensor& x, const Tensor& ref, const SsimOptions& opt = {});

/// |x - y| voxelwise.
Tensor diff_map(const Tensor& x, const Tensor& y);

/// 8-bit grayscale PNG of a [H,W] image: round(255 * clamp((v-lo)/(hi-lo))).
void write_png(const Tensor& image, const std::filesystem::path& path, float lo, float hi);

/// Axial, coronal and sagittal mid-slices of a [N,N,Z] volume written as
/// <prefix>_axial.png, <prefix>_coronal.png, <prefix>_sagittal.png. The
/// grey scale spans [0, hi], or [0, max] when hi <= 0.
std::vector<std::filesystem::path> write_mid_slices(const Tensor& volume, const std::filesystem::path& dir,
                                                    const std::string& prefix, float hi = 0.0f);

struct MetricsRow {
  std::string id;
  double psnr = 0.0;
  double ssim = 0.0;
  double rrmse = 0.0;
};

MetricsRow evaluate(const std::string& id, const Tensor& pred, const Tensor& ref);

std::string csv_header();
/// Fixed 6-decimal formatting; infinite PSNR is written as "inf".
std::string csv_line(const MetricsRow& row);
void write_csv(std::ostream& out, const std::vector<MetricsRow>& rows);

/// Mean and population standard deviation rows over the given rows.
std::pair<MetricsRow, MetricsRow> mean_std(const std::vector<MetricsRow>& rows);

double median(std::vector<double> v);

}  // namespace triplet::metrics
