#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <stdexcept>
#include <vector>

#include "triplet/config.hpp"
#include "triplet/metrics.hpp"

namespace triplet::train {

/// Raised when a loss turns non-finite; the offending batch has been dumped.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::filesystem::path dump)
      : std::runtime_error(what), dump_dir(std::move(dump)) {}
  std::filesystem::path dump_dir;
};

struct LogRow {
  std::int64_t step = 0;
  int stage = 0;
  // NaN marks a loss or weight that is not active in this step
  double l_p, l_f, l_i_mse, l_g_adv, l_d_adv;
  double w_p, w_f, w_i;
};

std::string log_header();
std::string log_line(const LogRow& row);

/// The three networks of one run.
class Pipeline {
 public:
  Pipeline(const config::RunConfig& cfg, std::uint64_t seed);

  const config::RunConfig& config() const { return cfg_; }
  nets::DenNet& dennet() { return den_; }
  nets::RecNet& recnet() { return rec_; }
  nets::AdvNet& advnet() { return adv_; }

  /// Hash over all three parameter groups.
  std::uint64_t hash() const;

  /// Writes <dir>/{config.json, dennet/, recnet/, advnet/}.
  void save(const std::filesystem::path& dir) const;
  /// Rebuilds the pipeline stored by save().
  static Pipeline load(const std::filesystem::path& dir);

  struct Inference {
    Tensor s_den;  // [A,bins,Z]; equals s_low without the denoiser
    Tensor i_in;   // the image fed to RecNet
    Tensor i_hat;  // [N,N,Z]
  };
  /// Eval-mode forward of one sinogram [A,bins,Z]: denoise (when enabled),
  /// reconstruct classically, then RecNet. Throws ShapeError when the
  /// sinogram does not match the configured geometry. Does not modify the
  /// networks.
  Inference infer(const Tensor& s_low);
  /// Same on a batch [B,A,bins,Z] -> i_hat [B,N,N,Z].
  std::vector<Inference> infer_batch(const std::vector<Tensor>& s_low);

 private:
  config::RunConfig cfg_;
  nets::DenNet den_;
  nets::RecNet rec_;
  nets::AdvNet adv_;
};

struct StageOptions {
  std::ostream* log = nullptr;
  /// Prepended to every log line.
  std::string log_prefix;
  /// Directory for the NaN dump; the current directory when empty.
  std::filesystem::path dump_dir;
  /// First step number written to the log.
  std::int64_t first_step = 0;
  /// Stop after this many batches (0 = run every epoch in full).
  std::int64_t max_steps = 0;
};

struct StageResult {
  std::vector<LogRow> log;
  std::int64_t steps = 0;
};

/// Runs one training stage over the given samples with the stage schedule
/// from the pipeline's config. Throws TrainingError on a non-finite loss.
StageResult run_stage(Pipeline& pipe, int stage, const std::vector<const data::Sample*>& samples, std::uint64_t seed,
                      const StageOptions& opt = {});

struct FoldResult {
  int fold = 0;
  std::vector<metrics::MetricsRow> samples;   // prediction vs i_std
  std::vector<metrics::MetricsRow> baseline;  // LPET input image vs i_std
  metrics::MetricsRow summary;                // per-sample mean, id "fold<k>"
};

struct TrainResult {
  std::vector<FoldResult> folds;
  metrics::MetricsRow mean, std;
  double median_psnr = 0.0;
  double baseline_median_psnr = 0.0;
  double seconds = 0.0;
};

/// Evaluates a trained pipeline on the given samples.
FoldResult evaluate(Pipeline& pipe, int fold, const std::vector<const data::Sample*>& samples);

/// Trains stages 1-3 per fold and evaluates on the held-out phantoms. With
/// one fold, a seeded 80/20 phantom split stands in. When out is nonempty
/// writes train_log.csv, metrics.csv (fold rows then mean and std),
/// samples.csv, baseline.csv and the last fold's checkpoint/.
TrainResult train_full(const config::RunConfig& cfg, const data::Dataset& ds, const std::filesystem::path& out = {});

}  // namespace triplet::train
