#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "triplet/attention.hpp"
#include "triplet/ops.hpp"

namespace triplet::nets {

/// Projection-domain residual denoiser. The body is a string of blocks, 'C'
/// for Conv+BN+ReLU and 'T' for a transformer block (LN, W-MSA, add; LN,
/// MLP, add). The default is seven blocks with convolutions at positions 1,
/// 3, 5 and 7. A zero-initialized conv head maps the features to the
/// one-channel residual.
struct DenNetConfig {
  std::string layout = "CTCTCTC";
  int width = 8;
  int heads = 2;
  std::array<std::int64_t, 3> window{4, 4, 4};
  int mlp_ratio = 4;
  bool position_encoding = true;
};

/// Wavelet U-Net. Each encoder level applies one Haar analysis level and a
/// conv block that keeps the 8^l * C channels; the decoder mirrors it with
/// synthesis, an additive skip from the matching encoder level, and a conv
/// block. `wavelet = false` swaps the transforms for stride-2 convolutions
/// and nearest-neighbour upsampling (plain U-Net).
struct RecNetConfig {
  int levels = 2;
  int base_channels = 1;
  int convs_per_block = 4;
  /// Width of the full-resolution output block.
  int head_width = 8;
  bool wavelet = true;
};

/// Pair discriminator: conv stack over the channel-concatenated pair.
struct AdvNetConfig {
  std::vector<int> channels{16, 32, 64, 1};
  int kernel = 4;
  int stride = 2;
  float slope = 0.2f;
};

void to_json(nlohmann::json& j, const DenNetConfig& c);
void from_json(const nlohmann::json& j, DenNetConfig& c);
void to_json(nlohmann::json& j, const RecNetConfig& c);
void from_json(const nlohmann::json& j, RecNetConfig& c);
void to_json(nlohmann::json& j, const AdvNetConfig& c);
void from_json(const nlohmann::json& j, AdvNetConfig& c);

/// Shared plumbing: a parameter group plus the norm-layer helpers.
class Network {
 public:
  explicit Network(std::string name) : params_(std::move(name)) {}
  virtual ~Network() = default;

  ParamGroup& params() { return params_; }
  const ParamGroup& params() const { return params_; }

  void save(const std::filesystem::path& dir) const { save_param_group(params_, dir); }
  void load(const std::filesystem::path& dir) { load_param_group(params_, dir); }

 protected:
  Var conv_param(const std::string& key, std::int64_t co, std::int64_t ci, std::int64_t k, std::uint64_t& seed,
                 bool zero = false);
  void bn_params(const std::string& key, std::int64_t channels);
  Var conv_bn_relu(Tape& tape, const Var& x, const std::string& key, ops::NormMode mode);
  Var bn(Tape& tape, const Var& x, const std::string& key, ops::NormMode mode);

  ParamGroup params_;
};

class DenNet : public Network {
 public:
  DenNet(const DenNetConfig& cfg, std::uint64_t seed);

  struct Output {
    Var s_den;
    Var residual;
  };
  /// s_low: [B,1,angles,bins,slices]; s_den = s_low - residual.
  Output forward(Tape& tape, const Var& s_low, ops::NormMode mode);

  const DenNetConfig& config() const { return cfg_; }
  /// Weight of the residual head (GradNorm's shared layer in stage 3).
  const Var& head_weight() const { return params_.param("head/w"); }

 private:
  DenNetConfig cfg_;
};

class RecNet : public Network {
 public:
  RecNet(const RecNetConfig& cfg, std::uint64_t seed);

  struct Output {
    Var image;
    /// Channel count of the deepest encoder feature map.
    std::int64_t bottleneck_channels = 0;
    Shape bottleneck_shape;
  };
  /// image: [B,1,D,H,W] with D,H,W divisible by 2^levels.
  Output forward(Tape& tape, const Var& image, ops::NormMode mode);

  const RecNetConfig& config() const { return cfg_; }
  /// Last conv weight of the deepest encoder block (GradNorm's shared layer
  /// in stage 2).
  const Var& last_encoder_weight() const;

 private:
  std::int64_t channels_at(int level) const;
  RecNetConfig cfg_;
};

class AdvNet : public Network {
 public:
  AdvNet(const AdvNetConfig& cfg, std::uint64_t seed);

  /// Probability per sample, shape [B]: mean over the sigmoid map of the
  /// last layer.
  Var forward(Tape& tape, const Var& i_low, const Var& candidate);

  const AdvNetConfig& config() const { return cfg_; }

 private:
  AdvNetConfig cfg_;
};

/// Mean over all non-batch axes: [B,...] -> [B].
Var per_sample_mean(Tape& tape, const Var& x);

}  // namespace triplet::nets
