#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "triplet/datagen.hpp"
#include "triplet/losses.hpp"
#include "triplet/networks.hpp"

namespace triplet::config {

/// Ablation presets: I plain U-Net + L_I, II RecNet + L_I, III RecNet +
/// L_F + L_I, IV DenNet + RecNet + L_P + L_I, V everything.
enum class Method { I, II, III, IV, V };
Method parse_method(const std::string& name);
std::string to_string(Method m);

struct StageConfig {
  int epochs = 0;
  double lr = 1e-3;
};

struct LossConfig {
  bool use_projection = true;
  bool use_frequency = true;
  /// Exponent of the frequency-loss weight maps.
  double focal_alpha = 1.0;
  /// L_I = L_I_MSE + adversarial_weight * L_I_Adv.
  double adversarial_weight = 1e-3;
  bool gradnorm = true;
  losses::GradNormOptions gradnorm_options;
};

struct TrainConfig {
  bool use_dennet = true;
  int batch_size = 4;
  std::array<StageConfig, 3> stages{{{30, 1e-3}, {30, 1e-3}, {10, 1e-4}}};
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Number of folds to train and evaluate; 0 means all of them.
  int max_folds = 0;
};

struct RunConfig {
  std::string name = "desk";
  Method method = Method::V;
  data::DatasetConfig data;
  nets::DenNetConfig dennet;
  nets::RecNetConfig recnet;
  nets::AdvNetConfig advnet;
  LossConfig losses;
  TrainConfig train;
  std::uint64_t seed = 1;

  projection::Geometry geometry() const { return data.geometry(); }
  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;
};

/// Switches networks and losses to the given ablation method, keeping
/// everything else.
RunConfig with_method(RunConfig cfg, Method m);

/// Named presets: "desk" (Method V at desk scale), "full" (full-scale
/// constants), "dennet-3+3", "tiny" (seconds-scale smoke runs) and
/// "method-I" .. "method-V".
RunConfig preset(const std::string& name);
std::vector<std::string> preset_names();

void to_json(nlohmann::json& j, const RunConfig& c);
/// Missing keys keep the values of the preset named by "preset" (default
/// "desk"), so partial files override only what they mention.
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_config(const std::filesystem::path& path);
void save_config(const RunConfig& cfg, const std::filesystem::path& path);

}  // namespace triplet::config
