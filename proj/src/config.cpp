#include "triplet/config.hpp"

#include <fstream>
#include <stdexcept>

namespace triplet::config {

using nlohmann::json;

Method parse_method(const std::string& name) {
  if (name == "I") return Method::I;
  if (name == "II") return Method::II;
  if (name == "III") return Method::III;
  if (name == "IV") return Method::IV;
  if (name == "V") return Method::V;
  throw std::invalid_argument("unknown method '" + name + "' (expected I|II|III|IV|V)");
}

std::string to_string(Method m) {
  switch (m) {
    case Method::I: return "I";
    case Method::II: return "II";
    case Method::III: return "III";
    case Method::IV: return "IV";
    case Method::V: return "V";
  }
  return "?";
}

void RunConfig::validate() const {
  if (train.batch_size < 1) throw std::invalid_argument("config: batch_size must be positive");
  for (const auto& s : train.stages) {
    if (s.epochs < 0) throw std::invalid_argument("config: stage epochs must be nonnegative");
    if (!(s.lr > 0.0)) throw std::invalid_argument("config: stage learning rates must be positive");
  }
  if (train.max_folds < 0) throw std::invalid_argument("config: max_folds must be nonnegative");
  if (data.folds < 1) throw std::invalid_argument("config: folds must be at least 1");
  if (data.folds > data.n_phantoms) throw std::invalid_argument("config: more folds than phantoms");
  if (data.patch[0] != data.patch[1]) throw std::invalid_argument("config: patches must be square in-plane");
  const int div = 1 << recnet.levels;
  for (int e : data.patch) {
    if (e % div != 0) {
      throw std::invalid_argument("config: patch extent " + std::to_string(e) + " is not divisible by 2^levels = " +
                                  std::to_string(div));
    }
  }
  for (int a = 0; a < 3; ++a) {
    if (data.patch[a] > data.phantom.size[a]) throw std::invalid_argument("config: patch larger than phantom");
  }
  if (losses.use_projection && !train.use_dennet) {
    throw std::invalid_argument("config: the projection loss needs the sinogram denoiser");
  }
  if (!(losses.adversarial_weight >= 0.0)) throw std::invalid_argument("config: adversarial_weight must be >= 0");
}

RunConfig with_method(RunConfig cfg, Method m) {
  cfg.method = m;
  const bool dual = m == Method::IV || m == Method::V;
  cfg.train.use_dennet = dual;
  cfg.losses.use_projection = dual;
  cfg.losses.use_frequency = m == Method::III || m == Method::V;
  cfg.recnet.wavelet = m != Method::I;
  return cfg;
}

namespace {

RunConfig desk() {
  RunConfig c;
  c.name = "desk";
  c.dennet.width = 4;
  c.dennet.heads = 1;
  c.recnet.levels = 2;
  c.recnet.convs_per_block = 2;
  c.recnet.head_width = 8;
  c.train.max_folds = 1;
  return with_method(c, Method::V);
}

RunConfig full() {
  RunConfig c;
  c.name = "full";
  c.data.phantom.size = {256, 256, 160};
  c.data.n_phantoms = 70;
  c.data.patch = {96, 96, 96};
  c.data.patches_per_phantom = 40;
  c.data.n_angles = 120;
  c.data.reconstructor = data::Reconstructor::Osem;
  c.dennet.width = 16;
  c.recnet.levels = 4;
  c.recnet.head_width = 8;
  c.train.stages = {{{300, 1e-3}, {300, 1e-3}, {300, 1e-4}}};
  return with_method(c, Method::V);
}

RunConfig tiny() {
  RunConfig c;
  c.name = "tiny";
  c.data.phantom.size = {32, 32, 8};
  c.data.phantom.n_structures = 4;
  c.data.n_phantoms = 4;
  c.data.patch = {16, 16, 8};
  c.data.patches_per_phantom = 2;
  c.data.n_angles = 8;
  c.data.folds = 2;
  c.dennet.layout = "CTC";
  c.dennet.width = 8;
  c.dennet.heads = 1;
  c.recnet.levels = 1;
  c.recnet.convs_per_block = 2;
  c.recnet.head_width = 4;
  c.advnet.channels = {8, 16, 1};
  c.train.stages = {{{1, 1e-3}, {1, 1e-3}, {1, 1e-4}}};
  c.train.max_folds = 1;
  return with_method(c, Method::V);
}

}  // namespace

std::vector<std::string> preset_names() {
  return {"desk", "full", "dennet-3+3", "tiny", "method-I", "method-II", "method-III", "method-IV", "method-V"};
}

RunConfig preset(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "full") return full();
  if (name == "tiny") return tiny();
  if (name == "dennet-3+3") {
    RunConfig c = desk();
    c.name = name;
    c.dennet.layout = "CTCTCT";
    return c;
  }
  if (name.rfind("method-", 0) == 0) {
    RunConfig c = with_method(desk(), parse_method(name.substr(7)));
    c.name = name;
    return c;
  }
  throw std::invalid_argument("unknown preset '" + name + "'");
}

void to_json(json& j, const RunConfig& c) {
  json stages = json::array();
  for (const auto& s : c.train.stages) stages.push_back({{"epochs", s.epochs}, {"lr", s.lr}});
  j = {{"name", c.name},
       {"method", to_string(c.method)},
       {"seed", c.seed},
       {"data", c.data},
       {"networks", {{"dennet", c.dennet}, {"recnet", c.recnet}, {"advnet", c.advnet}}},
       {"losses",
        {{"use_projection", c.losses.use_projection},
         {"use_frequency", c.losses.use_frequency},
         {"focal_alpha", c.losses.focal_alpha},
         {"adversarial_weight", c.losses.adversarial_weight},
         {"gradnorm", c.losses.gradnorm},
         {"gradnorm_alpha", c.losses.gradnorm_options.alpha},
         {"gradnorm_lr", c.losses.gradnorm_options.lr},
         {"gradnorm_min_weight", c.losses.gradnorm_options.min_weight}}},
       {"train",
        {{"use_dennet", c.train.use_dennet},
         {"batch_size", c.train.batch_size},
         {"stages", stages},
         {"beta1", c.train.beta1},
         {"beta2", c.train.beta2},
         {"eps", c.train.eps},
         {"max_folds", c.train.max_folds}}}};
}

void from_json(const json& j, RunConfig& c) {
  if (!j.is_object()) throw std::invalid_argument("config: top level must be a JSON object");
  c = preset(j.value("preset", std::string("desk")));
  // a method switch first, so explicit network/loss keys below still win
  if (j.contains("method")) c = with_method(c, parse_method(j.at("method").get<std::string>()));
  c.name = j.value("name", c.name);
  c.seed = j.value("seed", c.seed);
  if (j.contains("data")) {
    json merged = c.data;
    merged.merge_patch(j.at("data"));
    c.data = merged.get<data::DatasetConfig>();
  }
  if (j.contains("networks")) {
    const auto& n = j.at("networks");
    auto merge = [&](const char* key, auto& target) {
      if (!n.contains(key)) return;
      json m = target;
      m.merge_patch(n.at(key));
      target = m.get<std::decay_t<decltype(target)>>();
    };
    merge("dennet", c.dennet);
    merge("recnet", c.recnet);
    merge("advnet", c.advnet);
  }
  if (j.contains("losses")) {
    const auto& l = j.at("losses");
    c.losses.use_projection = l.value("use_projection", c.losses.use_projection);
    c.losses.use_frequency = l.value("use_frequency", c.losses.use_frequency);
    c.losses.focal_alpha = l.value("focal_alpha", c.losses.focal_alpha);
    c.losses.adversarial_weight = l.value("adversarial_weight", c.losses.adversarial_weight);
    c.losses.gradnorm = l.value("gradnorm", c.losses.gradnorm);
    c.losses.gradnorm_options.alpha = l.value("gradnorm_alpha", c.losses.gradnorm_options.alpha);
    c.losses.gradnorm_options.lr = l.value("gradnorm_lr", c.losses.gradnorm_options.lr);
    c.losses.gradnorm_options.min_weight = l.value("gradnorm_min_weight", c.losses.gradnorm_options.min_weight);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    c.train.use_dennet = t.value("use_dennet", c.train.use_dennet);
    c.train.batch_size = t.value("batch_size", c.train.batch_size);
    if (t.contains("stages")) {
      const auto& s = t.at("stages");
      if (!s.is_array() || s.size() != 3) throw std::invalid_argument("config: train.stages must list 3 stages");
      for (std::size_t i = 0; i < 3; ++i) {
        c.train.stages[i].epochs = s[i].value("epochs", c.train.stages[i].epochs);
        c.train.stages[i].lr = s[i].value("lr", c.train.stages[i].lr);
      }
    }
    c.train.beta1 = t.value("beta1", c.train.beta1);
    c.train.beta2 = t.value("beta2", c.train.beta2);
    c.train.eps = t.value("eps", c.train.eps);
    c.train.max_folds = t.value("max_folds", c.train.max_folds);
  }
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config " + path.string() + " is not valid JSON: " + e.what());
  }
  RunConfig c = j.get<RunConfig>();
  c.validate();
  return c;
}

void save_config(const RunConfig& cfg, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream(path) << json(cfg).dump(2) << '\n';
}

}  // namespace triplet::config
