#include "triplet/networks.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "triplet/wavelet.hpp"

namespace triplet::nets {

void to_json(nlohmann::json& j, const DenNetConfig& c) {
  j = {{"layout", c.layout},       {"width", c.width},         {"heads", c.heads},
       {"window", c.window},       {"mlp_ratio", c.mlp_ratio}, {"position_encoding", c.position_encoding}};
}

void from_json(const nlohmann::json& j, DenNetConfig& c) {
  c.layout = j.value("layout", c.layout);
  c.width = j.value("width", c.width);
  c.heads = j.value("heads", c.heads);
  c.window = j.value("window", c.window);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.position_encoding = j.value("position_encoding", c.position_encoding);
}

void to_json(nlohmann::json& j, const RecNetConfig& c) {
  j = {{"levels", c.levels},         {"base_channels", c.base_channels}, {"convs_per_block", c.convs_per_block},
       {"head_width", c.head_width}, {"wavelet", c.wavelet}};
}

void from_json(const nlohmann::json& j, RecNetConfig& c) {
  c.levels = j.value("levels", c.levels);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.convs_per_block = j.value("convs_per_block", c.convs_per_block);
  c.head_width = j.value("head_width", c.head_width);
  c.wavelet = j.value("wavelet", c.wavelet);
}

void to_json(nlohmann::json& j, const AdvNetConfig& c) {
  j = {{"channels", c.channels}, {"kernel", c.kernel}, {"stride", c.stride}, {"slope", c.slope}};
}

void from_json(const nlohmann::json& j, AdvNetConfig& c) {
  c.channels = j.value("channels", c.channels);
  c.kernel = j.value("kernel", c.kernel);
  c.stride = j.value("stride", c.stride);
  c.slope = j.value("slope", c.slope);
}

namespace {

Tensor he_normal(Shape shape, std::int64_t fan_in, std::uint64_t seed) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, static_cast<float>(std::sqrt(2.0 / static_cast<double>(fan_in))));
  for (auto& v : t.vec()) v = n(rng);
  return t;
}

constexpr float kBnEps = 1e-5f;
constexpr float kBnMomentum = 0.1f;

}  // namespace

Var per_sample_mean(Tape& tape, const Var& x) {
  const Tensor& v = x->value;
  const std::int64_t b = v.dim(0);
  const std::int64_t per = static_cast<std::int64_t>(v.numel()) / b;
  Tensor out(Shape{b});
  for (std::int64_t n = 0; n < b; ++n) {
    double s = 0.0;
    for (std::int64_t i = 0; i < per; ++i) s += v[static_cast<std::size_t>(n * per + i)];
    out[static_cast<std::size_t>(n)] = static_cast<float>(s / static_cast<double>(per));
  }
  return tape.record(std::move(out), {x}, [x, b, per](const Tensor& g) {
    Tensor& gx = x->grad_buffer();
    for (std::int64_t n = 0; n < b; ++n) {
      const float s = g[static_cast<std::size_t>(n)] / static_cast<float>(per);
      for (std::int64_t i = 0; i < per; ++i) gx[static_cast<std::size_t>(n * per + i)] += s;
    }
  });
}

Var Network::conv_param(const std::string& key, std::int64_t co, std::int64_t ci, std::int64_t k, std::uint64_t& seed,
                        bool zero) {
  Shape shape{co, ci, k, k, k};
  Tensor w = zero ? Tensor(shape) : he_normal(shape, ci * k * k * k, seed++);
  params_.add(key + "/b", Tensor(Shape{co}));
  return params_.add(key + "/w", std::move(w));
}

void Network::bn_params(const std::string& key, std::int64_t channels) {
  params_.add(key + "/gamma", Tensor::ones(Shape{channels}));
  params_.add(key + "/beta", Tensor::zeros(Shape{channels}));
  params_.set_buffer(key + "/running_mean", Tensor::zeros(Shape{channels}));
  params_.set_buffer(key + "/running_var", Tensor::ones(Shape{channels}));
  params_.set_buffer(key + "/batches_seen", Tensor::zeros(Shape{1}));
}

Var Network::bn(Tape& tape, const Var& x, const std::string& key, ops::NormMode mode) {
  ops::BatchNormStats stats{&params_.buffer(key + "/running_mean"), &params_.buffer(key + "/running_var"),
                            &params_.buffer(key + "/batches_seen")};
  return ops::batch_norm(tape, x, params_.param(key + "/gamma"), params_.param(key + "/beta"), stats, kBnEps,
                         kBnMomentum, mode);
}

Var Network::conv_bn_relu(Tape& tape, const Var& x, const std::string& key, ops::NormMode mode) {
  Var y = ops::conv3(tape, x, params_.param(key + "/w"), params_.param(key + "/b"));
  return ops::relu(tape, bn(tape, y, key + "/bn", mode));
}

// ---------------------------------------------------------------------------

DenNet::DenNet(const DenNetConfig& cfg, std::uint64_t seed) : Network("dennet"), cfg_(cfg) {
  if (cfg.layout.empty() || cfg.layout.front() != 'C') throw std::invalid_argument("dennet layout must start with 'C'");
  if (cfg.width <= 0 || cfg.heads <= 0 || cfg.width % cfg.heads != 0) {
    throw std::invalid_argument("dennet: heads must divide a positive width");
  }
  const std::int64_t w = cfg.width;
  for (std::size_t i = 0; i < cfg.layout.size(); ++i) {
    const std::string key = "block" + std::to_string(i + 1);
    if (cfg.layout[i] == 'C') {
      conv_param(key, w, i == 0 ? 1 : w, 3, seed);
      bn_params(key + "/bn", w);
    } else if (cfg.layout[i] == 'T') {
      params_.add(key + "/ln1/gamma", Tensor::ones(Shape{w}));
      params_.add(key + "/ln1/beta", Tensor::zeros(Shape{w}));
      for (const char* p : {"q", "k", "v", "o"}) {
        params_.add(key + "/attn/w" + p, he_normal(Shape{w, w}, w, seed++));
        params_.add(key + "/attn/b" + p, Tensor::zeros(Shape{w}));
      }
      params_.add(key + "/ln2/gamma", Tensor::ones(Shape{w}));
      params_.add(key + "/ln2/beta", Tensor::zeros(Shape{w}));
      const std::int64_t hidden = w * cfg.mlp_ratio;
      params_.add(key + "/mlp/w1", he_normal(Shape{hidden, w}, w, seed++));
      params_.add(key + "/mlp/b1", Tensor::zeros(Shape{hidden}));
      params_.add(key + "/mlp/w2", he_normal(Shape{w, hidden}, hidden, seed++));
      params_.add(key + "/mlp/b2", Tensor::zeros(Shape{w}));
    } else {
      throw std::invalid_argument(std::string("dennet layout: unknown block '") + cfg.layout[i] + "'");
    }
  }
  conv_param("head", 1, w, 3, seed, /*zero=*/true);
}

DenNet::Output DenNet::forward(Tape& tape, const Var& s_low, ops::NormMode mode) {
  const Tensor& in = s_low->value;
  if (in.rank() != 5 || in.dim(1) != 1) throw ShapeError("dennet: expected [B,1,A,Bins,Z], got " + shape_str(in.shape()));
  Var h = s_low;
  for (std::size_t i = 0; i < cfg_.layout.size(); ++i) {
    const std::string key = "block" + std::to_string(i + 1);
    if (cfg_.layout[i] == 'C') {
      h = conv_bn_relu(tape, h, key, mode);
      continue;
    }
    const auto& p = params_;
    Var a = ops::layer_norm(tape, h, p.param(key + "/ln1/gamma"), p.param(key + "/ln1/beta"), 1e-5f, 1);
    MsaParams msa{p.param(key + "/attn/wq"), p.param(key + "/attn/bq"), p.param(key + "/attn/wk"),
                  p.param(key + "/attn/bk"), p.param(key + "/attn/wv"), p.param(key + "/attn/bv"),
                  p.param(key + "/attn/wo"), p.param(key + "/attn/bo")};
    a = window_msa(tape, a, msa, {cfg_.heads, cfg_.window, cfg_.position_encoding});
    h = ops::add(tape, h, a);
    Var m = ops::layer_norm(tape, h, p.param(key + "/ln2/gamma"), p.param(key + "/ln2/beta"), 1e-5f, 1);
    m = ops::gelu(tape, ops::pointwise_linear(tape, m, p.param(key + "/mlp/w1"), p.param(key + "/mlp/b1")));
    m = ops::pointwise_linear(tape, m, p.param(key + "/mlp/w2"), p.param(key + "/mlp/b2"));
    h = ops::add(tape, h, m);
  }
  Var residual = ops::conv3(tape, h, params_.param("head/w"), params_.param("head/b"));
  return {ops::sub(tape, s_low, residual), residual};
}

// ---------------------------------------------------------------------------

std::int64_t RecNet::channels_at(int level) const {
  std::int64_t c = cfg_.base_channels;
  for (int l = 0; l < level; ++l) c *= 8;
  return c;
}

RecNet::RecNet(const RecNetConfig& cfg, std::uint64_t seed) : Network("recnet"), cfg_(cfg) {
  if (cfg.levels < 1 || cfg.base_channels < 1 || cfg.convs_per_block < 2 || cfg.head_width < 1) {
    throw std::invalid_argument("recnet: levels >= 1, base_channels >= 1, convs_per_block >= 2 required");
  }
  const std::int64_t c0 = cfg.base_channels;
  if (c0 > 1) {
    conv_param("stem", c0, 1, 3, seed);
    bn_params("stem/bn", c0);
  }
  for (int l = 1; l <= cfg.levels; ++l) {
    const std::int64_t c = channels_at(l);
    if (!cfg.wavelet) {
      conv_param("down" + std::to_string(l), c, c / 8, 2, seed);
      params_.add("up" + std::to_string(l) + "/w", he_normal(Shape{c / 8, c}, c, seed++));
      params_.add("up" + std::to_string(l) + "/b", Tensor::zeros(Shape{c / 8}));
    }
    for (int i = 0; i < cfg.convs_per_block; ++i) {
      const std::string key = "enc" + std::to_string(l) + "/c" + std::to_string(i);
      conv_param(key, c, c, 3, seed);
      bn_params(key + "/bn", c);
    }
  }
  // Decoder blocks at levels L-1..1 keep the level's channel count.
  for (int l = cfg.levels - 1; l >= 1; --l) {
    const std::int64_t c = channels_at(l);
    for (int i = 0; i < cfg.convs_per_block; ++i) {
      const std::string key = "dec" + std::to_string(l) + "/c" + std::to_string(i);
      conv_param(key, c, c, 3, seed);
      bn_params(key + "/bn", c);
    }
  }
  // Full-resolution output block; its last conv has no BN/ReLU.
  const std::int64_t hw = cfg.head_width;
  for (int i = 0; i + 1 < cfg.convs_per_block; ++i) {
    const std::string key = "dec0/c" + std::to_string(i);
    conv_param(key, hw, i == 0 ? c0 : hw, 3, seed);
    bn_params(key + "/bn", hw);
  }
  conv_param("dec0/out", 1, hw, 3, seed, /*zero=*/true);
}

const Var& RecNet::last_encoder_weight() const {
  return params_.param("enc" + std::to_string(cfg_.levels) + "/c" + std::to_string(cfg_.convs_per_block - 1) + "/w");
}

RecNet::Output RecNet::forward(Tape& tape, const Var& image, ops::NormMode mode) {
  const Tensor& in = image->value;
  if (in.rank() != 5 || in.dim(1) != 1) throw ShapeError("recnet: expected [B,1,D,H,W], got " + shape_str(in.shape()));
  const std::int64_t f = std::int64_t{1} << cfg_.levels;
  for (std::size_t a = 2; a < 5; ++a) {
    if (in.dim(a) % f != 0) {
      throw ShapeError("recnet: extents " + shape_str(in.shape()) + " not divisible by 2^" + std::to_string(cfg_.levels));
    }
  }
  std::vector<Var> skips;
  Var h = cfg_.base_channels > 1 ? conv_bn_relu(tape, image, "stem", mode) : image;
  skips.push_back(h);
  for (int l = 1; l <= cfg_.levels; ++l) {
    const std::string lvl = std::to_string(l);
    h = cfg_.wavelet ? wavelet::dwt_level(tape, h)
                     : ops::conv3d(tape, h, params_.param("down" + lvl + "/w"), params_.param("down" + lvl + "/b"), 2, 0);
    for (int i = 0; i < cfg_.convs_per_block; ++i) h = conv_bn_relu(tape, h, "enc" + lvl + "/c" + std::to_string(i), mode);
    skips.push_back(h);
  }
  Output out;
  out.bottleneck_channels = h->value.dim(1);
  out.bottleneck_shape = h->shape();
  for (int l = cfg_.levels; l >= 1; --l) {
    const std::string lvl = std::to_string(l);
    if (cfg_.wavelet) {
      h = wavelet::idwt_level(tape, h);
    } else {
      h = ops::pointwise_linear(tape, ops::upsample_nearest2(tape, h), params_.param("up" + lvl + "/w"),
                                params_.param("up" + lvl + "/b"));
    }
    h = ops::add(tape, h, skips[static_cast<std::size_t>(l - 1)]);
    if (l - 1 >= 1) {
      for (int i = 0; i < cfg_.convs_per_block; ++i) {
        h = conv_bn_relu(tape, h, "dec" + std::to_string(l - 1) + "/c" + std::to_string(i), mode);
      }
    }
  }
  for (int i = 0; i + 1 < cfg_.convs_per_block; ++i) h = conv_bn_relu(tape, h, "dec0/c" + std::to_string(i), mode);
  h = ops::conv3(tape, h, params_.param("dec0/out/w"), params_.param("dec0/out/b"));
  // Global residual: the network predicts a correction to its input image.
  out.image = ops::add(tape, image, h);
  return out;
}

// ---------------------------------------------------------------------------

AdvNet::AdvNet(const AdvNetConfig& cfg, std::uint64_t seed) : Network("advnet"), cfg_(cfg) {
  if (cfg.channels.empty() || cfg.channels.back() != 1) throw std::invalid_argument("advnet: last layer must have 1 channel");
  std::int64_t ci = 2;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    conv_param("conv" + std::to_string(i + 1), cfg.channels[i], ci, cfg.kernel, seed);
    ci = cfg.channels[i];
  }
}

Var AdvNet::forward(Tape& tape, const Var& i_low, const Var& candidate) {
  require_same_shape(i_low->value, candidate->value, "advnet pair");
  Var h = ops::concat_channels(tape, i_low, candidate);
  const int pad = (cfg_.kernel - cfg_.stride) / 2;
  for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
    const std::string key = "conv" + std::to_string(i + 1);
    h = ops::conv3d(tape, h, params_.param(key + "/w"), params_.param(key + "/b"), cfg_.stride, pad);
    h = i + 1 < cfg_.channels.size() ? ops::leaky_relu(tape, h, cfg_.slope) : ops::sigmoid(tape, h);
  }
  return per_sample_mean(tape, h);
}

}  // namespace triplet::nets
