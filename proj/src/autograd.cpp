#include "triplet/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace triplet {

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor::zeros(value.shape());
  return grad;
}

void Node::accumulate(const Tensor& g) {
  require_same_shape(value, g, "grad accumulate");
  Tensor& buf = grad_buffer();
  float* dst = buf.ptr();
  const float* src = g.ptr();
  for (std::size_t i = 0; i < buf.numel(); ++i) dst[i] += src[i];
}

double scalar_value(const Var& v) {
  if (v->value.numel() != 1) throw ShapeError("scalar_value: node is not a scalar: " + shape_str(v->shape()));
  return std::isfinite(v->precise) ? v->precise : static_cast<double>(v->value[0]);
}

Var make_var(Tensor value, bool requires_grad) {
  return std::make_shared<Node>(std::move(value), requires_grad);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn fn) {
  const bool any = std::any_of(inputs.begin(), inputs.end(), needs_grad);
  auto out = make_var(std::move(value), enabled_ && any);
  if (out->requires_grad) entries_.push_back(Entry{std::move(inputs), out, std::move(fn)});
  return out;
}

void Tape::run_reverse(const Var& loss, std::size_t stop) {
  if (!loss || loss->value.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " +
                     (loss ? shape_str(loss->shape()) : std::string("null")));
  }
  loss->grad = Tensor::ones(loss->shape());
  for (std::size_t i = entries_.size(); i-- > stop;) {
    Entry& e = entries_[i];
    if (!e.output->has_grad()) continue;
    e.fn(e.output->grad);
  }
}

void Tape::backward(const Var& loss) {
  if (!loss || loss->value.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " +
                     (loss ? shape_str(loss->shape()) : std::string("null")));
  }
  if (!loss->requires_grad) {
    entries_.clear();
    return;
  }
  run_reverse(loss, 0);
  // Intermediate grads die with the entries; leaves keep theirs.
  for (auto& e : entries_) e.output->zero_grad();
  entries_.clear();
}

Tensor Tape::gradient(const Var& loss, const Var& wrt) {
  std::size_t first = entries_.size();
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& in = entries_[i].inputs;
    if (std::find(in.begin(), in.end(), wrt) != in.end()) {
      first = i;
      break;
    }
  }
  Tensor result = Tensor::zeros(wrt->shape());
  if (first == entries_.size() || !loss->requires_grad) return result;
  run_reverse(loss, first);
  if (wrt->has_grad()) result = wrt->grad;
  for (std::size_t i = first; i < entries_.size(); ++i) {
    entries_[i].output->zero_grad();
    for (auto& in : entries_[i].inputs) in->zero_grad();
  }
  loss->zero_grad();
  return result;
}

Var ParamGroup::add(const std::string& key, Tensor init) {
  if (index_.count(key)) throw std::invalid_argument("duplicate parameter " + key + " in " + name_);
  auto v = make_var(std::move(init), !frozen_);
  index_[key] = params_.size();
  params_.emplace_back(key, v);
  return v;
}

const Var& ParamGroup::param(const std::string& key) const {
  auto it = index_.find(key);
  if (it == index_.end()) throw std::out_of_range("no parameter " + key + " in " + name_);
  return params_[it->second].second;
}

Tensor& ParamGroup::buffer(const std::string& key) {
  auto it = buffers_.find(key);
  if (it == buffers_.end()) throw std::out_of_range("no buffer " + key + " in " + name_);
  return it->second;
}

const Tensor& ParamGroup::buffer(const std::string& key) const {
  auto it = buffers_.find(key);
  if (it == buffers_.end()) throw std::out_of_range("no buffer " + key + " in " + name_);
  return it->second;
}

void ParamGroup::set_buffer(const std::string& key, Tensor value) { buffers_[key] = std::move(value); }

std::size_t ParamGroup::param_count() const {
  std::size_t n = 0;
  for (const auto& [k, v] : params_) n += v->value.numel();
  return n;
}

void ParamGroup::set_frozen(bool f) {
  frozen_ = f;
  for (auto& [k, v] : params_) {
    v->requires_grad = !f;
    if (f) v->zero_grad();
  }
}

void ParamGroup::zero_grad() {
  for (auto& [k, v] : params_) v->zero_grad();
}

void ParamGroup::adam_step(const AdamConfig& cfg) {
  if (frozen_) return;
  ++steps_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(steps_));
  for (auto& [key, v] : params_) {
    if (!v->has_grad()) continue;
    auto& m = m1_[key];
    auto& s = m2_[key];
    if (m.empty()) m = Tensor::zeros(v->shape());
    if (s.empty()) s = Tensor::zeros(v->shape());
    float* p = v->value.ptr();
    const float* g = v->grad.ptr();
    float* mp = m.ptr();
    float* sp = s.ptr();
    for (std::size_t i = 0; i < v->value.numel(); ++i) {
      mp[i] = cfg.beta1 * mp[i] + (1.0f - cfg.beta1) * g[i];
      sp[i] = cfg.beta2 * sp[i] + (1.0f - cfg.beta2) * g[i] * g[i];
      const double mhat = mp[i] / bc1;
      const double shat = sp[i] / bc2;
      p[i] -= static_cast<float>(cfg.lr * mhat / (std::sqrt(shat) + cfg.eps));
    }
  }
}

void ParamGroup::reset_optimizer() {
  m1_.clear();
  m2_.clear();
  steps_ = 0;
}

const Tensor& ParamGroup::first_moment(const std::string& key) const { return m1_.at(key); }
const Tensor& ParamGroup::second_moment(const std::string& key) const { return m2_.at(key); }

std::uint64_t ParamGroup::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [k, v] : params_) h = tensor_hash(v->value, h);
  for (const auto& [k, b] : buffers_) h = tensor_hash(b, h);
  return h;
}

namespace {
std::string file_key(const std::string& key) {
  std::string out = key;
  std::replace(out.begin(), out.end(), '/', '.');
  return out;
}
}  // namespace

void save_param_group(const ParamGroup& group, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["name"] = group.name();
  manifest["frozen"] = group.frozen();
  for (const auto& [key, v] : group.params()) {
    save_tnsr(v->value, dir / (file_key(key) + ".tnsr"));
    manifest["params"].push_back({{"name", key}, {"shape", v->shape()}, {"frozen", group.frozen()}});
  }
  for (const auto& [key, b] : group.buffers()) {
    save_tnsr(b, dir / ("buffer." + file_key(key) + ".tnsr"));
    manifest["buffers"].push_back({{"name", key}, {"shape", b.shape()}});
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

void load_param_group(ParamGroup& group, const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("missing manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(in);
  for (const auto& entry : manifest.at("params")) {
    const auto key = entry.at("name").get<std::string>();
    const Var& v = group.param(key);
    Tensor t = load_tnsr(dir / (file_key(key) + ".tnsr"));
    if (t.shape() != v->shape()) {
      throw ShapeError("checkpoint parameter " + key + " has shape " + shape_str(t.shape()) + ", expected " +
                       shape_str(v->shape()));
    }
    v->value = std::move(t);
  }
  if (manifest.contains("buffers")) {
    for (const auto& entry : manifest.at("buffers")) {
      const auto key = entry.at("name").get<std::string>();
      group.set_buffer(key, load_tnsr(dir / ("buffer." + file_key(key) + ".tnsr")));
    }
  }
  group.set_frozen(manifest.value("frozen", false));
}

}  // namespace triplet
