#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "triplet/tensor.hpp"

namespace triplet {

/// A value in the computation graph. Leaves with requires_grad accumulate
/// gradients across backward passes until zero_grad().
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  /// Scalar reductions also keep their double-precision result here
  /// (NaN otherwise); finite-difference checks read it to avoid float32
  /// rounding of the final sum.
  double precise = std::numeric_limits<double>::quiet_NaN();

  Node() = default;
  Node(Tensor v, bool rg) : value(std::move(v)), requires_grad(rg) {}

  /// Gradient buffer, allocated as zeros on first use.
  Tensor& grad_buffer();
  void accumulate(const Tensor& g);
  void zero_grad() { grad = Tensor(); }
  bool has_grad() const { return !grad.empty(); }
  const Shape& shape() const { return value.shape(); }
};

using Var = std::shared_ptr<Node>;

Var make_var(Tensor value, bool requires_grad = false);

/// Value of a one-element node, preferring the double-precision copy.
double scalar_value(const Var& v);

/// Ordered record of primitive applications for reverse-mode differentiation.
///
/// A disabled tape records nothing; primitives then act as plain forward
/// functions. One tape belongs to one training context.
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor& out_grad)>;

  explicit Tape(bool enabled = true) : enabled_(enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool enabled() const { return enabled_; }
  std::size_t size() const { return entries_.size(); }

  /// Wraps `value` as the output of a primitive applied to `inputs`. The
  /// backward closure receives d(loss)/d(output) and must accumulate into
  /// the inputs it captured (only those with requires_grad).
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn fn);

  /// Populates grads of every requires_grad leaf reachable from `loss` and
  /// consumes the tape. `loss` must hold exactly one element.
  void backward(const Var& loss);

  /// Gradient of `loss` with respect to `wrt` alone, leaving every grad
  /// buffer on the tape cleared and the tape intact. Expects grads to be
  /// clear on entry (call before backward()).
  Tensor gradient(const Var& loss, const Var& wrt);

  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::vector<Var> inputs;
    Var output;
    BackwardFn fn;
  };

  void run_reverse(const Var& loss, std::size_t stop);

  bool enabled_;
  std::vector<Entry> entries_;
};

inline bool needs_grad(const Var& v) { return v && v->requires_grad; }

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// Named parameter collection for one network plus its Adam moments and
/// non-trainable buffers (normalization running statistics).
class ParamGroup {
 public:
  explicit ParamGroup(std::string name = {}) : name_(std::move(name)) {}

  const std::string& name() const { return name_; }

  Var add(const std::string& key, Tensor init);
  const Var& param(const std::string& key) const;
  bool has_param(const std::string& key) const { return index_.count(key) != 0; }

  Tensor& buffer(const std::string& key);
  const Tensor& buffer(const std::string& key) const;
  void set_buffer(const std::string& key, Tensor value);
  bool has_buffer(const std::string& key) const { return buffers_.count(key) != 0; }

  const std::vector<std::pair<std::string, Var>>& params() const { return params_; }
  const std::map<std::string, Tensor>& buffers() const { return buffers_; }
  std::size_t param_count() const;

  bool frozen() const { return frozen_; }
  void set_frozen(bool f);

  void zero_grad();

  /// One Adam update over every parameter. No-op when frozen.
  void adam_step(const AdamConfig& cfg);
  /// Drops moments and the step counter.
  void reset_optimizer();
  std::int64_t optimizer_steps() const { return steps_; }
  const Tensor& first_moment(const std::string& key) const;
  const Tensor& second_moment(const std::string& key) const;

  /// Hash over all parameter values and buffers in insertion order.
  std::uint64_t hash() const;

 private:
  std::string name_;
  std::vector<std::pair<std::string, Var>> params_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, Tensor> buffers_;
  std::map<std::string, Tensor> m1_;
  std::map<std::string, Tensor> m2_;
  std::int64_t steps_ = 0;
  bool frozen_ = false;
};

void save_param_group(const ParamGroup& group, const std::filesystem::path& dir);
/// Loads values into an already-constructed group; names and shapes must match.
void load_param_group(ParamGroup& group, const std::filesystem::path& dir);

}  // namespace triplet
