#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace triplet {

using Shape = std::vector<std::int64_t>;

/// Raised by every primitive whose operands have incompatible shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_str(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);

/// Dense row-major float32 array with shape metadata.
///
/// Tensors are plain values: copying copies the buffer. The autodiff layer
/// (see autograd.hpp) wraps them in shared nodes when identity matters.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0f); }
  static Tensor scalar(float v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t dim(std::size_t axis) const;
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* ptr() { return data_.data(); }
  const float* ptr() const { return data_.data(); }
  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  std::vector<float>& vec() { return data_; }
  const std::vector<float>& vec() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  /// Element access for rank-5 tensors laid out as [B,C,D,H,W].
  float& at(std::int64_t b, std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w);
  float at(std::int64_t b, std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w) const;

  /// Same buffer, new shape. Element count must match.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  void fill(float v);
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  double sum() const;
  double mean() const;
  float max() const;
  float min() const;
  float abs_max() const;
  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<float> data_;
};

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

/// Writes the TNSR container: "TNSR", u8 version=1, u8 rank,
/// rank x u64 extents (little-endian), then float32 little-endian data.
void save_tnsr(const Tensor& t, const std::filesystem::path& path);
Tensor load_tnsr(const std::filesystem::path& path);

/// 64-bit FNV-1a over shape and raw bytes; used for parameter-freeze checks.
std::uint64_t tensor_hash(const Tensor& t, std::uint64_t seed = 1469598103934665603ULL);

}  // namespace triplet
