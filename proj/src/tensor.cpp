#include "triplet/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace triplet {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

Tensor::Tensor(Shape shape, float fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
  }
}

std::int64_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  }
  return shape_[axis];
}

float& Tensor::at(std::int64_t b, std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w) {
  return data_[static_cast<std::size_t>(
      (((b * shape_[1] + c) * shape_[2] + d) * shape_[3] + h) * shape_[4] + w)];
}

float Tensor::at(std::int64_t b, std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w) const {
  return data_[static_cast<std::size_t>(
      (((b * shape_[1] + c) * shape_[2] + d) * shape_[3] + h) * shape_[4] + w)];
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  if (shape_numel(shape) != static_cast<std::int64_t>(data_.size())) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  shape_ = std::move(shape);
  return std::move(*this);
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

double Tensor::sum() const {
  double s = 0.0;
  for (float v : data_) s += v;
  return s;
}

double Tensor::mean() const { return data_.empty() ? 0.0 : sum() / static_cast<double>(data_.size()); }

float Tensor::max() const { return *std::max_element(data_.begin(), data_.end()); }
float Tensor::min() const { return *std::min_element(data_.begin(), data_.end()); }

float Tensor::abs_max() const {
  float m = 0.0f;
  for (float v : data_) m = std::max(m, std::fabs(v));
  return m;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

namespace {

static_assert(std::endian::native == std::endian::little, "TNSR I/O assumes a little-endian host");

constexpr char kMagic[4] = {'T', 'N', 'S', 'R'};
constexpr std::uint8_t kVersion = 1;

}  // namespace

void save_tnsr(const Tensor& t, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  const std::uint8_t version = kVersion;
  const auto rank = static_cast<std::uint8_t>(t.rank());
  out.write(reinterpret_cast<const char*>(&version), 1);
  out.write(reinterpret_cast<const char*>(&rank), 1);
  for (auto e : t.shape()) {
    const auto u = static_cast<std::uint64_t>(e);
    out.write(reinterpret_cast<const char*>(&u), sizeof(u));
  }
  out.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Tensor load_tnsr(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  std::uint8_t version = 0;
  std::uint8_t rank = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 1);
  in.read(reinterpret_cast<char*>(&rank), 1);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error(path.string() + ": not a TNSR file");
  if (version != kVersion) throw std::runtime_error(path.string() + ": unsupported TNSR version");
  Shape shape(rank);
  for (auto& e : shape) {
    std::uint64_t u = 0;
    in.read(reinterpret_cast<char*>(&u), sizeof(u));
    e = static_cast<std::int64_t>(u);
  }
  std::vector<float> data(static_cast<std::size_t>(shape_numel(shape)));
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!in) throw std::runtime_error(path.string() + ": truncated TNSR payload");
  return Tensor(std::move(shape), std::move(data));
}

std::uint64_t tensor_hash(const Tensor& t, std::uint64_t seed) {
  std::uint64_t h = seed;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (auto e : t.shape()) mix(&e, sizeof(e));
  mix(t.ptr(), t.numel() * sizeof(float));
  return h;
}

}  // namespace triplet
