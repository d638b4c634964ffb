#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace efcm {

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const uint8_t*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace detail

enum class Dtype { f32, f64 };

template <typename T>
struct dtype_of;
template <>
struct dtype_of<float> {
  static constexpr Dtype value = Dtype::f32;
  static constexpr const char* name = "f32";
};
template <>
struct dtype_of<double> {
  static constexpr Dtype value = Dtype::f64;
  static constexpr const char* name = "f64";
};

/// Dense row-major n-dimensional array. The element type doubles as the
/// precision tag: float for training paths, double for verification paths.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<size_t> shape) : shape_(std::move(shape)) {
    data_.assign(count(shape_), T(0));
  }

  static Tensor full(std::vector<size_t> shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor from(std::vector<size_t> shape, std::vector<T> data) {
    detail::require(count(shape) == data.size(), "Tensor::from: shape/data size mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
  }

  static Tensor scalar(T v) { return full({1}, v); }

  const std::vector<size_t>& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t extent(size_t i) const { return shape_.at(i); }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  static constexpr Dtype dtype() { return dtype_of<T>::value; }
  static constexpr const char* dtype_name() { return dtype_of<T>::name; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](size_t i) { return data_[i]; }
  const T& operator[](size_t i) const { return data_[i]; }

  // Row-major index helpers for the ranks used in this codebase.
  T& at2(size_t i, size_t j) { return data_[i * shape_[1] + j]; }
  const T& at2(size_t i, size_t j) const { return data_[i * shape_[1] + j]; }
  T& at3(size_t i, size_t j, size_t k) { return data_[(i * shape_[1] + j) * shape_[2] + k]; }
  const T& at3(size_t i, size_t j, size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  T& at4(size_t i, size_t j, size_t k, size_t l) {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  const T& at4(size_t i, size_t j, size_t k, size_t l) const {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  Tensor reshaped(std::vector<size_t> shape) const {
    detail::require(count(shape) == size(), "reshape: element count mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t(shape_);
    for (size_t i = 0; i < size(); ++i) t[i] = static_cast<U>(data_[i]);
    return t;
  }

  uint64_t content_hash() const {
    return detail::fnv1a64(data_.data(), data_.size() * sizeof(T));
  }

  static size_t count(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t e : shape) n *= e;
    return n;
  }

 private:
  std::vector<size_t> shape_;
  std::vector<T> data_;
};

inline std::string shape_str(const std::vector<size_t>& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

/// Deterministic random stream. mt19937_64 supplies the bits; the value
/// mappings below are pinned here instead of relying on std distributions,
/// whose output is implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), gen_(seed) {}

  uint64_t seed() const { return seed_; }
  uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  /// Standard normal via Box-Muller; the spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  /// Uniform integer in [0, n). Rejection-free modulo bias is irrelevant at
  /// the sizes used here, but keep it debiased anyway.
  size_t index(size_t n) {
    detail::require(n > 0, "Rng::index: empty range");
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return static_cast<size_t>(x % n);
  }

  template <typename V>
  void shuffle(std::vector<V>& v) {
    for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

  /// Independent child stream for a named purpose (per-slide seeds etc).
  Rng fork(std::string_view tag) const {
    return Rng(detail::splitmix64(seed_ ^ detail::fnv1a64(tag)));
  }

  Rng fork(std::string_view tag, uint64_t k) const {
    return Rng(detail::splitmix64(detail::splitmix64(seed_ ^ detail::fnv1a64(tag)) + k));
  }

  template <typename T>
  Tensor<T> uniform_tensor(std::vector<size_t> shape, double a, double b) {
    Tensor<T> t(std::move(shape));
    for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(uniform(a, b));
    return t;
  }

  template <typename T>
  Tensor<T> normal_tensor(std::vector<size_t> shape, double mean = 0.0, double std = 1.0) {
    Tensor<T> t(std::move(shape));
    for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(mean + std * normal());
    return t;
  }

 private:
  uint64_t seed_;
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace efcm
