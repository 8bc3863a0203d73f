#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <vector>

#include "unseg/core/check.hpp"

namespace unseg {

/// Dense row-major tensor. Rank and sizes are dynamic; data is contiguous.
/// Image-like tensors use H x W x C order throughout the project.
template <typename T>
struct Tensor {
  std::vector<std::int64_t> dims;
  std::vector<T> v;

  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> d) : dims(std::move(d)), v(count(dims), T(0)) {}
  Tensor(std::vector<std::int64_t> d, T fill) : dims(std::move(d)), v(count(dims), fill) {}
  Tensor(std::vector<std::int64_t> d, std::vector<T> data) : dims(std::move(d)), v(std::move(data)) {
    check(static_cast<std::int64_t>(v.size()) == count(dims), "tensor data does not match shape");
  }

  static std::int64_t count(const std::vector<std::int64_t>& d) {
    std::int64_t n = 1;
    for (auto x : d) n *= x;
    return n;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
  std::int64_t dim(int i) const { return dims[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(dims.size()); }
  bool same_shape(const Tensor& o) const { return dims == o.dims; }

  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  T& operator[](std::int64_t i) { return v[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return v[static_cast<std::size_t>(i)]; }

  // 2-d and 3-d accessors; callers are responsible for matching rank.
  T& at(std::int64_t i, std::int64_t j) { return v[static_cast<std::size_t>(i * dims[1] + j)]; }
  const T& at(std::int64_t i, std::int64_t j) const { return v[static_cast<std::size_t>(i * dims[1] + j)]; }
  T& at(std::int64_t i, std::int64_t j, std::int64_t k) {
    return v[static_cast<std::size_t>((i * dims[1] + j) * dims[2] + k)];
  }
  const T& at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return v[static_cast<std::size_t>((i * dims[1] + j) * dims[2] + k)];
  }

  void fill(T x) { std::fill(v.begin(), v.end(), x); }

  void add_scaled(const Tensor& o, T s) {
    check(same_shape(o), "add_scaled: shape mismatch");
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += s * o.v[i];
  }

  T max_abs() const {
    T m = 0;
    for (T x : v) m = std::max(m, std::abs(x));
    return m;
  }

  bool all_finite() const {
    for (T x : v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.dims = dims;
    out.v.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
    return out;
  }

  static Tensor zeros(std::vector<std::int64_t> d) { return Tensor(std::move(d)); }
  static Tensor full(std::vector<std::int64_t> d, T x) { return Tensor(std::move(d), x); }

  static Tensor randn(std::vector<std::int64_t> d, T stddev, std::mt19937_64& rng) {
    Tensor t(std::move(d));
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    for (auto& x : t.v) x = static_cast<T>(dist(rng));
    return t;
  }

  static Tensor rand_uniform(std::vector<std::int64_t> d, T lo, T hi, std::mt19937_64& rng) {
    Tensor t(std::move(d));
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    for (auto& x : t.v) x = static_cast<T>(dist(rng));
    return t;
  }
};

}  // namespace unseg
