#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dif {

// Error taxonomy. Config errors are bad requests (unknown flag values,
// inconsistent settings), data errors are bad inputs (missing files,
// malformed images, shape mismatches between stored artifacts).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public DataError {
 public:
  using DataError::DataError;
};

class DegenerateInputError : public DataError {
 public:
  using DataError::DataError;
};

inline std::int64_t numel_of(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ")";
  return os.str();
}

// Dense row-major n-d array over a flat Eigen buffer. Rank is dynamic but in
// practice 1 (bias), 3 (C,H,W activations) or 4 (conv weights).
template <class S>
struct Tensor {
  using Array = Eigen::Array<S, Eigen::Dynamic, 1>;

  std::vector<int> shape;
  Array data;

  Tensor() = default;
  explicit Tensor(std::vector<int> shp) : shape(std::move(shp)), data(numel_of(shape)) {
    data.setZero();
  }

  static Tensor zeros(std::vector<int> shp) { return Tensor(std::move(shp)); }

  // For outputs whose every element is written before use.
  static Tensor uninit(std::vector<int> shp) {
    Tensor t;
    t.shape = std::move(shp);
    t.data.resize(numel_of(t.shape));
    return t;
  }

  static Tensor full(std::vector<int> shp, S v) {
    Tensor t(std::move(shp));
    t.data.setConstant(v);
    return t;
  }

  static Tensor from_values(std::vector<int> shp, std::vector<S> vals) {
    Tensor t(std::move(shp));
    if ((std::int64_t)vals.size() != t.numel())
      throw DimensionError("value count does not match shape " + shape_str(t.shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data[i] = vals[i];
    return t;
  }

  std::int64_t numel() const { return data.size(); }
  int rank() const { return (int)shape.size(); }
  int dim(int i) const { return shape[i]; }

  S* ptr() { return data.data(); }
  const S* ptr() const { return data.data(); }

  // Row-major element access for rank 3 / rank 1; hot loops index the flat
  // buffer directly.
  S& at(int c, int i, int j) { return data[((std::int64_t)c * shape[1] + i) * shape[2] + j]; }
  S at(int c, int i, int j) const { return data[((std::int64_t)c * shape[1] + i) * shape[2] + j]; }
  S& at(int i) { return data[i]; }
  S at(int i) const { return data[i]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.data = data.template cast<T>();
    return out;
  }
};

template <class S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* what) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
}

// Seeded RNG with cheap derived streams so each consumer (init, noise, batch
// sampling) owns an independent generator and call order elsewhere cannot
// perturb it.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), eng_(seed) {}

  std::uint64_t seed() const { return seed_; }

  Rng derive(std::uint64_t stream) const {
    std::uint64_t s = seed_;
    s ^= 0x9e3779b97f4a7c15ull + stream + (s << 6) + (s >> 2);
    s *= 0xbf58476d1ce4e5b9ull;
    s ^= s >> 31;
    return Rng(s);
  }

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(eng_);
  }

  double normal(double sigma) {
    return std::normal_distribution<double>(0.0, sigma)(eng_);
  }

  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {  // inclusive range
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(eng_);
  }

  template <class It>
  void shuffle(It first, It last) {
    std::shuffle(first, last, eng_);
  }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 eng_;
};

template <class S>
Tensor<S> random_uniform(std::vector<int> shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Tensor<S> t = Tensor<S>::uninit(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t.data[i] = (S)rng.uniform(lo, hi);
  return t;
}

template <class S>
Tensor<S> random_normal(std::vector<int> shape, Rng& rng, double sigma) {
  Tensor<S> t = Tensor<S>::uninit(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t.data[i] = (S)rng.normal(sigma);
  return t;
}

}  // namespace dif
