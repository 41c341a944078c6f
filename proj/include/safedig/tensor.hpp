#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace safedig {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct PrecisionError : std::runtime_error {
  explicit PrecisionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dense row-major float32 tensor. Values are validated to be finite at
// construction; every public operation returns a freshly validated tensor.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(count(shape_), 0.0f) {}

  Tensor(std::vector<std::size_t> shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (count(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape volume " + std::to_string(count(shape_)));
    }
    validate_finite();
  }

  static Tensor scalar(float v) { return Tensor({1}, {v}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  const std::vector<float>& data() const { return data_; }
  std::vector<float>& data() { return data_; }

  float operator[](std::size_t i) const { return data_[i]; }
  float& operator[](std::size_t i) { return data_[i]; }

  float at2(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  float& at2(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }

  float at3(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  float& at3(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  Tensor reshaped(std::vector<std::size_t> shape) const {
    if (count(shape) != data_.size()) {
      throw ShapeError("reshape volume mismatch");
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  // Row i of a rank-2 tensor as a rank-1 view copy.
  Tensor row(std::size_t i) const {
    if (rank() != 2) throw ShapeError("row() needs a rank-2 tensor");
    std::size_t c = shape_[1];
    return Tensor({c}, std::vector<float>(data_.begin() + i * c, data_.begin() + (i + 1) * c));
  }

  void validate_finite() const {
    for (float v : data_) {
      if (!std::isfinite(v)) {
        throw PrecisionError("non-finite value in tensor");
      }
    }
  }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, std::size_t b) { return a * b; });
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<float> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch");
  }
}

// Row-major product with deterministic left-to-right accumulation over the
// inner index (double accumulator, rounded to f32 at store).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: both operands must be rank-2");
  }
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions disagree (" + std::to_string(a.dim(1)) +
                     " vs " + std::to_string(b.dim(0)) + ")");
  }
  std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        acc += static_cast<double>(a.at2(i, p)) * static_cast<double>(b.at2(p, j));
      }
      out.at2(i, j) = static_cast<float>(acc);
    }
  }
  out.validate_finite();
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  out.validate_finite();
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  out.validate_finite();
  return out;
}

inline Tensor scale(const Tensor& a, float s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  out.validate_finite();
  return out;
}

inline double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return acc;
}

inline double l2_norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

inline double cosine(const Tensor& a, const Tensor& b) {
  double na = l2_norm(a), nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) {
    throw PrecisionError("cosine of a zero vector is undefined");
  }
  return dot(a, b) / (na * nb);
}

inline Tensor normalized(const Tensor& a) {
  double n = l2_norm(a);
  if (n == 0.0) throw PrecisionError("cannot normalize a zero vector");
  return scale(a, static_cast<float>(1.0 / n));
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose needs a rank-2 tensor");
  Tensor out({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) out.at2(j, i) = a.at2(i, j);
  return out;
}

inline Tensor identity(std::size_t n) {
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i) out.at2(i, i) = 1.0f;
  return out;
}

// Mean over the leading axis of a rank-2 tensor: (n, d) -> (d).
inline Tensor mean_rows(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("mean_rows needs a rank-2 tensor");
  std::size_t n = a.dim(0), d = a.dim(1);
  if (n == 0) throw ShapeError("mean_rows over zero rows");
  Tensor out({d});
  for (std::size_t j = 0; j < d; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += a.at2(i, j);
    out[j] = static_cast<float>(acc / static_cast<double>(n));
  }
  return out;
}

}  // namespace safedig
