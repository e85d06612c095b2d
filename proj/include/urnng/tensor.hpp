#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "urnng/error.hpp"

namespace urnng {

/// Dimension list of a dense tensor. Scalars have rank 0; the models here
/// never need more than matrices.
class Shape {
 public:
  static constexpr std::size_t kMaxRank = 2;

  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) {
    if (dims.size() > kMaxRank) throw std::invalid_argument("Shape: rank > 2 is not supported");
    for (auto d : dims) dims_[rank_++] = d;
  }

  std::size_t rank() const { return rank_; }
  std::size_t operator[](std::size_t axis) const { return dims_.at(axis); }

  std::size_t numel() const {
    std::size_t n = 1;
    for (std::size_t a = 0; a < rank_; ++a) n *= dims_[a];
    return n;
  }

  bool operator==(const Shape& o) const {
    if (rank_ != o.rank_) return false;
    for (std::size_t a = 0; a < rank_; ++a)
      if (dims_[a] != o.dims_[a]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t a = 0; a < rank_; ++a) os << (a ? ", " : "") << dims_[a];
    os << ']';
    return os.str();
  }

 private:
  std::array<std::size_t, kMaxRank> dims_{};
  std::size_t rank_ = 0;
};

/// Dense row-major double tensor.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0) : shape_(shape), data_(shape.numel(), fill) {}
  Tensor(Shape shape, std::vector<double> values) : shape_(shape), data_(std::move(values)) {
    if (data_.size() != shape_.numel())
      throw std::invalid_argument("Tensor: " + std::to_string(data_.size()) +
                                  " values do not fill shape " + shape_.str());
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.rank(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const { return shape_.rank() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.rank() == 0 ? 1 : shape_[shape_.rank() - 1]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double item() const {
    if (data_.size() != 1) throw std::invalid_argument("Tensor::item on shape " + shape_.str());
    return data_[0];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double squared_norm() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return s;
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  Shape shape_;
  std::vector<double> data_;
};

}  // namespace urnng
