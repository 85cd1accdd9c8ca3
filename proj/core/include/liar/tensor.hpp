#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace liar::ad {

/// Dense row-major array of doubles. Every differentiable op in this library
/// works on rank-2 tensors; vectors are 1 x n and scalars are 1 x 1.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor zeros(std::size_t rows, std::size_t cols);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> data);
  static Tensor row(std::vector<double> data);
  static Tensor scalar(double value);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }
  double& operator()(std::size_t r, std::size_t c) {
    return data_[r * shape_[1] + c];
  }
  double item() const;

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  std::span<const double> row_span(std::size_t r) const {
    return {data_.data() + r * shape_[1], shape_[1]};
  }
  std::span<double> row_span(std::size_t r) {
    return {data_.data() + r * shape_[1], shape_[1]};
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

/// "[4x3]" style rendering used in error messages.
std::string shape_string(const std::vector<std::size_t>& shape);

}  // namespace liar::ad
