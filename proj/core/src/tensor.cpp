#include "liar/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>

namespace liar::ad {

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty()) throw std::invalid_argument("tensor: empty shape");
  std::size_t n = 1;
  for (std::size_t d : shape_) {
    if (d == 0) {
      throw std::invalid_argument("tensor: zero extent in shape " +
                                  shape_string(shape_));
    }
    n *= d;
  }
  if (n != data_.size()) {
    throw std::invalid_argument("tensor: shape " + shape_string(shape_) +
                                " needs " + std::to_string(n) +
                                " values, got " + std::to_string(data_.size()));
  }
}

Tensor Tensor::zeros(std::size_t rows, std::size_t cols) {
  return Tensor({rows, cols}, std::vector<double>(rows * cols, 0.0));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

Tensor Tensor::row(std::vector<double> data) {
  const std::size_t n = data.size();
  return Tensor({1, n}, std::move(data));
}

Tensor Tensor::scalar(double value) { return Tensor({1, 1}, {value}); }

std::size_t Tensor::rows() const {
  if (shape_.size() != 2) {
    throw std::invalid_argument("tensor: expected rank 2, got " +
                                shape_string(shape_));
  }
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.size() != 2) {
    throw std::invalid_argument("tensor: expected rank 2, got " +
                                shape_string(shape_));
  }
  return shape_[1];
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw std::invalid_argument("tensor: item() on non-scalar " +
                                shape_string(shape_));
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

}  // namespace liar::ad
