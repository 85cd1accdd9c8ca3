#pragma once

#include <cstddef>
#include <vector>

#include "liar/tensor.hpp"

namespace liar::ad {

/// Adam over a fixed list of tensors. Gradients are passed in the same order
/// as the parameters were registered.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void add(Tensor* param);
  void step(const std::vector<const Tensor*>& grads);
  std::size_t steps() const { return t_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<Tensor*> params_;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace liar::ad
