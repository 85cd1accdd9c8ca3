#include "liar/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace liar::ad {

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::add(Tensor* param) {
  params_.push_back(param);
  m_.emplace_back(param->size(), 0.0);
  v_.emplace_back(param->size(), 0.0);
}

void Adam::step(const std::vector<const Tensor*>& grads) {
  if (grads.size() != params_.size()) {
    throw std::invalid_argument("adam: " + std::to_string(grads.size()) +
                                " gradients for " + std::to_string(params_.size()) +
                                " parameters");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto p = params_[k]->data();
    auto g = grads[k]->data();
    if (g.size() != p.size()) {
      throw std::invalid_argument("adam: gradient shape " + shape_string(grads[k]->shape()) +
                                  " does not match parameter " +
                                  shape_string(params_[k]->shape()));
    }
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      p[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

}  // namespace liar::ad
