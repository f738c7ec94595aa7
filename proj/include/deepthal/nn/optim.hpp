#pragma once

#include "deepthal/nn/autograd.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace deepthal::nn {

enum class OptimizerKind { adamax, adam };

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::adamax;
  double learning_rate = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-7;
};

/// Adam and its infinity-norm variant Adamax. Adamax replaces the second
/// moment with an exponentially decayed running max of |g|:
///   m <- b1 m + (1 - b1) g,  u <- max(b2 u, |g|),  theta -= lr / (1 - b1^t) * m / (u + eps)
template <typename Scalar>
class Optimizer {
 public:
  Optimizer(std::vector<Var<Scalar>> params, OptimizerSettings settings)
      : params_(std::move(params)), s_(settings) {
    if (!(s_.learning_rate > 0)) throw std::invalid_argument("optimizer: learning rate must be positive");
    for (const auto& p : params_) {
      m_.push_back(RowMatrix<Scalar>::Zero(p->value.data.rows(), p->value.data.cols()));
      v_.push_back(RowMatrix<Scalar>::Zero(p->value.data.rows(), p->value.data.cols()));
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(s_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(s_.beta2, double(t_));
    const Scalar b1 = Scalar(s_.beta1), b2 = Scalar(s_.beta2), eps = Scalar(s_.eps);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p->has_grad()) continue;
      const auto& g = p->grad.data;
      m_[i] = b1 * m_[i] + (Scalar(1) - b1) * g;
      if (s_.kind == OptimizerKind::adamax) {
        v_[i] = (b2 * v_[i]).cwiseMax(g.cwiseAbs());
        const Scalar lr = Scalar(s_.learning_rate / bc1);
        p->value.data.array() -= lr * m_[i].array() / (v_[i].array() + eps);
      } else {
        v_[i] = b2 * v_[i] + (Scalar(1) - b2) * g.cwiseAbs2();
        const Scalar lr = Scalar(s_.learning_rate / bc1);
        p->value.data.array() -= lr * m_[i].array() / ((v_[i].array() / Scalar(bc2)).sqrt() + eps);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  long steps() const { return t_; }

 private:
  std::vector<Var<Scalar>> params_;
  OptimizerSettings s_;
  std::vector<RowMatrix<Scalar>> m_, v_;
  long t_ = 0;
};

}  // namespace deepthal::nn
