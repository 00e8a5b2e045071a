#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include <Eigen/Dense>

namespace cfx {

/// Adaptive-moment gradient descent over a fixed set of parameter blocks.
/// Each block is identified by the slot index passed to step().
class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Advances the shared step counter; call once per iteration before the step() calls.
  void tick() { ++t_; }

  template <class Derived, class GradDerived>
  void step(std::size_t slot, Eigen::PlainObjectBase<Derived>& param, const Eigen::MatrixBase<GradDerived>& grad) {
    if (slot >= m_.size()) {
      m_.resize(slot + 1);
      v_.resize(slot + 1);
    }
    auto& m = m_[slot];
    auto& v = v_[slot];
    const auto size = param.size();
    if (m.size() != size) {
      m = Eigen::ArrayXd::Zero(size);
      v = Eigen::ArrayXd::Zero(size);
    }
    const typename Derived::PlainObject grad_plain = grad;
    const Eigen::Map<const Eigen::ArrayXd> gv(grad_plain.data(), size);
    m = beta1_ * m + (1.0 - beta1_) * gv;
    v = beta2_ * v + (1.0 - beta2_) * gv.square();
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    Eigen::Map<Eigen::ArrayXd> p(param.data(), size);
    p -= lr_ * (m / bc1) / ((v / bc2).sqrt() + eps_);
  }

 private:
  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  long t_ = 0;
  std::vector<Eigen::ArrayXd> m_;
  std::vector<Eigen::ArrayXd> v_;
};

}  // namespace cfx
