#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cloakforge/autodiff.hpp"

namespace cloakforge {

enum class OptimizerKind { kSgd, kAdam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::kSgd ? "sgd" : "adam"; }

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "adam") return OptimizerKind::kAdam;
  throw std::invalid_argument("unknown optimizer '" + s + "'");
}

// Momentum-free gradient descent, or Adam. Parameters without a gradient (or
// not requiring one) are skipped. State grows if a parameter grows (token
// table gaining rows).
template <class S>
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : kind_(kind), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::vector<ad::Var<S>>& params) {
    ++t_;
    if (m_.size() < params.size()) {
      m_.resize(params.size());
      v_.resize(params.size());
    }
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (!p.requires_grad() || p.grad().empty()) continue;
      auto& value = p.mutable_value();
      const auto& g = p.grad();
      if (kind_ == OptimizerKind::kSgd) {
        for (std::size_t k = 0; k < value.size(); ++k) value[k] -= static_cast<S>(lr_ * g[k]);
        continue;
      }
      if (m_[i].size() != value.size()) {
        m_[i].resize(value.size(), 0.0);
        v_[i].resize(value.size(), 0.0);
      }
      for (std::size_t k = 0; k < value.size(); ++k) {
        const double gk = g[k];
        m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * gk;
        v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * gk * gk;
        value[k] -= static_cast<S>(lr_ * (m_[i][k] / bc1) / (std::sqrt(v_[i][k] / bc2) + eps_));
      }
    }
  }

  void set_learning_rate(double lr) { lr_ = lr; }
  double learning_rate() const { return lr_; }

 private:
  OptimizerKind kind_;
  double lr_, beta1_, beta2_, eps_;
  long long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace cloakforge
