#pragma once

#include <cmath>
#include <vector>

#include "rarelens/errors.hpp"
#include "rarelens/tensor.hpp"

namespace rarelens {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adam with decoupled weight decay.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }

  // One update of `params` (in place) with `grads`, in matching order.
  // `lr_scale` multiplies the configured learning rate (schedules).
  void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, double lr_scale = 1.0) {
    if (params.size() != grads.size()) throw ContractError("AdamW: params/grads count mismatch");
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->size(), 0.0);
        v_.emplace_back(p->size(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw ContractError("AdamW: parameter set changed between steps");
    ++t_;
    const double lr = cfg_.lr * lr_scale;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto p = params[k]->data();
      const auto g = grads[k].data();
      if (g.size() != p.size()) throw DimensionError("AdamW: gradient shape mismatch");
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1, vhat = v[i] / bc2;
        p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[i]);
      }
    }
  }

  long steps() const { return t_; }

 private:
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace rarelens
