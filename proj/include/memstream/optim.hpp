#pragma once

// Adam with decoupled weight decay and a cosine learning-rate schedule.

#include <cmath>
#include <vector>

#include "memstream/nn.hpp"

namespace memstream {

struct AdamConfig {
  double base_lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
  long total_steps = 1;
};

/// lr(step) = base · 0.5 · (1 + cos(pi · step/total)); lr(0) = base,
/// lr(total) = 0, monotone nonincreasing in between.
inline double cosine_lr(double base_lr, long step, long total_steps) {
  if (total_steps <= 0) {
    throw ContractError("cosine_lr: total_steps must be positive");
  }
  const double frac =
      std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * frac));
}

class Adam {
public:
  Adam(ParamSet& params, AdamConfig cfg) : params_(&params), cfg_(cfg) {
    if (cfg_.total_steps <= 0) {
      throw ContractError("adam: total_steps must be positive");
    }
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      const long n = params.items()[i].second.numel();
      m_[i].assign(n, 0.0);
      v_[i].assign(n, 0.0);
    }
  }

  long step_count() const { return step_; }
  double lr() const { return cosine_lr(cfg_.base_lr, step_, cfg_.total_steps); }

  void zero_grad() { params_->zero_grad(); }

  /// One update over every registered parameter that carries a gradient.
  /// Parameters with requires_grad=false (frozen) are skipped entirely.
  void step() {
    const double lr_now = lr();
    const long t = step_ + 1;  // bias-correction step index
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t);

    for (std::size_t i = 0; i < params_->size(); ++i) {
      auto& [name, p] = params_->items()[i];
      if (!p.requires_grad()) continue;
      // A parameter that never entered the step's graph (e.g. an adapter
      // while memory is empty) has no grad buffer; leave it untouched.
      if (!p.has_grad()) continue;
      const std::vector<double> g = p.grad();
      std::vector<double>& w = p.data();
      std::vector<double>& m = m_[i];
      std::vector<double>& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        if (!std::isfinite(g[j])) {
          throw NumericError(msg("non-finite gradient in parameter '", name,
                                 "' at flat index ", j));
        }
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        const double m_hat = m[j] / bc1;
        const double v_hat = v[j] / bc2;
        // Decoupled weight decay: the decay term bypasses the moments.
        w[j] -= lr_now * (m_hat / (std::sqrt(v_hat) + cfg_.eps) +
                          cfg_.weight_decay * w[j]);
      }
    }
    ++step_;
  }

private:
  ParamSet* params_;
  AdamConfig cfg_;
  long step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace memstream
