#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "msm/tensor.hpp"

namespace msm {

/// Named learnable tensor. Models register parameters in a fixed order so
/// checkpoints and optimizer state stay aligned.
struct NamedParam {
  std::string name;
  Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

/// AdamW with decoupled weight decay and linear LR warmup
/// (lr = lr_target * min(1, step / warmup_steps), step counted from 1).
class AdamW {
 public:
  struct Config {
    double lr_target = 2e-4;
    int warmup_steps = 2000;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double weight_decay = 1e-2;
  };

  AdamW() = default;
  explicit AdamW(Config cfg) : cfg_(cfg) {}

  double lr_at(int64_t step) const {
    const double frac = cfg_.warmup_steps > 0
                            ? std::min(1.0, static_cast<double>(step) / cfg_.warmup_steps)
                            : 1.0;
    return cfg_.lr_target * frac;
  }

  int64_t step_count() const { return step_; }
  int64_t skipped_steps() const { return skipped_; }
  const Config& config() const { return cfg_; }

  /// Applies one update. A non-finite gradient anywhere skips the whole step
  /// and records it; parameters and moments stay untouched.
  void step(ParamList& params) {
    ensure_state(params);
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (float g : p.tensor.grad())
        if (!std::isfinite(g)) {
          ++skipped_;
          return;
        }
    }
    ++step_;
    const double lr = lr_at(step_);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t pi = 0; pi < params.size(); ++pi) {
      auto& t = params[pi].tensor;
      if (!t.has_grad()) continue;
      auto& m = m_[pi];
      auto& v = v_[pi];
      const auto& g = t.grad();
      float* w = t.data();
      for (size_t i = 0; i < g.size(); ++i) {
        const double gi = g[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        double wi = w[i];
        wi -= lr * cfg_.weight_decay * wi;
        wi -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        w[i] = static_cast<float>(wi);
      }
    }
  }

  void zero_grad(ParamList& params) {
    for (auto& p : params) p.tensor.zero_grad();
  }

 private:
  void ensure_state(const ParamList& params) {
    if (m_.size() == params.size()) return;
    m_.clear();
    v_.clear();
    for (const auto& p : params) {
      m_.emplace_back(p.tensor.values().size(), 0.0);
      v_.emplace_back(p.tensor.values().size(), 0.0);
    }
  }

  Config cfg_{};
  int64_t step_ = 0;
  int64_t skipped_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace msm
