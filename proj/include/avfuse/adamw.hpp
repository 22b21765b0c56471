#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "avfuse/tensor.hpp"

namespace avfuse {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// First/second moment estimates, one pair per parameter tensor.
template <typename Scalar>
struct AdamWState {
  std::int64_t step_count = 0;
  std::vector<Tensor<Scalar>> m;
  std::vector<Tensor<Scalar>> v;

  static AdamWState like(const std::vector<Tensor<Scalar>*>& params) {
    AdamWState s;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const auto* p : params) {
      s.m.push_back(Tensor<Scalar>(p->shape()));
      s.v.push_back(Tensor<Scalar>(p->shape()));
    }
    return s;
  }
};

// One optimizer step with decoupled weight decay:
//   m <- b1 m + (1-b1) g            v <- b2 v + (1-b2) g^2
//   theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
// Decay is scaled by the learning rate, so lr = 0 leaves parameters untouched.
template <typename Scalar>
void adamw_step(const std::vector<Tensor<Scalar>*>& params,
                const std::vector<const Tensor<Scalar>*>& grads, AdamWState<Scalar>& state,
                const AdamWConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size() ||
      params.size() != state.v.size()) {
    throw ContractError("adamw_step: params/grads/state sizes disagree");
  }
  state.step_count += 1;
  const auto t = state.step_count;
  const Scalar b1 = static_cast<Scalar>(cfg.beta1);
  const Scalar b2 = static_cast<Scalar>(cfg.beta2);
  const Scalar lr = static_cast<Scalar>(cfg.lr);
  const Scalar eps = static_cast<Scalar>(cfg.eps);
  const Scalar wd = static_cast<Scalar>(cfg.weight_decay);
  const Scalar c1 = Scalar(1) - std::pow(b1, Scalar(t));
  const Scalar c2 = Scalar(1) - std::pow(b2, Scalar(t));

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<Scalar>& p = *params[i];
    const Tensor<Scalar>& g = *grads[i];
    require_same_shape(p, g, "adamw_step");
    require_same_shape(p, state.m[i], "adamw_step");
    auto pm = p.flat();
    auto gm = g.flat();
    auto m = state.m[i].flat();
    auto v = state.v[i].flat();
    m = b1 * m + (Scalar(1) - b1) * gm;
    v = b2 * v + (Scalar(1) - b2) * gm.square();
    pm -= lr * ((m / c1) / ((v / c2).sqrt() + eps) + wd * pm);
  }
}

}  // namespace avfuse
