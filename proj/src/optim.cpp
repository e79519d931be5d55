#include "bdlab/optim.hpp"

#include <cmath>

#include "bdlab/error.hpp"

namespace bdlab {

Adam::Adam(const std::vector<std::size_t>& sizes, AdamConfig config) : config_(config) {
  if (!(config.learning_rate >= 0.0) || config.beta1 < 0.0 || config.beta1 >= 1.0 ||
      config.beta2 < 0.0 || config.beta2 >= 1.0 || config.eps <= 0.0) {
    throw ArgumentError("invalid Adam hyperparameters");
  }
  for (auto n : sizes) {
    m_.emplace_back(n, 0.0f);
    v_.emplace_back(n, 0.0f);
  }
}

void Adam::step(std::span<std::vector<float>* const> params, std::span<const std::vector<float>> grads) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw ArgumentError("Adam step received a different tensor count than registered");
  }
  ++step_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const auto lr = static_cast<float>(config_.learning_rate / c1);
  const auto inv_c2 = static_cast<float>(1.0 / c2);
  const auto eps = static_cast<float>(config_.eps);
  const auto fb1 = static_cast<float>(b1);
  const auto fb2 = static_cast<float>(b2);
  for (std::size_t t = 0; t < m_.size(); ++t) {
    auto& p = *params[t];
    const auto& g = grads[t];
    auto& m = m_[t];
    auto& v = v_[t];
    if (p.size() != m.size() || g.size() != m.size()) {
      throw ArgumentError("Adam step received a tensor of the wrong size");
    }
    if (config_.learning_rate == 0.0) {
      continue;
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = fb1 * m[i] + (1.0f - fb1) * g[i];
      v[i] = fb2 * v[i] + (1.0f - fb2) * g[i] * g[i];
      p[i] -= lr * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
    }
  }
}

double clip_global_norm(std::span<std::vector<float>> grads, double max_norm) {
  double total = 0.0;
  for (const auto& g : grads) {
    for (float x : g) {
      total += static_cast<double>(x) * x;
    }
  }
  const double norm = std::sqrt(total);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto scale = static_cast<float>(max_norm / norm);
    for (auto& g : grads) {
      for (auto& x : g) {
        x *= scale;
      }
    }
  }
  return norm;
}

}  // namespace bdlab
