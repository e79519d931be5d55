#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace bdlab {

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
};

/// Adam with per-tensor first/second moments and bias correction.
class Adam {
 public:
  Adam(const std::vector<std::size_t>& sizes, AdamConfig config);

  /// One update. `params[i]` and `grads[i]` must have the registered sizes.
  void step(std::span<std::vector<float>* const> params, std::span<const std::vector<float>> grads);

  std::uint64_t steps() const { return step_; }
  const AdamConfig& config() const { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }

 private:
  AdamConfig config_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  std::uint64_t step_ = 0;
};

/// Scales every gradient so the global L2 norm is at most `max_norm`
/// (no-op when max_norm <= 0). Returns the norm before scaling.
double clip_global_norm(std::span<std::vector<float>> grads, double max_norm);

}  // namespace bdlab
