#pragma once

#include <map>
#include <string>
#include <vector>

#include "partleak/params.hpp"

namespace partleak {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;  // decoupled; applied to matrices only
  double clip_norm = 2.0;      // global gradient-norm clip, <= 0 disables
};

/// AdamW over a ParamStore with one learning rate per parameter group.
/// Groups without an entry in `group_lr` (or with rate 0) stay frozen.
class AdamW {
 public:
  AdamW(const ParamStore& store, AdamWConfig cfg, std::map<std::string, double> group_lr);

  /// One update. `lr_factor` multiplies every group rate (schedule).
  /// Returns the pre-clip global gradient norm.
  double step(ParamStore& store, const std::vector<std::vector<double>>& grads, double lr_factor = 1.0);

  std::size_t steps() const { return t_; }

 private:
  AdamWConfig cfg_;
  std::map<std::string, double> group_lr_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Cosine annealing from 1 to 0 over `total` steps.
double cosine_factor(std::size_t step, std::size_t total);
/// Square-root rule: base * sqrt(batch / base_batch).
double sqrt_scaled_lr(double base_lr, std::size_t batch, std::size_t base_batch = 64);

}  // namespace partleak
