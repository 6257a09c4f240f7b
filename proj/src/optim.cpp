#include "partleak/optim.hpp"

#include <cmath>
#include <numbers>

namespace partleak {

AdamW::AdamW(const ParamStore& store, AdamWConfig cfg, std::map<std::string, double> group_lr)
    : cfg_(cfg), group_lr_(std::move(group_lr)) {
  for (const auto& p : store.all()) {
    m_.emplace_back(p.value.size(), 0.0);
    v_.emplace_back(p.value.size(), 0.0);
  }
}

double AdamW::step(ParamStore& store, const std::vector<std::vector<double>>& grads, double lr_factor) {
  auto& params = store.all();
  if (grads.size() != params.size() || m_.size() != params.size()) {
    throw ValidationError("AdamW: gradient list does not match the parameter store");
  }
  auto rate = [&](const Parameter& p) {
    auto it = group_lr_.find(p.group);
    return it == group_lr_.end() ? 0.0 : it->second;
  };
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (rate(params[i]) <= 0) continue;
    for (double g : grads[i]) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericalError("AdamW: non-finite gradient norm");
  const double clip = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / (norm + 1e-6) : 1.0;

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const double lr = rate(p) * lr_factor;
    if (rate(p) <= 0) continue;
    const bool decay = p.shape.size() >= 2;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = grads[i][j] * clip;
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
      if (decay) p.value[j] -= lr * cfg_.weight_decay * p.value[j];
      p.value[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
    }
  }
  return norm;
}

double cosine_factor(std::size_t step, std::size_t total) {
  if (total == 0) return 1.0;
  const double x = static_cast<double>(std::min(step, total)) / static_cast<double>(total);
  return 0.5 * (1.0 + std::cos(std::numbers::pi * x));
}

double sqrt_scaled_lr(double base_lr, std::size_t batch, std::size_t base_batch) {
  return base_lr * std::sqrt(static_cast<double>(batch) / static_cast<double>(base_batch));
}

}  // namespace partleak
