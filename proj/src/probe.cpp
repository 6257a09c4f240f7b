#include "partleak/probe.hpp"

#include <cmath>

#include "partleak/ops.hpp"
#include "partleak/optim.hpp"
#include "partleak/params.hpp"

namespace partleak::leak {

std::vector<double> LinearProbe::logits(std::span<const double> features) const {
  if (dim == 0 || features.size() % dim != 0) throw ValidationError("LinearProbe: feature size mismatch");
  const std::size_t n = features.size() / dim;
  std::vector<double> out(n * attributes);
  std::vector<double> x(dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < dim; ++d) x[d] = (features[i * dim + d] - mean[d]) / scale[d];
    for (std::size_t a = 0; a < attributes; ++a) {
      double s = bias[a];
      for (std::size_t d = 0; d < dim; ++d) s += x[d] * weight[d * attributes + a];
      out[i * attributes + a] = s;
    }
  }
  return out;
}

LinearProbe train_probe(std::span<const double> features, std::span<const double> labels, std::size_t n,
                        std::size_t dim, std::size_t attributes, const ProbeConfig& cfg) {
  if (n == 0 || dim == 0 || attributes == 0) throw ValidationError("train_probe: empty problem");
  if (features.size() != n * dim || labels.size() != n * attributes) {
    throw ValidationError("train_probe: buffer sizes do not match n, dim, attributes");
  }
  bool usable = false;
  for (std::size_t a = 0; a < attributes && !usable; ++a) {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) pos += labels[i * attributes + a] > 0.5;
    usable = pos > 0 && pos < n;
  }
  if (!usable) throw ValidationError("train_probe: every attribute is constant over the training set");

  LinearProbe probe;
  probe.dim = dim;
  probe.attributes = attributes;
  probe.mean.assign(dim, 0.0);
  probe.scale.assign(dim, 1.0);
  for (std::size_t d = 0; d < dim; ++d) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += features[i * dim + d];
    probe.mean[d] = s / static_cast<double>(n);
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double c = features[i * dim + d] - probe.mean[d];
      v += c * c;
    }
    const double sd = std::sqrt(v / static_cast<double>(n));
    probe.scale[d] = sd > 1e-12 ? sd : 1.0;
  }
  std::vector<double> x(features.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < dim; ++d) x[i * dim + d] = (features[i * dim + d] - probe.mean[d]) / probe.scale[d];

  Rng rng(cfg.seed, 0x9b0be);
  ParamStore store;
  std::vector<double> w(dim * attributes);
  for (auto& v : w) v = rng.normal(0.0, 0.01);
  store.add("w", {dim, attributes}, std::move(w), "probe");
  store.add("b", {attributes}, std::vector<double>(attributes, 0.0), "probe");
  AdamWConfig oc;
  oc.weight_decay = 0.0;
  oc.clip_norm = 0.0;
  AdamW opt(store, oc, {{"probe", cfg.lr}});
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    ad::Tape tape;
    BoundParams p = store.bind(tape, true);
    ad::Tensor xt = tape.constant({n, dim}, x);
    ad::Tensor loss = ad::bce_with_logits(ad::linear(xt, p["w"], p["b"]), labels);
    tape.backward(loss);
    opt.step(store, store.gradients(tape, p));
  }
  probe.weight = store.get("w").value;
  probe.bias = store.get("b").value;
  return probe;
}

}  // namespace partleak::leak
