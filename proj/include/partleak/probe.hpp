#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace partleak::leak {

struct ProbeConfig {
  std::size_t epochs = 200;
  double lr = 1e-2;
  std::uint64_t seed = 0;
};

/// Linear map R^D -> R^A on standardised features.
struct LinearProbe {
  std::size_t dim = 0, attributes = 0;
  std::vector<double> mean, scale;  // per-dimension standardisation
  std::vector<double> weight;       // [D, A]
  std::vector<double> bias;         // [A]

  /// Logits [N, A] for row-major features [N, D].
  std::vector<double> logits(std::span<const double> features) const;
};

/// Full-batch Adam on mean BCE-with-logits. Features [N, D] and 0/1 labels
/// [N, A], row-major. Throws when no attribute has both classes.
LinearProbe train_probe(std::span<const double> features, std::span<const double> labels, std::size_t n,
                        std::size_t dim, std::size_t attributes, const ProbeConfig& cfg = {});

}  // namespace partleak::leak
