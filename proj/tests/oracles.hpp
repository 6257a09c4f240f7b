#pragma once

// Brute-force reference implementations of the leakage metrics. Written
// independently of the library code (pairwise counting, per-sample sums)
// so agreement is meaningful.

#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "partleak/leakmetrics.hpp"

namespace partleak::testing::oracle {

using ld = long double;

/// Precision at each positive's rank, ranks from pairwise comparison (ties
/// resolved by input order). Returns -1 without positives.
inline double average_precision(const std::vector<double>& s, const std::vector<double>& y) {
  const std::size_t n = s.size();
  auto before = [&](std::size_t j, std::size_t i) { return s[j] > s[i] || (s[j] == s[i] && j < i); };
  ld sum = 0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (y[i] < 0.5) continue;
    ++pos;
    std::size_t rank = 1, hits = 1;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i || !before(j, i)) continue;
      ++rank;
      hits += y[j] > 0.5;
    }
    sum += ld(hits) / rank;
  }
  return pos ? double(sum / pos) : -1.0;
}

/// c[g][k] by scanning every mask cell and comparing with the keypoint.
inline std::vector<double> contingency(const leak::KeypointSet& kp, const std::vector<std::uint8_t>& masks,
                                       std::size_t K, std::size_t H, std::size_t W) {
  const std::size_t N = kp.samples, G = kp.parts;
  std::vector<double> c(G * K, 0.0);
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t k = 0; k < K; ++k) {
      std::size_t vis = 0, hit = 0;
      for (std::size_t s = 0; s < N; ++s) {
        if (!kp.visible[s * G + g]) continue;
        ++vis;
        for (std::size_t r = 0; r < H; ++r)
          for (std::size_t q = 0; q < W; ++q)
            if (int(r) == kp.row[s * G + g] && int(q) == kp.col[s * G + g] && masks[((s * K + k) * H + r) * W + q])
              ++hit;
      }
      c[g * K + k] = double(hit) / double(vis);
    }
  return c;
}

/// PS with K+ / K- rebuilt from c and tau.
inline double part_specificity(const std::vector<double>& map, const std::vector<double>& c, std::size_t K,
                               std::size_t G, double tau) {
  ld total = 0;
  for (std::size_t g = 0; g < G; ++g) {
    ld sp = 0, sm = 0;
    std::size_t np = 0, nm = 0;
    for (std::size_t k = 0; k < K; ++k) {
      if (c[g * K + k] > tau) {
        sp += map[k * G + g];
        ++np;
      } else {
        sm += map[k * G + g];
        ++nm;
      }
    }
    total += sp / np - sm / nm;
  }
  return double(total / G);
}

/// MPPO with per-sample k*: highest logit, first index on ties, overlap by
/// counting shared cells.
inline double mppo(const std::vector<double>& logits, const std::vector<double>& labels,
                   const std::vector<std::uint8_t>& disc, const std::vector<std::uint8_t>& gt, std::size_t n,
                   std::size_t K, std::size_t cells, const leak::AttributeSpec& spec) {
  const std::size_t A = spec.size(), G = spec.groups;
  ld total = 0;
  std::size_t used = 0;
  for (std::size_t a = 0; a < A; ++a) {
    std::size_t present = 0, hit = 0;
    for (std::size_t s = 0; s < n; ++s) {
      if (labels[s * A + a] != 1.0) continue;
      ++present;
      std::size_t best = 0;
      for (std::size_t k = 0; k < K; ++k) {
        bool is_max = true;
        for (std::size_t j = 0; j < K; ++j) {
          const double lj = logits[(s * K + j) * A + a], lk = logits[(s * K + k) * A + a];
          if (lj > lk || (lj == lk && j < k)) is_max = false;
        }
        if (is_max) best = k;
      }
      std::size_t shared = 0;
      for (std::size_t c = 0; c < cells; ++c)
        shared += disc[(s * K + best) * cells + c] * gt[(s * G + spec.group_of[a]) * cells + c];
      hit += shared > 0;
    }
    if (present == 0) continue;
    total += ld(hit) / present;
    ++used;
  }
  return double(total / used);
}

/// ARI from pair counting over all point pairs; NMI (arithmetic) from
/// per-sample log ratios.
inline leak::PartQualityReport nmi_ari(const std::vector<int>& u, const std::vector<int>& v) {
  const std::size_t n = u.size();
  ld both = 0, su = 0, sv = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const bool a = u[i] == u[j], b = v[i] == v[j];
      both += a && b;
      su += a;
      sv += b;
    }
  const ld pairs = ld(n) * (n - 1) / 2;
  const ld expected = su * sv / pairs, maximum = (su + sv) / 2;
  std::map<int, ld> cu, cv;
  std::map<std::pair<int, int>, ld> cuv;
  for (std::size_t i = 0; i < n; ++i) {
    cu[u[i]] += 1;
    cv[v[i]] += 1;
    cuv[{u[i], v[i]}] += 1;
  }
  ld mi = 0, hu = 0, hv = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mi += std::log(ld(n) * cuv[{u[i], v[i]}] / (cu[u[i]] * cv[v[i]])) / n;
    hu -= std::log(cu[u[i]] / n) / n;
    hv -= std::log(cv[v[i]] / n) / n;
  }
  leak::PartQualityReport r;
  // Both partitions all singletons (or both one cluster): identical, ARI 1.
  r.ari = maximum == expected ? 1.0 : double((both - expected) / (maximum - expected));
  r.nmi = double(mi / ((hu + hv) / 2));
  return r;
}

}  // namespace partleak::testing::oracle
