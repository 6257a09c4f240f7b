#include "partleak/leakmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "partleak/ops.hpp"

namespace partleak::leak {

namespace {

void warn(Warnings* w, std::string msg) {
  if (w != nullptr) w->push_back(std::move(msg));
}

constexpr std::size_t kChunk = 64;

}  // namespace

std::vector<std::size_t> AttributeSpec::attributes_in(std::size_t g) const {
  std::vector<std::size_t> out;
  for (std::size_t a = 0; a < group_of.size(); ++a) {
    if (group_of[a] == g) out.push_back(a);
  }
  return out;
}

void AttributeSpec::validate() const {
  if (groups == 0 || group_of.empty()) throw ValidationError("AttributeSpec: no groups or attributes");
  if (!names.empty() && names.size() != group_of.size()) throw ValidationError("AttributeSpec: name count mismatch");
  for (std::size_t g : group_of) {
    if (g >= groups) throw ValidationError("AttributeSpec: attribute mapped to an unknown group");
  }
}

std::optional<double> average_precision(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) throw ValidationError("average_precision: length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t tp = 0;
  double sum = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (labels[order[r]] > 0.5) {
      ++tp;
      sum += static_cast<double>(tp) / static_cast<double>(r + 1);
    }
  }
  if (tp == 0) return std::nullopt;
  return sum / static_cast<double>(tp);
}

MeanAp mean_ap(std::span<const double> scores, std::span<const double> labels, std::size_t n, std::size_t attributes,
               std::span<const std::size_t> columns, Warnings* warnings) {
  if (scores.size() != n * attributes || labels.size() != n * attributes) {
    throw ValidationError("mean_ap: buffer sizes do not match n x attributes");
  }
  MeanAp out;
  double sum = 0.0;
  std::vector<double> s(n), y(n);
  for (std::size_t a : columns) {
    if (a >= attributes) throw ValidationError("mean_ap: column out of range");
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = scores[i * attributes + a];
      y[i] = labels[i * attributes + a];
    }
    auto ap = average_precision(s, y);
    if (!ap) {
      out.skipped.push_back(a);
      warn(warnings, "attribute " + std::to_string(a) + " has no positives; excluded from mAP");
      continue;
    }
    sum += *ap;
    ++out.used;
  }
  out.value = out.used ? sum / static_cast<double>(out.used) : std::numeric_limits<double>::quiet_NaN();
  return out;
}

void assign_parts(PartAssignment& asg, double tau) {
  asg.tau = tau;
  asg.k_plus.assign(asg.groups, {});
  asg.k_minus.assign(asg.groups, {});
  for (std::size_t g = 0; g < asg.groups; ++g)
    for (std::size_t k = 0; k < asg.parts; ++k) {
      (asg.c[g * asg.parts + k] > tau ? asg.k_plus : asg.k_minus)[g].push_back(k);
    }
}

PartAssignment contingency(const KeypointSet& kp, std::span<const std::uint8_t> masks, std::size_t parts,
                           std::size_t height, std::size_t width, double tau) {
  const std::size_t N = kp.samples, G = kp.parts, cells = height * width;
  if (kp.row.size() != N * G || kp.col.size() != N * G || kp.visible.size() != N * G) {
    throw ValidationError("contingency: keypoint arrays do not match samples x parts");
  }
  if (masks.size() != N * parts * cells) throw ValidationError("contingency: mask buffer size mismatch");
  PartAssignment asg;
  asg.groups = G;
  asg.parts = parts;
  asg.c.assign(G * parts, 0.0);
  for (std::size_t g = 0; g < G; ++g) {
    std::size_t seen = 0;
    std::vector<std::size_t> hits(parts, 0);
    for (std::size_t s = 0; s < N; ++s) {
      if (!kp.visible[s * G + g]) continue;
      const int r = kp.row[s * G + g], c = kp.col[s * G + g];
      if (r < 0 || c < 0 || static_cast<std::size_t>(r) >= height || static_cast<std::size_t>(c) >= width) {
        throw ValidationError("contingency: keypoint outside the mask grid");
      }
      ++seen;
      const std::size_t cell = static_cast<std::size_t>(r) * width + static_cast<std::size_t>(c);
      for (std::size_t k = 0; k < parts; ++k) hits[k] += masks[(s * parts + k) * cells + cell] != 0;
    }
    if (seen == 0) throw ValidationError("contingency: part " + std::to_string(g) + " is never visible");
    for (std::size_t k = 0; k < parts; ++k) asg.c[g * parts + k] = static_cast<double>(hits[k]) / static_cast<double>(seen);
  }
  assign_parts(asg, tau);
  return asg;
}

PSReport part_specificity(const ProbeMatrix& m, const PartAssignment& asg) {
  if (m.parts != asg.parts || m.groups != asg.groups || m.map.size() != m.parts * m.groups) {
    throw ValidationError("part_specificity: probe matrix and assignment disagree in shape");
  }
  PSReport r;
  double total = 0.0;
  for (std::size_t g = 0; g < m.groups; ++g) {
    const auto& kp = asg.k_plus[g];
    const auto& km = asg.k_minus[g];
    if (kp.empty() || km.empty()) {
      throw ValidationError("part_specificity: group " + std::to_string(g) + " has an empty K+ or K- set");
    }
    double sp = 0.0, sm = 0.0;
    for (std::size_t k : kp) sp += m.at(k, g);
    for (std::size_t k : km) sm += m.at(k, g);
    const double ps = sp / static_cast<double>(kp.size()) - sm / static_cast<double>(km.size());
    r.per_group.push_back(ps);
    total += ps;
  }
  r.ps = total / static_cast<double>(m.groups);
  return r;
}

MPPOReport mppo(std::span<const double> logits, std::span<const double> labels, std::span<const std::uint8_t> discovered,
                std::span<const std::uint8_t> gt, std::size_t n, std::size_t parts, std::size_t cells,
                const AttributeSpec& spec, KStarMode mode, Warnings* warnings) {
  spec.validate();
  const std::size_t A = spec.size(), G = spec.groups, K = parts;
  if (logits.size() != n * K * A || labels.size() != n * A) throw ValidationError("mppo: logits/labels size mismatch");
  if (discovered.size() != n * K * cells || gt.size() != n * G * cells) throw ValidationError("mppo: mask size mismatch");
  MPPOReport r;
  r.per_attribute.assign(A, std::numeric_limits<double>::quiet_NaN());
  auto overlaps = [&](std::size_t s, std::size_t k, std::size_t g) {
    const std::uint8_t* d = discovered.data() + (s * K + k) * cells;
    const std::uint8_t* t = gt.data() + (s * G + g) * cells;
    for (std::size_t c = 0; c < cells; ++c) {
      if (d[c] && t[c]) return true;
    }
    return false;
  };
  auto argmax = [&](auto&& value) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (value(k) > value(best)) best = k;
    }
    return best;
  };
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t a = 0; a < A; ++a) {
    std::vector<std::size_t> present;
    for (std::size_t s = 0; s < n; ++s) {
      if (labels[s * A + a] > 0.5) present.push_back(s);
    }
    if (present.empty()) {
      r.skipped.push_back(a);
      warn(warnings, "attribute " + std::to_string(a) + " never present; skipped in MPPO");
      continue;
    }
    std::size_t shared = 0;
    if (mode == KStarMode::PerAttributeMean) {
      shared = argmax([&](std::size_t k) {
        double m = 0.0;
        for (std::size_t s : present) m += logits[(s * K + k) * A + a];
        return m / static_cast<double>(present.size());
      });
    }
    std::size_t hits = 0;
    for (std::size_t s : present) {
      const std::size_t k = mode == KStarMode::PerSample
                                ? argmax([&](std::size_t j) { return logits[(s * K + j) * A + a]; })
                                : shared;
      hits += overlaps(s, k, spec.group_of[a]);
    }
    r.per_attribute[a] = static_cast<double>(hits) / static_cast<double>(present.size());
    total += r.per_attribute[a];
    ++used;
  }
  r.mppo = used ? total / static_cast<double>(used) : std::numeric_limits<double>::quiet_NaN();
  return r;
}

PartQualityReport nmi_ari(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size() || predicted.empty()) throw ValidationError("nmi_ari: label lists must match");
  std::map<int, std::size_t> pi, ti;
  for (int v : predicted) pi[v] = 0;
  for (int v : truth) ti[v] = 0;
  if (pi.size() < 2 || ti.size() < 2) throw ValidationError("nmi_ari: need at least two clusters on each side");
  std::size_t id = 0;
  for (auto& [k, v] : pi) v = id++;
  id = 0;
  for (auto& [k, v] : ti) v = id++;
  const std::size_t R = pi.size(), C = ti.size();
  std::vector<double> table(R * C, 0.0), rows(R, 0.0), cols(C, 0.0);
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const std::size_t r = pi[predicted[i]], c = ti[truth[i]];
    table[r * C + c] += 1.0;
    rows[r] += 1.0;
    cols[c] += 1.0;
  }
  const double n = static_cast<double>(predicted.size());
  double hu = 0.0, hv = 0.0, mi = 0.0;
  for (double a : rows) hu -= a / n * std::log(a / n);
  for (double b : cols) hv -= b / n * std::log(b / n);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) {
      const double nij = table[r * C + c];
      if (nij > 0) mi += nij / n * std::log(n * nij / (rows[r] * cols[c]));
    }
  PartQualityReport q;
  q.nmi = mi / (0.5 * (hu + hv));
  auto pairs = [](double x) { return x * (x - 1.0) / 2.0; };
  double index = 0.0, sa = 0.0, sb = 0.0;
  for (double v : table) index += pairs(v);
  for (double a : rows) sa += pairs(a);
  for (double b : cols) sb += pairs(b);
  const double expected = sa * sb / pairs(n);
  const double maximum = 0.5 * (sa + sb);
  q.ari = maximum == expected ? 1.0 : (index - expected) / (maximum - expected);
  return q;
}

std::vector<double> pool_late(std::span<const double> z, std::size_t batch, std::size_t hw, std::size_t dim,
                              std::span<const double> masks, std::size_t parts, Warnings* warnings) {
  if (z.size() != batch * hw * dim || masks.size() != batch * parts * hw) {
    throw ValidationError("pool_late: buffer sizes do not match");
  }
  std::vector<double> out(batch * parts * dim, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t k = 0; k < parts; ++k) {
      const double* m = masks.data() + (b * parts + k) * hw;
      double* v = out.data() + (b * parts + k) * dim;
      double wsum = 0.0;
      for (std::size_t p = 0; p < hw; ++p) {
        if (m[p] == 0.0) continue;
        wsum += m[p];
        const double* zp = z.data() + (b * hw + p) * dim;
        for (std::size_t d = 0; d < dim; ++d) v[d] += m[p] * zp[d];
      }
      if (wsum == 0.0) {
        warn(warnings, "empty mask for part " + std::to_string(k) + " in sample " + std::to_string(b));
        continue;
      }
      for (std::size_t d = 0; d < dim; ++d) v[d] /= wsum;
    }
  return out;
}

std::vector<double> extract_late(const ParamStore& backbone, const vit::ViTConfig& cfg, std::span<const double> images,
                                 std::size_t batch, std::span<const double> masks, std::size_t parts,
                                 Warnings* warnings) {
  const std::size_t per = cfg.channels * cfg.image_size * cfg.image_size, HW = cfg.num_patches(), D = cfg.embed_dim;
  if (images.size() != batch * per || masks.size() != batch * parts * HW) {
    throw ValidationError("extract_late: buffer sizes do not match the config");
  }
  std::vector<double> out;
  out.reserve(batch * parts * D);
  for (std::size_t s = 0; s < batch; s += kChunk) {
    const std::size_t nb = std::min(kChunk, batch - s);
    ad::Tape tape;
    BoundParams p = backbone.bind(tape, false);
    ad::Tensor x = tape.constant({nb, cfg.channels, cfg.image_size, cfg.image_size},
                                 std::vector<double>(images.begin() + s * per, images.begin() + (s + nb) * per));
    auto fm = vit::vit_forward(p, cfg, x, vit::full_mask(nb, HW));
    auto v = pool_late(fm.z.data(), nb, HW, D, masks.subspan(s * parts * HW, nb * parts * HW), parts, warnings);
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

std::vector<double> extract_early(const ParamStore& backbone, const vit::ViTConfig& cfg, std::span<const double> images,
                                  std::size_t batch, std::span<const int> labels, std::size_t groups) {
  const std::size_t per = cfg.channels * cfg.image_size * cfg.image_size, HW = cfg.num_patches(), D = cfg.embed_dim;
  if (groups == 0) throw ValidationError("extract_early: need at least one group");
  if (images.size() != batch * per || labels.size() != batch * HW) {
    throw ValidationError("extract_early: buffer sizes do not match the config");
  }
  const ParamStore store = groups == 1 ? backbone : vit::replicate_for_parts(backbone, cfg, groups - 1, "backbone");
  std::vector<double> out;
  out.reserve(batch * groups * D);
  for (std::size_t s = 0; s < batch; s += kChunk) {
    const std::size_t nb = std::min(kChunk, batch - s);
    ad::Tape tape;
    BoundParams p = store.bind(tape, false);
    ad::Tensor x = tape.constant({nb, cfg.channels, cfg.image_size, cfg.image_size},
                                 std::vector<double>(images.begin() + s * per, images.begin() + (s + nb) * per));
    auto mask = vit::hard_mask(nb, HW, groups, std::vector<int>(labels.begin() + s * HW, labels.begin() + (s + nb) * HW));
    auto fm = vit::vit_forward(p, cfg, x, mask);
    auto cls = vit::group_cls(fm, cfg).to_vector();
    out.insert(out.end(), cls.begin(), cls.end());
  }
  return out;
}

std::vector<int> masks_to_labels(std::span<const double> masks, std::size_t batch, std::size_t parts, std::size_t hw) {
  if (masks.size() != batch * parts * hw) throw ValidationError("masks_to_labels: size mismatch");
  std::vector<int> labels(batch * hw, static_cast<int>(parts));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t k = 0; k < parts; ++k) {
        if (masks[(b * parts + k) * hw + p] > 0.5) {
          labels[b * hw + p] = static_cast<int>(k);
          break;
        }
      }
  return labels;
}

ProbeResult probe_matrix(std::span<const double> train_features, std::span<const double> train_labels,
                         std::size_t n_train, std::span<const double> test_features,
                         std::span<const double> test_labels, std::size_t n_test, std::size_t parts, std::size_t dim,
                         const AttributeSpec& spec, const ProbeConfig& cfg, Warnings* warnings) {
  spec.validate();
  const std::size_t A = spec.size();
  if (train_features.size() != n_train * parts * dim || test_features.size() != n_test * parts * dim) {
    throw ValidationError("probe_matrix: feature buffer size mismatch");
  }
  ProbeResult res;
  res.matrix.parts = parts;
  res.matrix.groups = spec.groups;
  res.matrix.map.assign(parts * spec.groups, 0.0);
  res.test_logits.assign(n_test * parts * A, 0.0);
  std::vector<double> xtr(n_train * dim), xte(n_test * dim);
  for (std::size_t k = 0; k < parts; ++k) {
    for (std::size_t i = 0; i < n_train; ++i)
      std::copy_n(train_features.begin() + (i * parts + k) * dim, dim, xtr.begin() + i * dim);
    for (std::size_t i = 0; i < n_test; ++i)
      std::copy_n(test_features.begin() + (i * parts + k) * dim, dim, xte.begin() + i * dim);
    ProbeConfig pc = cfg;
    pc.seed = cfg.seed * 1000003ULL + k;
    LinearProbe probe = train_probe(xtr, train_labels, n_train, dim, A, pc);
    std::vector<double> lg = probe.logits(xte);
    for (std::size_t i = 0; i < n_test; ++i)
      std::copy_n(lg.begin() + i * A, A, res.test_logits.begin() + (i * parts + k) * A);
    for (std::size_t g = 0; g < spec.groups; ++g) {
      auto cols = spec.attributes_in(g);
      res.matrix.map[k * spec.groups + g] = mean_ap(lg, test_labels, n_test, A, cols, warnings).value;
    }
  }
  return res;
}

}  // namespace partleak::leak
