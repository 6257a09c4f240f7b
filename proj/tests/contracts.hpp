#pragma once

// Masking contracts on random draws: hard-mask isolation at the ViT output
// and at the stage-2 part logits, and the ste forward/backward pairing.

#include <cmath>
#include <vector>

#include "partleak/vit.hpp"
#include "tinymodel.hpp"

namespace partleak::testing {

inline vit::ViTConfig contract_vit_config() {
  vit::ViTConfig c;
  c.image_size = 8;
  c.patch_size = 2;
  c.channels = 3;
  c.embed_dim = 16;
  c.depth = 2;
  c.heads = 4;
  c.num_registers = 1;
  c.mlp_ratio = 2;
  return c;
}

/// Structured init plus N(0, 0.2) jitter so no weight sits at a symmetric value.
inline ParamStore jittered_vit(const vit::ViTConfig& c, std::uint64_t seed, std::size_t groups) {
  Rng rng(seed, 17);
  ParamStore ps = vit::init_vit(c, rng, groups, "g");
  for (auto& p : ps.all())
    for (auto& x : p.value) x += rng.normal(0.0, 0.2);
  return ps;
}

/// Prefix outputs followed by patch outputs.
inline std::vector<double> concat_outputs(const vit::FeatureMap& fm) {
  auto a = fm.prefix_out.to_vector();
  auto b = fm.z.to_vector();
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

/// Adds N(0, 1) noise to every pixel whose patch is not labelled k.
inline std::vector<double> perturb_outside(const std::vector<double>& img, const vit::ViTConfig& c,
                                           const std::vector<int>& labels, int k, Rng& rng) {
  const std::size_t S = c.image_size;
  auto out = img;
  for (std::size_t ch = 0; ch < c.channels; ++ch)
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x)
        if (labels[(y / c.patch_size) * c.grid() + x / c.patch_size] != k) out[(ch * S + y) * S + x] += rng.normal();
  return out;
}

struct IsolationTrial {
  bool prefix_identical = true;  // part-k prefix tokens at the ViT output
  bool patches_identical = true;  // part-k patch tokens at the ViT output
  bool logits_identical = true;  // part-k stage-2 attribute scores
};

/// One randomized trial: random weights, image, hard clique labels and
/// part k; pixels outside part k are perturbed and part-k outputs compared
/// bit for bit.
inline IsolationTrial isolation_trial(std::uint64_t trial) {
  IsolationTrial r;
  {
    const auto c = contract_vit_config();
    const std::size_t G = 2 + trial % 4, HW = c.num_patches(), S = c.image_size, P = c.prefix_per_group(),
                      D = c.embed_dim;
    auto ps = jittered_vit(c, 1000 + trial, G);
    Rng rng(trial, 30);
    auto img = random_vec(rng, c.channels * S * S);
    std::vector<int> cl(HW);
    for (auto& x : cl) x = int(rng.below(G));
    auto mask = vit::hard_mask(1, HW, G, cl);
    auto run = [&](const std::vector<double>& im) {
      ad::Tape t;
      return concat_outputs(vit::vit_forward(ps.bind(t, false), c, t.constant({1, c.channels, S, S}, im), mask));
    };
    const int k = int(rng.below(G));
    auto base = run(img), out = run(perturb_outside(img, c, cl, k, rng));
    for (std::size_t i = std::size_t(k) * P * D; i < std::size_t(k + 1) * P * D; ++i)
      r.prefix_identical = r.prefix_identical && out[i] == base[i];
    for (std::size_t p = 0; p < HW; ++p)
      if (cl[p] == k)
        for (std::size_t e = 0; e < D; ++e)
          r.patches_identical = r.patches_identical && out[G * P * D + p * D + e] == base[G * P * D + p * D + e];
  }
  {
    auto m = make_tiny_model(2000 + trial, partmodel::Variant::Hard, 2 + trial % 3, 1);
    const auto& c = m.cfg.vit;
    const std::size_t HW = c.num_patches(), G = m.cfg.parts + 1, S = c.image_size, A = m.cfg.attributes,
                      K = m.cfg.parts;
    Rng rng(trial, 31);
    std::vector<double> maps(G * HW, 0.0);
    std::vector<int> lab(HW);
    for (std::size_t p = 0; p < HW; ++p) {
      lab[p] = int(rng.below(G));
      maps[std::size_t(lab[p]) * HW + p] = 1.0;
    }
    auto run = [&](const std::vector<double>& im) {
      ad::Tape t;
      auto bp = m.params.bind(t, false);
      auto o = partmodel::stage2_forward(bp, c, t.constant({1, c.channels, S, S}, im), t.constant({1, G, HW}, maps),
                                         vit::MaskVariant::Hard);
      return o.routing.scores.to_vector();  // [1, A, K]
    };
    const int k = int(rng.below(K));
    auto base = run(m.images), out = run(perturb_outside(m.images, c, lab, k, rng));
    for (std::size_t a = 0; a < A; ++a) r.logits_identical = r.logits_identical && out[a * K + k] == base[a * K + k];
  }
  return r;
}

struct SteTrial {
  bool forward_identical = false;     // ste versus hard, every output bit
  double max_grad_diff = INFINITY;    // ste versus soft, parameters and map logits
  double soft_map_grad_l1 = 0.0;      // nonzero: the soft path carries gradient
  double hard_map_grad_l1 = INFINITY;  // zero: the hard path does not
};

/// Random weights, images and part logits; a fixed random linear readout of
/// every ViT output. Runs the forward under hard, soft and ste masks.
inline SteTrial ste_trial(std::uint64_t trial) {
  const auto c = contract_vit_config();
  const std::size_t G = 2 + trial % 3, HW = c.num_patches(), B = 2, S = c.image_size;
  auto ps = jittered_vit(c, 3000 + trial, G);
  Rng rng(trial, 32);
  auto img = random_vec(rng, B * c.channels * S * S);
  auto logits = random_vec(rng, B * G * HW, 2.0);
  struct Out {
    std::vector<double> fwd;
    std::vector<std::vector<double>> grads;
    std::vector<double> map_grad;
  };
  auto run = [&](vit::MaskVariant v) {
    ad::Tape t;
    auto bp = ps.bind(t, true);
    auto lg = t.leaf({B, G, HW}, logits, true);
    auto maps = ad::permute(ad::softmax(ad::permute(lg, {0, 2, 1})), {0, 2, 1});
    auto fm = vit::vit_forward(bp, c, t.constant({B, c.channels, S, S}, img), vit::build_clique_mask(maps, v));
    t.backward(ad::add(random_projection(fm.z, 5 + trial), random_projection(fm.prefix_out, 6 + trial)));
    return Out{concat_outputs(fm), ps.gradients(t, bp), t.grad(lg)};
  };
  auto hard = run(vit::MaskVariant::Hard), soft = run(vit::MaskVariant::Soft), ste = run(vit::MaskVariant::Ste);
  SteTrial r;
  r.forward_identical = ste.fwd == hard.fwd;
  double err = 0;
  for (std::size_t i = 0; i < ste.grads.size(); ++i)
    for (std::size_t j = 0; j < ste.grads[i].size(); ++j) err = std::max(err, std::fabs(ste.grads[i][j] - soft.grads[i][j]));
  for (std::size_t j = 0; j < ste.map_grad.size(); ++j) err = std::max(err, std::fabs(ste.map_grad[j] - soft.map_grad[j]));
  r.max_grad_diff = err;
  r.soft_map_grad_l1 = 0;
  for (double g : soft.map_grad) r.soft_map_grad_l1 += std::fabs(g);
  r.hard_map_grad_l1 = 0;
  for (double g : hard.map_grad) r.hard_map_grad_l1 += std::fabs(g);
  return r;
}

}  // namespace partleak::testing
