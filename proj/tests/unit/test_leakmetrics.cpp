#include <doctest.h>

#include <cmath>

#include "../metric_checks.hpp"
#include "../support.hpp"
#include "partleak/leakmetrics.hpp"
#include "partleak/partmodel.hpp"
#include "partleak/probe.hpp"

using namespace partleak;
using namespace partleak::testing;
using doctest::Approx;

namespace {

leak::PartAssignment assignment(std::size_t G, std::size_t K, std::vector<std::vector<std::size_t>> plus) {
  leak::PartAssignment a;
  a.groups = G;
  a.parts = K;
  a.c.assign(G * K, 0.0);
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t k : plus[g]) a.c[g * K + k] = 1.0;
  leak::assign_parts(a, 0.25);
  return a;
}

}  // namespace

TEST_SUITE("leakmetrics") {
  TEST_CASE("average precision examples") {
    const std::vector<double> s = {.9, .8, .7, .6};
    CHECK(*leak::average_precision(s, std::vector<double>{1, 1, 0, 0}) == 1.0);
    CHECK(*leak::average_precision(s, std::vector<double>{1, 0, 1, 0}) == Approx((1 + 2.0 / 3.0) / 2).epsilon(1e-15));
    CHECK(*leak::average_precision(s, std::vector<double>{0, 0, 1, 1}) == Approx((1.0 / 3 + 0.5) / 2).epsilon(1e-15));
    CHECK_FALSE(leak::average_precision(s, std::vector<double>{0, 0, 0, 0}).has_value());
  }

  TEST_CASE("AP is invariant to strictly monotone score transforms") {
    Rng rng(1, 1);
    for (int t = 0; t < 50; ++t) {
      auto s = random_vec(rng, 12);
      std::vector<double> y(12), s2(12);
      for (auto& v : y) v = rng.bernoulli(0.5);
      y[0] = 1;
      for (std::size_t i = 0; i < 12; ++i) s2[i] = std::exp(3 * s[i]) + 2;
      CHECK(*leak::average_precision(s, y) == *leak::average_precision(s2, y));
    }
  }

  TEST_CASE("mean AP skips attributes without positives") {
    std::vector<double> s = {.9, .1, .8, .2, .7, .3};
    std::vector<double> y = {1, 0, 0, 0, 1, 0};
    leak::Warnings w;
    const std::vector<std::size_t> cols = {0, 1};
    auto m = leak::mean_ap(s, y, 3, 2, cols, &w);
    CHECK(m.used == 1);
    CHECK(m.skipped == std::vector<std::size_t>{1});
    CHECK(m.value == Approx((1 + 2.0 / 3.0) / 2).epsilon(1e-15));
    CHECK(w.size() == 1);
  }

  TEST_CASE("contingency with masks equal to the ground-truth regions is a permutation") {
    // 2 samples, 3 parts on a 3x3 grid; discovered part k = ground-truth part perm[k].
    const std::size_t N = 2, G = 3, H = 3, W = 3;
    const std::vector<std::size_t> perm = {2, 0, 1};
    leak::KeypointSet kp;
    kp.samples = N;
    kp.parts = G;
    std::vector<std::uint8_t> masks(N * G * H * W, 0);
    for (std::size_t s = 0; s < N; ++s)
      for (std::size_t g = 0; g < G; ++g) {
        kp.row.push_back(int(g));
        kp.col.push_back(int(s));
        kp.visible.push_back(1);
      }
    for (std::size_t s = 0; s < N; ++s)
      for (std::size_t k = 0; k < G; ++k)
        for (std::size_t c = 0; c < W; ++c) masks[((s * G + k) * H + perm[k]) * W + c] = 1;  // row perm[k]
    auto a = leak::contingency(kp, masks, G, H, W);
    for (std::size_t g = 0; g < G; ++g)
      for (std::size_t k = 0; k < G; ++k) CHECK(a.c[g * G + k] == (perm[k] == g ? 1.0 : 0.0));
    for (std::size_t g = 0; g < G; ++g) CHECK(a.k_plus[g].size() == 1);
  }

  TEST_CASE("contingency validation") {
    leak::KeypointSet kp;
    kp.samples = 1;
    kp.parts = 1;
    kp.row = {5};
    kp.col = {0};
    kp.visible = {1};
    std::vector<std::uint8_t> masks(4, 1);
    CHECK_THROWS_AS(leak::contingency(kp, masks, 1, 2, 2), ValidationError);
    kp.row = {0};
    kp.visible = {0};
    CHECK_THROWS_AS(leak::contingency(kp, masks, 1, 2, 2), ValidationError);
  }

  TEST_CASE("part specificity worked example") {
    leak::ProbeMatrix m;
    m.parts = 3;
    m.groups = 2;
    // rows k, columns g: column 1 = (0.9, 0.3, 0.5), column 2 = (0.2, 0.8, 0.6)
    m.map = {0.9, 0.2, 0.3, 0.8, 0.5, 0.6};
    auto a = assignment(2, 3, {{0}, {1, 2}});
    auto r = leak::part_specificity(m, a);
    CHECK(r.per_group[0] == Approx(0.5).epsilon(1e-15));
    CHECK(r.per_group[1] == Approx(0.5).epsilon(1e-15));
    CHECK(r.ps == Approx(0.5).epsilon(1e-15));

    // Swapping K+ and K- flips the sign.
    auto sw = assignment(2, 3, {{1, 2}, {0}});
    CHECK(leak::part_specificity(m, sw).ps == Approx(-0.5).epsilon(1e-15));

    m.map.assign(6, 0.42);
    CHECK(leak::part_specificity(m, a).ps == 0.0);

    auto empty = assignment(2, 3, {{0, 1, 2}, {1}});
    CHECK_THROWS_AS(leak::part_specificity(m, empty), ValidationError);
  }

  TEST_CASE("MPPO examples") {
    leak::AttributeSpec spec;
    spec.groups = 2;
    spec.group_of = {0, 1};
    spec.names = {"a0", "a1"};
    // 3 samples, K = 2 parts, 4 cells. gt part 0 = cells {0,1}, part 1 = {2,3}.
    const std::size_t n = 3, K = 2, cells = 4;
    std::vector<std::uint8_t> gt, disc;
    for (std::size_t s = 0; s < n; ++s) {
      gt.insert(gt.end(), {1, 1, 0, 0, 0, 0, 1, 1});
      disc.insert(disc.end(), {1, 1, 0, 0, 0, 0, 1, 1});
    }
    // logits [n, K, A]
    std::vector<double> lg = {
        2, 0, 0, 1,   // s0: a0 -> part 0 (hit), a1 -> part 1 (hit)
        0, 1, 3, 0,   // s1: a0 -> part 1 (miss), a1 -> part 0 (miss)
        1, 1, 1, 1};  // s2: ties -> part 0: a0 hit, a1 miss
    std::vector<double> y = {1, 1, 1, 0, 1, 1};
    auto r = leak::mppo(lg, y, disc, gt, n, K, cells, spec);
    CHECK(r.per_attribute[0] == Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(r.per_attribute[1] == Approx(0.5).epsilon(1e-15));
    CHECK(r.mppo == Approx((2.0 / 3.0 + 0.5) / 2).epsilon(1e-15));
    CHECK(r.mppo == Approx(oracle::mppo(lg, y, disc, gt, n, K, cells, spec)).epsilon(1e-15));

    // Per-attribute mean k*: a0 mean logits (1, 4/3) -> part 1 for every sample.
    auto ra = leak::mppo(lg, y, disc, gt, n, K, cells, spec, leak::KStarMode::PerAttributeMean);
    CHECK(ra.per_attribute[0] == 0.0);

    // Discovered masks covering the whole image saturate MPPO at 1.
    std::vector<std::uint8_t> full(n * K * cells, 1);
    CHECK(leak::mppo(lg, y, full, gt, n, K, cells, spec).mppo == 1.0);

    // Perfectly aligned probes with discovered = gt give 1.
    std::vector<double> aligned = {5, 0, 0, 5, 5, 0, 0, 5, 5, 0, 0, 5};
    CHECK(leak::mppo(aligned, y, disc, gt, n, K, cells, spec).mppo == 1.0);

    // Monotone transform per sample keeps the result.
    auto tr = lg;
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t i = 0; i < K * 2; ++i) tr[s * K * 2 + i] = std::exp(tr[s * K * 2 + i]) * (s + 1) - 4.0;
    CHECK(leak::mppo(tr, y, disc, gt, n, K, cells, spec).mppo == r.mppo);

    // An attribute never present is skipped with a warning.
    std::vector<double> y0 = {1, 0, 1, 0, 1, 0};
    leak::Warnings w;
    auto rs = leak::mppo(lg, y0, disc, gt, n, K, cells, spec, leak::KStarMode::PerSample, &w);
    CHECK(rs.skipped == std::vector<std::size_t>{1});
    CHECK(std::isnan(rs.per_attribute[1]));
    CHECK(w.size() == 1);
  }

  TEST_CASE("NMI / ARI examples") {
    const std::vector<int> a = {0, 0, 1, 1, 2, 2};
    auto same = leak::nmi_ari(a, a);
    CHECK(same.nmi == Approx(1.0).epsilon(1e-15));
    CHECK(same.ari == Approx(1.0).epsilon(1e-15));
    const std::vector<int> p = {5, 5, 9, 9, 1, 1};
    auto perm = leak::nmi_ari(p, a);
    CHECK(perm.nmi == Approx(1.0).epsilon(1e-15));
    CHECK(perm.ari == Approx(1.0).epsilon(1e-15));
    CHECK_THROWS_AS(leak::nmi_ari(std::vector<int>{1, 1}, std::vector<int>{0, 1}), ValidationError);

    Rng rng(2, 1);
    std::vector<int> u(20), v(20);
    for (std::size_t i = 0; i < 20; ++i) {
      u[i] = int(rng.below(3));
      v[i] = int(rng.below(4));
    }
    u[0] = 0;
    u[1] = 1;
    auto got = leak::nmi_ari(u, v);
    auto want = oracle::nmi_ari(u, v);
    CHECK(std::fabs(got.nmi - want.nmi) < 1e-10);
    CHECK(std::fabs(got.ari - want.ari) < 1e-10);
  }

  TEST_CASE("every metric agrees with its brute-force oracle on 200 random instances") {
    for (const auto& m : check_metric_oracles(200, 3)) {
      CAPTURE(m.name);
      CHECK(m.instances >= 100);
      CHECK(m.mismatches == 0);
    }
  }

  TEST_CASE("late pooling") {
    Rng rng(4, 1);
    const std::size_t B = 2, HW = 4, D = 3, K = 2;
    auto z = random_vec(rng, B * HW * D);
    std::vector<double> masks(B * K * HW, 0.0);
    for (std::size_t p = 0; p < HW; ++p) masks[(0 * K + 0) * HW + p] = 1.0;  // all ones
    masks[(0 * K + 1) * HW + 2] = 1.0;                                        // single patch
    for (std::size_t p = 0; p < HW; ++p) masks[(1 * K + 0) * HW + p] = rng.uniform();
    leak::Warnings w;
    auto v = leak::pool_late(z, B, HW, D, masks, K, &w);
    for (std::size_t d = 0; d < D; ++d) {
      double mean = 0;
      for (std::size_t p = 0; p < HW; ++p) mean += z[p * D + d];
      CHECK(v[d] == Approx(mean / HW).epsilon(1e-14));
      CHECK(v[D + d] == z[2 * D + d]);
      double num = 0, den = 0;
      for (std::size_t p = 0; p < HW; ++p) {
        num += masks[(K + 0) * HW + p] * z[(HW + p) * D + d];
        den += masks[(K + 0) * HW + p];
      }
      CHECK(std::fabs(v[2 * D + d] - num / den) < 1e-12);
      CHECK(v[3 * D + d] == 0.0);
    }
    CHECK(w.size() == 1);
  }

  TEST_CASE("mask labels") {
    std::vector<double> m = {1, 0, 0, 0, 1, 1, 0, 0, 0};  // 1 sample, K = 3, HW = 3
    CHECK(leak::masks_to_labels(m, 1, 3, 3) == std::vector<int>{0, 1, 1});
    std::vector<double> none(6, 0.0);
    CHECK(leak::masks_to_labels(none, 1, 2, 3) == std::vector<int>{2, 2, 2});
  }

  TEST_CASE("early extraction") {
    vit::ViTConfig c;
    c.image_size = 8;
    c.patch_size = 2;
    c.embed_dim = 16;
    c.depth = 2;
    c.heads = 2;
    Rng rng(5, 1);
    auto bb = vit::init_vit(c, rng);
    for (auto& p : bb.all())
      for (auto& x : p.value) x += rng.normal(0.0, 0.2);
    const std::size_t HW = c.num_patches(), per = c.channels * c.image_size * c.image_size, D = c.embed_dim;
    auto img = random_vec(rng, 2 * per);

    // One group covering everything equals the unmasked CLS output.
    auto e1 = leak::extract_early(bb, c, img, 2, std::vector<int>(2 * HW, 0), 1);
    ad::Tape t;
    auto fm = vit::vit_forward(bb.bind(t, false), c, t.constant({2, c.channels, c.image_size, c.image_size}, img),
                               vit::full_mask(2, HW));
    CHECK(e1 == vit::group_cls(fm, c).to_vector());

    // Content outside part k leaves v^k bit-identical.
    const std::size_t G = 3;
    std::vector<int> lab(HW);
    for (auto& l : lab) l = int(rng.below(G));
    std::vector<double> one(img.begin(), img.begin() + per);
    auto base = leak::extract_early(bb, c, one, 1, lab, G);
    for (int k = 0; k < int(G); ++k) {
      auto pert = one;
      const std::size_t S = c.image_size;
      for (std::size_t ch = 0; ch < c.channels; ++ch)
        for (std::size_t y = 0; y < S; ++y)
          for (std::size_t x = 0; x < S; ++x)
            if (lab[(y / c.patch_size) * c.grid() + x / c.patch_size] != k) pert[(ch * S + y) * S + x] = rng.normal();
      auto o = leak::extract_early(bb, c, pert, 1, lab, G);
      for (std::size_t d = 0; d < D; ++d) CHECK(o[k * D + d] == base[k * D + d]);
    }

    // Same features as the stage-2 hard path with the backbone copy.
    std::vector<double> maps(G * HW, 0.0);
    for (std::size_t p = 0; p < HW; ++p) maps[lab[p] * HW + p] = 1.0;
    auto s2 = partmodel::init_stage2(bb, c, G - 1, 4, rng);
    ad::Tape t2;
    auto so = partmodel::stage2_forward(s2.bind(t2, false), c, t2.constant({1, c.channels, c.image_size, c.image_size}, one),
                                        t2.constant({1, G, HW}, maps), vit::MaskVariant::Hard);
    auto pf = so.part_features.to_vector();
    CHECK(std::vector<double>(base.begin(), base.begin() + (G - 1) * D) == pf);
  }

  TEST_CASE("linear probe") {
    Rng rng(6, 1);
    const std::size_t n = 200, D = 4, A = 2;
    std::vector<double> x(n * D), y(n * A);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t d = 0; d < D; ++d) x[i * D + d] = rng.normal();
      y[i * A + 0] = x[i * D + 0] + 0.5 * x[i * D + 2] > 0 ? 1 : 0;
      y[i * A + 1] = x[i * D + 1] - x[i * D + 3] > 0.3 ? 1 : 0;
    }
    leak::ProbeConfig pc;
    auto p = leak::train_probe(x, y, n, D, A, pc);
    const std::vector<std::size_t> cols = {0, 1};
    CHECK(leak::mean_ap(p.logits(x), y, n, A, cols).value > 0.99);
    auto p2 = leak::train_probe(x, y, n, D, A, pc);
    CHECK(p2.weight == p.weight);
    CHECK(p2.bias == p.bias);

    // Labels independent of the features: held-out mAP near prevalence.
    const std::size_t m = 2000;
    std::vector<double> xr(m * D), yr(m * A);
    for (auto& v : xr) v = rng.normal();
    for (auto& v : yr) v = rng.bernoulli(0.3);
    auto pr = leak::train_probe(std::span<const double>(xr).first(m / 2 * D), std::span<const double>(yr).first(m / 2 * A),
                                m / 2, D, A, pc);
    auto held = leak::mean_ap(pr.logits(std::span<const double>(xr).last(m / 2 * D)),
                              std::span<const double>(yr).last(m / 2 * A), m / 2, A, cols);
    double prev = 0;
    for (std::size_t i = m / 2 * A; i < m * A; ++i) prev += yr[i];
    prev /= m / 2 * A;
    CHECK(std::fabs(held.value - prev) < 0.05);
  }
}
