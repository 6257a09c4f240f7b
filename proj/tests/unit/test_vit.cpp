#include <doctest.h>

#include <cmath>

#include "../gradcases.hpp"
#include "partleak/vit.hpp"

using namespace partleak;
using namespace partleak::testing;

namespace {

// Plain-loop ViT forward, row-major [T, D] per image, optional key mask.
struct RefViT {
  const ParamStore& ps;
  const vit::ViTConfig& c;

  const std::vector<double>& p(const std::string& n) const { return ps.get(n).value; }

  static void ln(std::vector<double>& x, std::size_t rows, std::size_t d, const std::vector<double>& g,
                 const std::vector<double>& b) {
    for (std::size_t r = 0; r < rows; ++r) {
      double mu = 0, var = 0;
      for (std::size_t j = 0; j < d; ++j) mu += x[r * d + j];
      mu /= d;
      for (std::size_t j = 0; j < d; ++j) var += (x[r * d + j] - mu) * (x[r * d + j] - mu);
      var /= d;
      for (std::size_t j = 0; j < d; ++j) x[r * d + j] = (x[r * d + j] - mu) / std::sqrt(var + 1e-6) * g[j] + b[j];
    }
  }
  static std::vector<double> lin(const std::vector<double>& x, std::size_t rows, std::size_t in, std::size_t out,
                                 const std::vector<double>& w, const std::vector<double>& b) {
    std::vector<double> y(rows * out);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < out; ++o) {
        double s = b[o];
        for (std::size_t i = 0; i < in; ++i) s += x[r * in + i] * w[i * out + o];
        y[r * out + o] = s;
      }
    return y;
  }

  // Returns [T, D] for one image; allowed is [T, T] or empty.
  std::vector<double> forward(std::span<const double> image, std::size_t groups,
                              const std::vector<std::uint8_t>& allowed) const {
    const std::size_t D = c.embed_dim, HW = c.num_patches(), P = groups * c.prefix_per_group(), T = P + HW;
    auto patches = vit::patchify(image, c);
    auto emb = lin(patches, HW, c.patch_dim(), D, p("patch_w"), p("patch_b"));
    std::vector<double> x(T * D);
    for (std::size_t i = 0; i < P * D; ++i) x[i] = p("prefix")[i];
    for (std::size_t i = 0; i < HW * D; ++i) x[P * D + i] = emb[i] + p("pos")[i];
    const std::size_t H = c.heads, dh = D / H, M = D * c.mlp_ratio;
    for (std::size_t l = 0; l < c.depth; ++l) {
      const std::string b = "blk" + std::to_string(l) + ".";
      auto h = x;
      ln(h, T, D, p(b + "ln1_g"), p(b + "ln1_b"));
      auto q = lin(h, T, D, D, p(b + "wq"), p(b + "bq"));
      auto k = lin(h, T, D, D, p(b + "wk"), p(b + "bk"));
      auto v = lin(h, T, D, D, p(b + "wv"), p(b + "bv"));
      std::vector<double> a(T * D, 0.0);
      for (std::size_t hd = 0; hd < H; ++hd)
        for (std::size_t i = 0; i < T; ++i) {
          std::vector<double> s(T);
          double mx = -INFINITY;
          for (std::size_t j = 0; j < T; ++j) {
            if (!allowed.empty() && !allowed[i * T + j]) continue;
            double d = 0;
            for (std::size_t e = 0; e < dh; ++e) d += q[i * D + hd * dh + e] * k[j * D + hd * dh + e];
            s[j] = d / std::sqrt(double(dh));
            mx = std::max(mx, s[j]);
          }
          double z = 0;
          for (std::size_t j = 0; j < T; ++j) {
            if (!allowed.empty() && !allowed[i * T + j]) continue;
            s[j] = std::exp(s[j] - mx);
            z += s[j];
          }
          for (std::size_t j = 0; j < T; ++j) {
            if (!allowed.empty() && !allowed[i * T + j]) continue;
            for (std::size_t e = 0; e < dh; ++e) a[i * D + hd * dh + e] += s[j] / z * v[j * D + hd * dh + e];
          }
        }
      auto o = lin(a, T, D, D, p(b + "wo"), p(b + "bo"));
      for (std::size_t i = 0; i < T * D; ++i) x[i] += o[i];
      h = x;
      ln(h, T, D, p(b + "ln2_g"), p(b + "ln2_b"));
      auto m = lin(h, T, D, M, p(b + "w1"), p(b + "b1"));
      for (auto& u : m) u = 0.5 * u * (1 + std::tanh(std::sqrt(2 / M_PI) * (u + 0.044715 * u * u * u)));
      auto o2 = lin(m, T, M, D, p(b + "w2"), p(b + "b2"));
      for (std::size_t i = 0; i < T * D; ++i) x[i] += o2[i];
    }
    return x;
  }
};

vit::ViTConfig small_config() {
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

ParamStore jittered_vit(const vit::ViTConfig& c, std::uint64_t seed, std::size_t groups) {
  Rng rng(seed, 17);
  ParamStore ps = vit::init_vit(c, rng, groups, "g");
  for (auto& p : ps.all())
    for (auto& x : p.value) x += rng.normal(0.0, 0.2);
  return ps;
}

std::vector<double> concat_outputs(const vit::FeatureMap& fm) {
  auto a = fm.prefix_out.to_vector();
  auto b = fm.z.to_vector();
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_SUITE("vit") {
  TEST_CASE("patchify examples") {
    vit::ViTConfig c;
    c.channels = 1;
    c.image_size = 4;
    c.patch_size = 4;
    std::vector<double> img(16);
    for (std::size_t i = 0; i < 16; ++i) img[i] = double(i);
    CHECK(vit::patchify(img, c).size() == 16);
    CHECK(c.num_patches() == 1);

    c.patch_size = 2;
    auto p = vit::patchify(img, c);
    CHECK(c.num_patches() == 4);
    CHECK(std::vector<double>(p.begin(), p.begin() + 4) == std::vector<double>{0, 1, 4, 5});
    CHECK(std::vector<double>(p.begin() + 4, p.begin() + 8) == std::vector<double>{2, 3, 6, 7});
  }

  TEST_CASE("unpatchify inverts patchify") {
    auto c = small_config();
    Rng rng(1, 1);
    auto img = random_vec(rng, c.channels * c.image_size * c.image_size);
    CHECK(vit::unpatchify(vit::patchify(img, c), c) == img);
  }

  TEST_CASE("prefix replication counts") {
    vit::ViTConfig c;
    c.num_registers = 0;
    std::vector<double> one(c.embed_dim, 0.5);
    CHECK(vit::replicate_prefix(one, c, 1).size() / c.embed_dim == 2);
    c.num_registers = 4;
    Rng rng(2, 1);
    auto bank = random_vec(rng, 5 * c.embed_dim);
    auto r = vit::replicate_prefix(bank, c, 4);
    CHECK(r.size() / c.embed_dim == 25);
    for (std::size_t g = 0; g < 5; ++g)
      CHECK(std::vector<double>(r.begin() + g * bank.size(), r.begin() + (g + 1) * bank.size()) == bank);
  }

  TEST_CASE("replicate_for_parts copies every weight and replicates the prefix") {
    auto c = small_config();
    Rng rng(3, 1);
    auto base = vit::init_vit(c, rng);
    auto rep = vit::replicate_for_parts(base, c, 3, "x");
    CHECK(rep.size() == base.size());
    for (const auto& p : base.all()) {
      const auto& q = rep.get(p.name);
      CHECK(q.group == "x");
      if (p.name == "prefix") {
        CHECK(q.value.size() == 4 * p.value.size());
      } else {
        CHECK(q.value == p.value);
      }
    }
  }

  TEST_CASE("clique mask examples") {
    ad::Tape t;
    // All mass on part 0.
    std::vector<double> a(2 * 4, 0.0);
    for (std::size_t p = 0; p < 4; ++p) a[p] = 1.0;
    auto m = vit::build_clique_mask(t.constant({1, 2, 4}, a), vit::MaskVariant::Hard);
    CHECK(m.patch_clique == std::vector<int>{0, 0, 0, 0});

    // Left half part 0, right half part 1 on a 2x2 grid.
    std::vector<double> lr = {1, 0, 1, 0, 0, 1, 0, 1};
    m = vit::build_clique_mask(t.constant({1, 2, 4}, lr), vit::MaskVariant::Hard);
    CHECK(m.patch_clique == std::vector<int>{0, 1, 0, 1});

    // Ties go to the lowest index.
    std::vector<double> tie(3 * 2, 1.0 / 3.0);
    m = vit::build_clique_mask(t.constant({1, 3, 2}, tie), vit::MaskVariant::Ste);
    CHECK(m.patch_clique == std::vector<int>{0, 0});
    CHECK(m.soft_weights.defined());
  }

  TEST_CASE("hard mask links form a block-diagonal pattern") {
    auto m = vit::hard_mask(1, 3, 2, {0, 1, 1});
    auto a = vit::allowed_links(m, 2);
    const std::size_t T = 7;
    auto clique = [](std::size_t i) { return i < 4 ? int(i / 2) : std::vector<int>{0, 1, 1}[i - 4]; };
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < T; ++j) CHECK(a[i * T + j] == (clique(i) == clique(j)));
    CHECK_THROWS_AS(vit::hard_mask(1, 3, 2, {0, 2, 1}), ValidationError);
  }

  TEST_CASE("soft bias is the log co-membership probability") {
    ad::Tape t;
    // B=1, groups=2, 2 patches, one prefix token per group.
    std::vector<double> a = {0.7, 0.2, 0.3, 0.8};  // A[g][p]
    auto m = vit::build_clique_mask(t.constant({1, 2, 2}, a), vit::MaskVariant::Soft);
    auto bias = vit::soft_bias(m, 1).to_vector();
    const std::size_t T = 4;
    auto w = [&](std::size_t i, std::size_t j) { return bias[i * T + j]; };
    CHECK(w(0, 0) == 0.0);
    CHECK(w(0, 2) == doctest::Approx(std::log(0.7)).epsilon(1e-14));
    CHECK(w(1, 3) == doctest::Approx(std::log(0.8)).epsilon(1e-14));
    CHECK(w(2, 3) == doctest::Approx(std::log(0.7 * 0.2 + 0.3 * 0.8)).epsilon(1e-14));
    CHECK(w(0, 1) == doctest::Approx(std::log(vit::kSoftWeightFloor)).epsilon(1e-14));
    auto links = vit::allowed_links(m, 1);
    CHECK(links[0 * T + 1] == 0);
    CHECK(links[2 * T + 0] == 1);
    CHECK(links[2 * T + 3] == 1);
  }

  TEST_CASE("full mask equals a single-clique hard mask") {
    Rng rng(4, 1);
    ad::Tape t;
    const std::size_t B = 2, T = 6, D = 8;
    auto q = t.constant({B, T, D}, random_vec(rng, B * T * D));
    auto k = t.constant({B, T, D}, random_vec(rng, B * T * D));
    auto v = t.constant({B, T, D}, random_vec(rng, B * T * D));
    auto full = vit::masked_attention(q, k, v, 2, vit::full_mask(B, 4, 1), 2);
    auto hard = vit::masked_attention(q, k, v, 2, vit::hard_mask(B, 4, 1, std::vector<int>(B * 4, 0)), 2);
    CHECK(full.to_vector() == hard.to_vector());
  }

  TEST_CASE("hard attention ignores keys outside the query's clique") {
    Rng rng(5, 1);
    const std::size_t B = 1, groups = 3, per = 2, HW = 6, T = groups * per + HW, D = 8;
    std::vector<int> cl(HW);
    for (auto& x : cl) x = int(rng.below(groups));
    auto mask = vit::hard_mask(B, HW, groups, cl);
    auto clique = [&](std::size_t i) { return i < groups * per ? int(i / per) : cl[i - groups * per]; };
    auto qv = random_vec(rng, T * D), kv = random_vec(rng, T * D), vv = random_vec(rng, T * D);
    ad::Tape t;
    auto base = vit::masked_attention(t.constant({B, T, D}, qv), t.constant({B, T, D}, kv), t.constant({B, T, D}, vv),
                                      2, mask, per)
                    .to_vector();
    for (int c = 0; c < int(groups); ++c) {
      auto k2 = kv, v2 = vv;
      for (std::size_t j = 0; j < T; ++j)
        if (clique(j) != c)
          for (std::size_t e = 0; e < D; ++e) {
            k2[j * D + e] += rng.normal();
            v2[j * D + e] += rng.normal();
          }
      auto o = vit::masked_attention(t.constant({B, T, D}, qv), t.constant({B, T, D}, k2), t.constant({B, T, D}, v2),
                                     2, mask, per)
                   .to_vector();
      for (std::size_t i = 0; i < T; ++i)
        if (clique(i) == c)
          for (std::size_t e = 0; e < D; ++e) CHECK(o[i * D + e] == base[i * D + e]);
    }
  }

  TEST_CASE("full-mask forward matches a plain-loop reference") {
    auto c = small_config();
    auto ps = jittered_vit(c, 6, 1);
    Rng rng(6, 2);
    const std::size_t B = 2, per = c.channels * c.image_size * c.image_size;
    auto imgs = random_vec(rng, B * per);
    ad::Tape t;
    auto fm = vit::vit_forward(ps.bind(t, false), c, t.constant({B, c.channels, c.image_size, c.image_size}, imgs),
                               vit::full_mask(B, c.num_patches()));
    CHECK(fm.prefix_out.shape() == ad::Shape{B, c.prefix_per_group(), c.embed_dim});
    auto z = fm.z.to_vector(), pre = fm.prefix_out.to_vector();
    const std::size_t D = c.embed_dim, P = c.prefix_per_group(), HW = c.num_patches();
    double err = 0;
    for (std::size_t b = 0; b < B; ++b) {
      auto ref = RefViT{ps, c}.forward(std::span<const double>(imgs).subspan(b * per, per), 1, {});
      for (std::size_t i = 0; i < P * D; ++i) err = std::max(err, std::fabs(ref[i] - pre[b * P * D + i]));
      for (std::size_t i = 0; i < HW * D; ++i) err = std::max(err, std::fabs(ref[P * D + i] - z[b * HW * D + i]));
    }
    CHECK(err < 1e-12);
  }

  TEST_CASE("hard-mask forward matches the reference with the block-diagonal key mask") {
    auto c = small_config();
    const std::size_t G = 3;
    auto ps = jittered_vit(c, 7, G);
    Rng rng(7, 2);
    const std::size_t per = c.channels * c.image_size * c.image_size, HW = c.num_patches();
    auto img = random_vec(rng, per);
    std::vector<int> cl(HW);
    for (auto& x : cl) x = int(rng.below(G));
    auto mask = vit::hard_mask(1, HW, G, cl);
    ad::Tape t;
    auto fm = vit::vit_forward(ps.bind(t, false), c, t.constant({1, c.channels, c.image_size, c.image_size}, img), mask);
    auto got = concat_outputs(fm);
    auto ref = RefViT{ps, c}.forward(img, G, vit::allowed_links(mask, c.prefix_per_group()));
    double err = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) err = std::max(err, std::fabs(ref[i] - got[i]));
    CHECK(err < 1e-12);
  }

  TEST_CASE("depth 0 returns the embedded inputs") {
    auto c = small_config();
    c.depth = 0;
    auto ps = jittered_vit(c, 8, 1);
    Rng rng(8, 2);
    auto img = random_vec(rng, c.channels * c.image_size * c.image_size);
    ad::Tape t;
    auto fm = vit::vit_forward(ps.bind(t, false), c, t.constant({1, c.channels, c.image_size, c.image_size}, img),
                               vit::full_mask(1, c.num_patches()));
    CHECK(fm.prefix_out.to_vector() == ps.get("prefix").value);
    auto emb = RefViT::lin(vit::patchify(img, c), c.num_patches(), c.patch_dim(), c.embed_dim, ps.get("patch_w").value,
                           ps.get("patch_b").value);
    auto z = fm.z.to_vector();
    for (std::size_t i = 0; i < z.size(); ++i)
      CHECK(z[i] == doctest::Approx(emb[i] + ps.get("pos").value[i]).epsilon(1e-13));
  }

  TEST_CASE("hard-mask forward isolates each part stream") {
    auto c = small_config();
    const std::size_t G = 4, HW = c.num_patches(), per = c.channels * c.image_size * c.image_size;
    const std::size_t S = c.image_size, ps_ = c.patch_size, P = c.prefix_per_group(), D = c.embed_dim;
    for (std::uint64_t trial = 0; trial < 10; ++trial) {
      auto ps = jittered_vit(c, 100 + trial, G);
      Rng rng(trial, 3);
      auto img = random_vec(rng, per);
      std::vector<int> cl(HW);
      for (auto& x : cl) x = int(rng.below(G));
      auto mask = vit::hard_mask(1, HW, G, cl);
      auto run = [&](const std::vector<double>& im) {
        ad::Tape t;
        return concat_outputs(
            vit::vit_forward(ps.bind(t, false), c, t.constant({1, c.channels, S, S}, im), mask));
      };
      auto base = run(img);
      const int k = int(rng.below(G));
      auto pert = img;
      for (std::size_t ch = 0; ch < c.channels; ++ch)
        for (std::size_t y = 0; y < S; ++y)
          for (std::size_t x = 0; x < S; ++x)
            if (cl[(y / ps_) * c.grid() + x / ps_] != k) pert[(ch * S + y) * S + x] += rng.normal();
      auto out = run(pert);
      for (std::size_t i = k * P * D; i < (k + 1) * P * D; ++i) CHECK(out[i] == base[i]);
      for (std::size_t p = 0; p < HW; ++p)
        if (cl[p] == k)
          for (std::size_t e = 0; e < D; ++e) CHECK(out[G * P * D + p * D + e] == base[G * P * D + p * D + e]);
    }
  }

  TEST_CASE("ste forward equals hard bitwise and its gradients equal soft") {
    auto c = small_config();
    const std::size_t G = 3, HW = c.num_patches(), B = 2, S = c.image_size;
    for (std::uint64_t trial = 0; trial < 3; ++trial) {
      auto ps = jittered_vit(c, 200 + trial, G);
      Rng rng(trial, 4);
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
        auto maps = ad::softmax(ad::permute(lg, {0, 2, 1}));
        auto m = vit::build_clique_mask(ad::permute(maps, {0, 2, 1}), v);
        auto fm = vit::vit_forward(bp, c, t.constant({B, c.channels, S, S}, img), m);
        auto loss = ad::add(random_projection(fm.z, 5), random_projection(fm.prefix_out, 6));
        t.backward(loss);
        return Out{concat_outputs(fm), ps.gradients(t, bp), t.grad(lg)};
      };
      auto hard = run(vit::MaskVariant::Hard), soft = run(vit::MaskVariant::Soft), ste = run(vit::MaskVariant::Ste);
      CHECK(ste.fwd == hard.fwd);
      double err = 0;
      for (std::size_t i = 0; i < ste.grads.size(); ++i)
        for (std::size_t j = 0; j < ste.grads[i].size(); ++j)
          err = std::max(err, std::fabs(ste.grads[i][j] - soft.grads[i][j]));
      for (std::size_t j = 0; j < ste.map_grad.size(); ++j)
        err = std::max(err, std::fabs(ste.map_grad[j] - soft.map_grad[j]));
      CHECK(err < 1e-10);
      double nz = 0;
      for (double g : soft.map_grad) nz += std::fabs(g);
      CHECK(nz > 0);
      for (double g : hard.map_grad) CHECK(g == 0.0);
    }
  }

  TEST_CASE("group_cls picks the first token of each prefix group") {
    ad::Tape t;
    vit::ViTConfig c;
    c.embed_dim = 2;
    c.num_registers = 1;
    vit::FeatureMap fm;
    fm.prefix_out = t.constant({1, 4, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    CHECK(vit::group_cls(fm, c).to_vector() == std::vector<double>{1, 2, 5, 6});
  }

  TEST_CASE("config validation") {
    vit::ViTConfig c;
    c.image_size = 30;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = vit::ViTConfig{};
    c.heads = 5;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    CHECK_THROWS_AS(vit::parse_variant("blurry"), ValidationError);
  }
}
