#include "partleak/vit.hpp"

#include <cmath>

namespace partleak::vit {

using ad::Tensor;

void ViTConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw ValidationError("ViTConfig: image_size must be a positive multiple of patch_size");
  }
  if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
    throw ValidationError("ViTConfig: embed_dim must be divisible by heads");
  }
  if (channels == 0 || mlp_ratio == 0) throw ValidationError("ViTConfig: channels and mlp_ratio must be positive");
}

std::string to_string(MaskVariant v) {
  switch (v) {
    case MaskVariant::Full: return "full";
    case MaskVariant::Soft: return "soft";
    case MaskVariant::Hard: return "hard";
    case MaskVariant::Ste: return "ste";
  }
  return "?";
}

MaskVariant parse_variant(const std::string& s) {
  if (s == "full") return MaskVariant::Full;
  if (s == "soft") return MaskVariant::Soft;
  if (s == "hard") return MaskVariant::Hard;
  if (s == "ste") return MaskVariant::Ste;
  throw ValidationError("unknown mask variant '" + s + "'");
}

AttentionMask full_mask(std::size_t batch, std::size_t patches, std::size_t groups) {
  AttentionMask m;
  m.variant = MaskVariant::Full;
  m.groups = groups;
  m.batch = batch;
  m.patches = patches;
  return m;
}

AttentionMask hard_mask(std::size_t batch, std::size_t patches, std::size_t groups, std::vector<int> patch_clique,
                        MaskVariant variant) {
  if (patch_clique.size() != batch * patches) throw ValidationError("hard_mask: clique label count mismatch");
  for (int c : patch_clique) {
    if (c < 0 || static_cast<std::size_t>(c) >= groups) throw ValidationError("hard_mask: clique id out of range");
  }
  AttentionMask m;
  m.variant = variant;
  m.groups = groups;
  m.batch = batch;
  m.patches = patches;
  m.patch_clique = std::move(patch_clique);
  return m;
}

AttentionMask build_clique_mask(const Tensor& part_maps, MaskVariant variant) {
  if (part_maps.rank() != 3) throw ValidationError("build_clique_mask: part maps must be [B, K+1, HW]");
  const std::size_t B = part_maps.dim(0), G = part_maps.dim(1), P = part_maps.dim(2);
  AttentionMask m;
  m.variant = variant;
  m.groups = G;
  m.batch = B;
  m.patches = P;
  if (variant == MaskVariant::Hard || variant == MaskVariant::Ste) {
    auto a = part_maps.data();
    m.patch_clique.resize(B * P);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t p = 0; p < P; ++p) {
        int best = 0;
        double bv = a[(b * G) * P + p];
        for (std::size_t k = 1; k < G; ++k) {
          const double v = a[(b * G + k) * P + p];
          if (v > bv) {
            bv = v;
            best = static_cast<int>(k);
          }
        }
        m.patch_clique[b * P + p] = best;
      }
  }
  if (variant == MaskVariant::Soft || variant == MaskVariant::Ste) m.soft_weights = part_maps;
  return m;
}

std::vector<std::uint8_t> allowed_links(const AttentionMask& mask, std::size_t per_group) {
  if (mask.variant == MaskVariant::Full) return {};
  const std::size_t P = mask.groups * per_group;
  const std::size_t T = P + mask.patches;
  std::vector<std::uint8_t> allowed(mask.batch * T * T, 0);
  const bool cliques = mask.variant == MaskVariant::Hard || mask.variant == MaskVariant::Ste;
  for (std::size_t b = 0; b < mask.batch; ++b) {
    auto clique_of = [&](std::size_t tok) -> int {
      if (tok < P) return static_cast<int>(tok / per_group);
      return cliques ? mask.patch_clique[b * mask.patches + (tok - P)] : -1;
    };
    std::uint8_t* a = allowed.data() + b * T * T;
    for (std::size_t i = 0; i < T; ++i) {
      const int ci = clique_of(i);
      for (std::size_t j = 0; j < T; ++j) {
        const int cj = clique_of(j);
        if (cliques) {
          a[i * T + j] = ci == cj;
        } else {
          // soft: only prefix-prefix links across replica groups are cut
          a[i * T + j] = !(i < P && j < P && ci != cj);
        }
      }
    }
  }
  return allowed;
}

Tensor soft_bias(const AttentionMask& mask, std::size_t per_group) {
  if (!mask.soft_weights.defined()) throw ValidationError("soft_bias: mask carries no soft weights");
  const Tensor& A = mask.soft_weights;  // [B, G, HW]
  ad::Tape& tape = A.tape();
  const std::size_t B = mask.batch, G = mask.groups, P = G * per_group;
  std::vector<double> prefix_members(B * P * G, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < P; ++t) prefix_members[(b * P + t) * G + t / per_group] = 1.0;
  Tensor members = ad::concat({tape.constant({B, P, G}, std::move(prefix_members)), ad::transpose_last2(A)}, 1);
  Tensor same = ad::bmm(members, ad::transpose_last2(members));
  return ad::log(ad::clamp_min(same, kSoftWeightFloor));
}

std::vector<double> patchify(std::span<const double> image, const ViTConfig& cfg) {
  const std::size_t C = cfg.channels, S = cfg.image_size, p = cfg.patch_size, n = cfg.grid();
  if (image.size() != C * S * S) throw ValidationError("patchify: image size does not match config");
  std::vector<double> out(n * n * C * p * p);
  std::size_t k = 0;
  for (std::size_t gy = 0; gy < n; ++gy)
    for (std::size_t gx = 0; gx < n; ++gx)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x) out[k++] = image[(c * S + gy * p + y) * S + gx * p + x];
  return out;
}

std::vector<double> unpatchify(std::span<const double> patches, const ViTConfig& cfg) {
  const std::size_t C = cfg.channels, S = cfg.image_size, p = cfg.patch_size, n = cfg.grid();
  if (patches.size() != C * S * S) throw ValidationError("unpatchify: size does not match config");
  std::vector<double> img(C * S * S);
  std::size_t k = 0;
  for (std::size_t gy = 0; gy < n; ++gy)
    for (std::size_t gx = 0; gx < n; ++gx)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x) img[(c * S + gy * p + y) * S + gx * p + x] = patches[k++];
  return img;
}

Tensor patchify(ad::Tape& tape, std::span<const double> images, std::size_t batch, const ViTConfig& cfg) {
  const std::size_t per = cfg.channels * cfg.image_size * cfg.image_size;
  if (images.size() != batch * per) throw ValidationError("patchify: batch size mismatch");
  std::vector<double> out;
  out.reserve(images.size());
  for (std::size_t b = 0; b < batch; ++b) {
    auto p = patchify(images.subspan(b * per, per), cfg);
    out.insert(out.end(), p.begin(), p.end());
  }
  return tape.constant({batch, cfg.num_patches(), cfg.patch_dim()}, std::move(out));
}

namespace {

std::vector<double> normal_init(Rng& rng, std::size_t n, double std) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, std);
  return v;
}

}  // namespace

ParamStore init_vit(const ViTConfig& cfg, Rng& rng, std::size_t groups, const std::string& group) {
  cfg.validate();
  const std::size_t D = cfg.embed_dim, H = D * cfg.mlp_ratio;
  ParamStore s;
  s.add("patch_w", {cfg.patch_dim(), D}, normal_init(rng, cfg.patch_dim() * D, 1.0 / std::sqrt(double(cfg.patch_dim()))),
        group);
  s.add("patch_b", {D}, std::vector<double>(D, 0.0), group);
  s.add("pos", {cfg.num_patches(), D}, normal_init(rng, cfg.num_patches() * D, 0.02), group);
  auto prefix = normal_init(rng, cfg.prefix_per_group() * D, 0.02);
  s.add("prefix", {groups * cfg.prefix_per_group(), D}, replicate_prefix(prefix, cfg, groups - 1), group);
  const double wstd = 0.02;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const std::string b = "blk" + std::to_string(l) + ".";
    s.add(b + "ln1_g", {D}, std::vector<double>(D, 1.0), group);
    s.add(b + "ln1_b", {D}, std::vector<double>(D, 0.0), group);
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      s.add(b + w, {D, D}, normal_init(rng, D * D, wstd), group);
      s.add(b + "b" + std::string(w + 1), {D}, std::vector<double>(D, 0.0), group);
    }
    s.add(b + "ln2_g", {D}, std::vector<double>(D, 1.0), group);
    s.add(b + "ln2_b", {D}, std::vector<double>(D, 0.0), group);
    s.add(b + "w1", {D, H}, normal_init(rng, D * H, wstd), group);
    s.add(b + "b1", {H}, std::vector<double>(H, 0.0), group);
    s.add(b + "w2", {H, D}, normal_init(rng, H * D, wstd), group);
    s.add(b + "b2", {D}, std::vector<double>(D, 0.0), group);
  }
  return s;
}

std::vector<double> replicate_prefix(std::span<const double> prefix, const ViTConfig& cfg, std::size_t parts) {
  const std::size_t n = cfg.prefix_per_group() * cfg.embed_dim;
  if (prefix.size() != n) throw ValidationError("replicate_prefix: expected one prefix group");
  std::vector<double> out;
  out.reserve((parts + 1) * n);
  for (std::size_t g = 0; g <= parts; ++g) out.insert(out.end(), prefix.begin(), prefix.end());
  return out;
}

ParamStore replicate_for_parts(const ParamStore& vit, const ViTConfig& cfg, std::size_t parts,
                               const std::string& group) {
  ParamStore out;
  for (const auto& p : vit.all()) {
    if (p.name == "prefix") {
      std::span<const double> first(p.value.data(), cfg.prefix_per_group() * cfg.embed_dim);
      out.add(p.name, {(parts + 1) * cfg.prefix_per_group(), cfg.embed_dim}, replicate_prefix(first, cfg, parts),
              group);
    } else {
      out.add(p.name, p.shape, p.value, group);
    }
  }
  return out;
}

Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                        const AttentionMask& mask, std::size_t per_group) {
  const std::size_t T = mask.tokens(per_group);
  if (q.rank() != 3 || q.dim(0) != mask.batch || q.dim(1) != T) {
    throw ValidationError("masked_attention: token count inconsistent with mask");
  }
  switch (mask.variant) {
    case MaskVariant::Full: return ad::attention(q, k, v, heads, {});
    case MaskVariant::Hard: return ad::attention(q, k, v, heads, allowed_links(mask, per_group));
    case MaskVariant::Soft: return ad::attention(q, k, v, heads, allowed_links(mask, per_group), soft_bias(mask, per_group));
    case MaskVariant::Ste: {
      AttentionMask hard = mask;
      hard.variant = MaskVariant::Hard;
      AttentionMask soft = mask;
      soft.variant = MaskVariant::Soft;
      Tensor h = masked_attention(q, k, v, heads, hard, per_group);
      Tensor s = masked_attention(q, k, v, heads, soft, per_group);
      return ad::straight_through(h, s);
    }
  }
  throw ValidationError("masked_attention: unknown variant");
}

namespace {

// One pass under a non-ste mask.
FeatureMap forward_pass(const BoundParams& params, const ViTConfig& cfg, const Tensor& images, const AttentionMask& mask,
                        const std::string& pre) {
  ad::Tape& tape = images.tape();
  const std::size_t B = images.dim(0), HW = cfg.num_patches(), D = cfg.embed_dim;
  const std::size_t per_group = cfg.prefix_per_group();
  const Tensor& prefix = params[pre + "prefix"];
  const std::size_t P = prefix.dim(0);
  if (P != mask.groups * per_group) throw ValidationError("vit_forward: prefix bank does not match mask groups");
  if (mask.batch != B || mask.patches != HW) throw ValidationError("vit_forward: mask does not match batch");

  Tensor patches = patchify(tape, images.data(), B, cfg);
  Tensor emb = ad::add(ad::linear(patches, params[pre + "patch_w"], params[pre + "patch_b"]), params[pre + "pos"]);
  Tensor x = ad::concat({ad::expand(ad::reshape(prefix, {1, P, D}), {B, P, D}), emb}, 1);

  // Mask-derived inputs are built once and shared by every layer.
  std::vector<std::uint8_t> allowed = allowed_links(mask, per_group);
  Tensor bias;
  if (mask.variant == MaskVariant::Soft) bias = soft_bias(mask, per_group);

  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const std::string b = pre + "blk" + std::to_string(l) + ".";
    Tensor h = ad::layer_norm(x, params[b + "ln1_g"], params[b + "ln1_b"]);
    Tensor q = ad::linear(h, params[b + "wq"], params[b + "bq"]);
    Tensor k = ad::linear(h, params[b + "wk"], params[b + "bk"]);
    Tensor v = ad::linear(h, params[b + "wv"], params[b + "bv"]);
    Tensor a = ad::attention(q, k, v, cfg.heads, allowed, bias);
    x = ad::add(x, ad::linear(a, params[b + "wo"], params[b + "bo"]));
    h = ad::layer_norm(x, params[b + "ln2_g"], params[b + "ln2_b"]);
    h = ad::gelu(ad::linear(h, params[b + "w1"], params[b + "b1"]));
    x = ad::add(x, ad::linear(h, params[b + "w2"], params[b + "b2"]));
  }
  return {ad::narrow(x, 1, P, HW), ad::narrow(x, 1, 0, P)};
}

}  // namespace

FeatureMap vit_forward(const BoundParams& params, const ViTConfig& cfg, const Tensor& images, const AttentionMask& mask,
                       const std::string& prefix) {
  cfg.validate();
  if (images.rank() != 4 || images.dim(1) != cfg.channels || images.dim(2) != cfg.image_size ||
      images.dim(3) != cfg.image_size) {
    throw ValidationError("vit_forward: images must be [B, C, S, S] matching the config");
  }
  if (mask.variant != MaskVariant::Ste) return forward_pass(params, cfg, images, mask, prefix);
  AttentionMask hard = mask;
  hard.variant = MaskVariant::Hard;
  AttentionMask soft = mask;
  soft.variant = MaskVariant::Soft;
  FeatureMap h = forward_pass(params, cfg, images, hard, prefix);
  FeatureMap s = forward_pass(params, cfg, images, soft, prefix);
  return {ad::straight_through(h.z, s.z), ad::straight_through(h.prefix_out, s.prefix_out)};
}

Tensor group_cls(const FeatureMap& fm, const ViTConfig& cfg) {
  const std::size_t B = fm.prefix_out.dim(0), P = fm.prefix_out.dim(1), D = fm.prefix_out.dim(2);
  const std::size_t per = cfg.prefix_per_group(), G = P / per;
  if (per == 1) return fm.prefix_out;
  Tensor r = ad::reshape(fm.prefix_out, {B * G, per, D});
  return ad::reshape(ad::narrow(r, 1, 0, 1), {B, G, D});
}

}  // namespace partleak::vit
