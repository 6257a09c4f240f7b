#include "partleak/partmodel.hpp"

#include <cmath>
#include <numbers>

namespace partleak::partmodel {

using ad::Tensor;

void LossConfig::validate() const {
  for (double l : {lambda_orth, lambda_tv, lambda_eq, lambda_p, lambda_ent}) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw ValidationError("LossConfig: loss weights must be finite and >= 0");
  }
  if (!(eps > 0.0)) throw ValidationError("LossConfig: eps must be > 0");
}

PartMaps part_attention_maps(const Tensor& z, const Tensor& prototypes, Rng* rng, bool train, double temperature) {
  if (z.rank() != 3 || prototypes.rank() != 2 || prototypes.dim(1) != z.dim(2)) {
    throw ValidationError("part_attention_maps: expected z [B, HW, D] and prototypes [K+1, D]");
  }
  if (prototypes.dim(0) < 2) throw ValidationError("part_attention_maps: need at least one part plus background");
  const std::size_t HW = z.dim(1);
  const std::size_t grid = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(HW))));
  if (grid * grid != HW) throw ValidationError("part_attention_maps: patch grid must be square");
  const double scale = 1.0 / std::sqrt(static_cast<double>(z.dim(2)));
  Tensor logits = ad::mul_scalar(ad::linear(z, ad::transpose_last2(prototypes)), scale);  // [B, HW, K+1]
  PartMaps out;
  out.grid = grid;
  out.probs = ad::permute(ad::softmax(logits), {0, 2, 1});
  if (train) {
    if (rng == nullptr) throw ValidationError("part_attention_maps: train mode needs an rng");
    out.assign = ad::permute(ad::gumbel_softmax(logits, temperature, *rng, true), {0, 2, 1});
  } else {
    out.assign = out.probs;
  }
  return out;
}

PartEmbeddings pool_parts(const Tensor& maps, const Tensor& z) {
  if (maps.rank() != 3 || z.rank() != 3 || maps.dim(0) != z.dim(0) || maps.dim(2) != z.dim(1)) {
    throw ValidationError("pool_parts: maps [B, K+1, HW] and z [B, HW, D] disagree");
  }
  const std::size_t B = maps.dim(0), G = maps.dim(1), HW = maps.dim(2), D = z.dim(2);
  Tensor v = ad::mul_scalar(ad::bmm(maps, z), 1.0 / static_cast<double>(HW));
  PartEmbeddings out;
  out.foreground = ad::narrow(v, 1, 0, G - 1);
  out.background = ad::reshape(ad::narrow(v, 1, G - 1, 1), {B, D});
  return out;
}

PartEmbeddings shared_layer_norm(const PartEmbeddings& v, const Tensor& gamma, const Tensor& beta) {
  PartEmbeddings out = v;
  out.foreground = ad::layer_norm(v.foreground, gamma, beta);
  out.normalized = true;
  return out;
}

Tensor attribute_scores(const PartEmbeddings& normalized, const Tensor& weight, const Tensor& bias) {
  if (!normalized.normalized) throw ValidationError("attribute_scores: embeddings must pass the shared LayerNorm first");
  return ad::permute(ad::linear(normalized.foreground, weight, bias), {0, 2, 1});
}

RoutingResult softmax_routing(const Tensor& scores) {
  if (scores.rank() != 3 || scores.dim(2) == 0) throw ValidationError("softmax_routing: scores must be [B, A, K], K >= 1");
  RoutingResult r;
  r.scores = scores;
  r.weights = ad::softmax(scores);
  r.logits = ad::sum_axis(ad::mul(r.weights, scores), 2);
  return r;
}

Tensor loss_attr(std::span<const double> labels, const Tensor& logits) {
  if (labels.size() != logits.size()) throw ValidationError("loss_attr: label count does not match logits");
  for (double y : labels) {
    if (y != 0.0 && y != 1.0) throw ValidationError("loss_attr: labels must be 0 or 1");
  }
  return ad::bce_with_logits(logits, labels);
}

namespace {

// Mean over ordered pairs i != j of cos^2(x_i, x_j) for x [B, N, D].
Tensor pairwise_cos2(const Tensor& x, double eps) {
  ad::Tape& tape = x.tape();
  const std::size_t B = x.dim(0), N = x.dim(1), D = x.dim(2);
  if (N < 2) return tape.scalar(0.0);
  Tensor xi = ad::expand(ad::reshape(x, {B, N, 1, D}), {B, N, N, D});
  Tensor xj = ad::expand(ad::reshape(x, {B, 1, N, D}), {B, N, N, D});
  std::vector<double> off(N * N, 1.0);
  for (std::size_t i = 0; i < N; ++i) off[i * N + i] = 0.0;
  Tensor c2 = ad::mul(ad::square(ad::cosine(xi, xj, eps)), tape.constant({N, N}, std::move(off)));
  return ad::mul_scalar(ad::sum(c2), 1.0 / static_cast<double>(B * N * (N - 1)));
}

}  // namespace

OrthoLosses loss_orthogonality(const PartEmbeddings& raw, const LossConfig& cfg) {
  cfg.validate();
  const Tensor& fg = raw.foreground;
  if (fg.rank() != 3 || raw.background.rank() != 2) throw ValidationError("loss_orthogonality: bad embedding shapes");
  ad::Tape& tape = fg.tape();
  const std::size_t B = fg.dim(0), K = fg.dim(1), D = fg.dim(2);
  OrthoLosses out;
  if (cfg.ortho == OrthoVariant::Legacy) {
    out.bg = tape.scalar(0.0);
    out.decorr = pairwise_cos2(ad::concat({fg, ad::reshape(raw.background, {B, 1, D})}, 1), cfg.eps);
    return out;
  }
  Tensor bg = ad::expand(ad::reshape(raw.background, {B, 1, D}), {B, K, D});
  out.bg = ad::mean(ad::square(ad::cosine(bg, fg, cfg.eps)));
  Tensor centroid = ad::expand(ad::reshape(ad::mean_axis(fg, 1), {B, 1, D}), {B, K, D});
  out.decorr = pairwise_cos2(ad::sub(fg, centroid), cfg.eps);
  return out;
}

Tensor loss_tv(const Tensor& maps, std::size_t grid) {
  if (maps.rank() != 3 || maps.dim(2) != grid * grid || maps.dim(1) < 2) {
    throw ValidationError("loss_tv: maps must be [B, K+1, grid*grid]");
  }
  const std::size_t B = maps.dim(0), K = maps.dim(1) - 1;
  if (grid < 2) return maps.tape().scalar(0.0);
  Tensor a = ad::reshape(ad::narrow(maps, 1, 0, K), {B, K, grid, grid});
  Tensor dh = ad::sub(ad::narrow(a, 3, 1, grid - 1), ad::narrow(a, 3, 0, grid - 1));
  Tensor dv = ad::sub(ad::narrow(a, 2, 1, grid - 1), ad::narrow(a, 2, 0, grid - 1));
  return ad::add(ad::mean(ad::abs(dh)), ad::mean(ad::abs(dv)));
}

Tensor loss_equivariance(const Tensor& maps_of_transformed, const Tensor& transformed_maps) {
  if (maps_of_transformed.shape() != transformed_maps.shape()) {
    throw ValidationError("loss_equivariance: map shapes differ");
  }
  return ad::mean(ad::square(ad::sub(maps_of_transformed, transformed_maps)));
}

Tensor loss_presence(const Tensor& maps) {
  if (maps.rank() != 3) throw ValidationError("loss_presence: maps must be [B, K+1, HW]");
  const std::size_t B = maps.dim(0), G = maps.dim(1), HW = maps.dim(2);
  Tensor per_part = ad::reshape(ad::permute(maps, {1, 0, 2}), {G, B * HW});
  return ad::add_scalar(ad::neg(ad::mean(ad::max_axis(per_part, 1))), 1.0);
}

Tensor loss_entropy(const Tensor& maps) {
  if (maps.rank() != 3) throw ValidationError("loss_entropy: maps must be [B, K+1, HW]");
  return ad::mean(ad::sum_axis(ad::neg_xlogx(maps), 1));
}

Tensor total_loss(const LossTerms& t, const LossConfig& cfg, LossBreakdown* out) {
  cfg.validate();
  for (const Tensor* x : {&t.att_stage1, &t.bg, &t.decorr, &t.tv, &t.eq, &t.presence, &t.entropy}) {
    if (!x->defined() || x->size() != 1) throw ValidationError("total_loss: every loss term must be a scalar");
  }
  Tensor total = t.att_stage1;
  if (t.att_stage2.defined()) total = ad::add(total, t.att_stage2);
  total = ad::add(total, ad::mul_scalar(ad::add(t.bg, t.decorr), cfg.lambda_orth));
  total = ad::add(total, ad::mul_scalar(t.tv, cfg.lambda_tv));
  total = ad::add(total, ad::mul_scalar(t.eq, cfg.lambda_eq));
  total = ad::add(total, ad::mul_scalar(t.presence, cfg.lambda_p));
  total = ad::add(total, ad::mul_scalar(t.entropy, cfg.lambda_ent));
  total = ad::reshape(total, {1});
  if (out != nullptr) {
    out->att_stage1 = t.att_stage1.item();
    out->att_stage2 = t.att_stage2.defined() ? t.att_stage2.item() : 0.0;
    out->bg = t.bg.item();
    out->decorr = t.decorr.item();
    out->tv = t.tv.item();
    out->eq = t.eq.item();
    out->presence = t.presence.item();
    out->entropy = t.entropy.item();
    out->total = total.item();
  }
  return total;
}

std::vector<double> random_affine(Rng& rng) {
  const double angle = rng.uniform(-30.0, 30.0) * std::numbers::pi / 180.0;
  const double scale = rng.uniform(0.9, 1.1);
  // normalised coordinates span 2 units, so 10 % of the image is 0.2
  const double tx = rng.uniform(-0.2, 0.2);
  const double ty = rng.uniform(-0.2, 0.2);
  const double c = std::cos(angle) * scale, s = std::sin(angle) * scale;
  return {c, -s, tx, s, c, ty};
}

Tensor transform_maps(const Tensor& maps, std::size_t grid, std::span<const double> theta) {
  if (theta.size() != 6) throw ValidationError("transform_maps: theta must hold one 2x3 matrix");
  if (maps.rank() != 3 || maps.dim(2) != grid * grid) throw ValidationError("transform_maps: maps must be [B, C, grid^2]");
  const std::size_t B = maps.dim(0), C = maps.dim(1);
  std::vector<double> th;
  th.reserve(6 * B);
  for (std::size_t b = 0; b < B; ++b) th.insert(th.end(), theta.begin(), theta.end());
  Tensor out = ad::affine_transform(ad::reshape(maps, {B, C, grid, grid}), th);
  return ad::reshape(out, {B, C, grid * grid});
}

std::vector<double> transform_images(std::span<const double> images, std::size_t batch, std::size_t channels,
                                     std::size_t size, std::span<const double> theta) {
  if (images.size() != batch * channels * size * size) throw ValidationError("transform_images: size mismatch");
  ad::Tape tape;
  Tensor x = tape.constant({batch, channels, size * size}, std::vector<double>(images.begin(), images.end()));
  return transform_maps(x, size, theta).to_vector();
}

std::vector<double> ensemble_logits(std::span<const double> stage1, std::span<const double> stage2) {
  if (stage1.size() != stage2.size()) throw ValidationError("ensemble_logits: length mismatch");
  std::vector<double> out(stage1.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stage1[i] + stage2[i];
  return out;
}

namespace {

std::vector<double> normal_vec(Rng& rng, std::size_t n, double std) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, std);
  return v;
}

void add_head(ParamStore& s, const std::string& pre, std::size_t D, std::size_t A, Rng& rng, const std::string& group) {
  s.add(pre + "ln_g", {D}, std::vector<double>(D, 1.0), group);
  s.add(pre + "ln_b", {D}, std::vector<double>(D, 0.0), group);
  s.add(pre + "head_w", {D, A}, normal_vec(rng, D * A, 0.02), group);
  s.add(pre + "head_b", {A}, std::vector<double>(A, 0.0), group);
}

}  // namespace

ParamStore init_stage1(std::size_t embed_dim, std::size_t parts, std::size_t attributes, Rng& rng) {
  if (parts == 0 || attributes == 0 || embed_dim == 0) throw ValidationError("init_stage1: sizes must be positive");
  ParamStore s;
  s.add("proto", {parts + 1, embed_dim}, normal_vec(rng, (parts + 1) * embed_dim, 1.0), "proto");
  add_head(s, "", embed_dim, attributes, rng, "stage1");
  return s;
}

ParamStore init_stage2(const ParamStore& backbone, const vit::ViTConfig& cfg, std::size_t parts,
                       std::size_t attributes, Rng& rng) {
  if (parts == 0 || attributes == 0) throw ValidationError("init_stage2: sizes must be positive");
  ParamStore s;
  s.merge(vit::replicate_for_parts(backbone, cfg, parts, "stage2_backbone"), "s2.", "stage2_backbone");
  add_head(s, "s2.", cfg.embed_dim, attributes, rng, "stage2");
  return s;
}

Stage2Output stage2_forward(const BoundParams& params, const vit::ViTConfig& cfg, const Tensor& images,
                            const Tensor& maps, vit::MaskVariant variant) {
  if (variant == vit::MaskVariant::Full) throw ValidationError("stage2_forward: variant must be soft, hard or ste");
  if (maps.rank() != 3 || maps.dim(1) < 2) throw ValidationError("stage2_forward: maps must be [B, K+1, HW]");
  const std::size_t B = maps.dim(0), K = maps.dim(1) - 1;
  Stage2Output out;
  out.mask = vit::build_clique_mask(maps, variant);
  vit::FeatureMap fm = vit::vit_forward(params, cfg, images, out.mask, "s2.");
  Tensor cls = vit::group_cls(fm, cfg);
  out.part_features = ad::narrow(cls, 1, 0, K);
  PartEmbeddings pe;
  pe.foreground = out.part_features;
  pe.background = ad::reshape(ad::narrow(cls, 1, K, 1), {B, cfg.embed_dim});
  PartEmbeddings vm = shared_layer_norm(pe, params["s2.ln_g"], params["s2.ln_b"]);
  out.routing = softmax_routing(attribute_scores(vm, params["s2.head_w"], params["s2.head_b"]));
  return out;
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Single: return "single";
    case Variant::Soft: return "soft";
    case Variant::Hard: return "hard";
    case Variant::Ste: return "ste";
  }
  return "?";
}

Variant parse_model_variant(const std::string& s) {
  if (s == "single") return Variant::Single;
  if (s == "soft") return Variant::Soft;
  if (s == "hard") return Variant::Hard;
  if (s == "ste") return Variant::Ste;
  throw ValidationError("unknown variant '" + s + "' (expected single, soft, hard or ste)");
}

namespace {

vit::MaskVariant mask_variant(Variant v) {
  switch (v) {
    case Variant::Soft: return vit::MaskVariant::Soft;
    case Variant::Hard: return vit::MaskVariant::Hard;
    case Variant::Ste: return vit::MaskVariant::Ste;
    default: break;
  }
  throw ValidationError("mask_variant: single-stage model has no stage-2 mask");
}

Tensor backbone_features(ad::Tape& tape, const BoundParams& params, const vit::ViTConfig& cfg,
                         std::span<const double> images, std::size_t batch) {
  Tensor x = tape.constant({batch, cfg.channels, cfg.image_size, cfg.image_size},
                           std::vector<double>(images.begin(), images.end()));
  return vit::vit_forward(params, cfg, x, vit::full_mask(batch, cfg.num_patches()), "bb.").z;
}

}  // namespace

ModelOutput model_forward(const BoundParams& params, const ModelConfig& cfg, std::span<const double> images,
                          std::size_t batch, std::span<const double> labels, Rng* rng, bool train) {
  cfg.vit.validate();
  cfg.loss.validate();
  const std::size_t per_image = cfg.vit.channels * cfg.vit.image_size * cfg.vit.image_size;
  if (batch == 0 || images.size() != batch * per_image) throw ValidationError("model_forward: image buffer size mismatch");
  if (!labels.empty() && labels.size() != batch * cfg.attributes) {
    throw ValidationError("model_forward: label buffer size mismatch");
  }
  if (train && rng == nullptr) throw ValidationError("model_forward: training needs an rng");
  ad::Tape& tape = params["proto"].tape();

  ModelOutput out;
  Tensor z = backbone_features(tape, params, cfg.vit, images, batch);
  out.maps = part_attention_maps(z, params["proto"], rng, train, cfg.temperature);
  out.raw = pool_parts(out.maps.assign, z);
  PartEmbeddings vm = shared_layer_norm(out.raw, params["ln_g"], params["ln_b"]);
  out.stage1 = softmax_routing(attribute_scores(vm, params["head_w"], params["head_b"]));

  if (cfg.variant != Variant::Single) {
    Tensor x = tape.constant({batch, cfg.vit.channels, cfg.vit.image_size, cfg.vit.image_size},
                             std::vector<double>(images.begin(), images.end()));
    out.stage2 = stage2_forward(params, cfg.vit, x, out.maps.probs, mask_variant(cfg.variant));
  }
  if (labels.empty()) return out;

  LossTerms terms;
  terms.att_stage1 = loss_attr(labels, out.stage1.logits);
  if (out.stage2) terms.att_stage2 = loss_attr(labels, out.stage2->routing.logits);
  OrthoLosses ortho = loss_orthogonality(out.raw, cfg.loss);
  terms.bg = ortho.bg;
  terms.decorr = ortho.decorr;
  terms.tv = loss_tv(out.maps.probs, out.maps.grid);
  terms.presence = loss_presence(out.maps.probs);
  terms.entropy = loss_entropy(out.maps.probs);
  if (rng != nullptr) {
    const std::vector<double> theta = random_affine(*rng);
    const std::vector<double> moved =
        transform_images(images, batch, cfg.vit.channels, cfg.vit.image_size, theta);
    Tensor zt = backbone_features(tape, params, cfg.vit, moved, batch);
    PartMaps mt = part_attention_maps(zt, params["proto"], nullptr, false, cfg.temperature);
    terms.eq = loss_equivariance(mt.probs, transform_maps(out.maps.probs, out.maps.grid, theta));
  } else {
    terms.eq = tape.scalar(0.0);
  }
  out.loss = total_loss(terms, cfg.loss, &out.breakdown);
  return out;
}

}  // namespace partleak::partmodel
