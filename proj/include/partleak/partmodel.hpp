#pragma once

// Two-stage part model.
//
// Stage 1 compares frozen backbone patch features with K+1 learnable
// prototypes (the last one is background), pools features into part
// embeddings, normalises them with one shared LayerNorm and predicts
// attributes through per-part scores and a softmax routing over parts.
//
// Stage 2 re-encodes the image with a ViT whose prefix tokens are
// replicated per part; the part maps from stage 1 decide which patches
// each part stream may attend to.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "partleak/ops.hpp"
#include "partleak/params.hpp"
#include "partleak/vit.hpp"

namespace partleak::partmodel {

/// Part maps [B, K+1, H*W]. `assign` is what pooling and stage 2 consume
/// (hard Gumbel sample at train time, probabilities at eval); `probs` is
/// the plain softmax used by the shaping losses.
struct PartMaps {
  ad::Tensor assign;
  ad::Tensor probs;
  std::size_t grid = 0;  // H == W
};

struct PartEmbeddings {
  ad::Tensor foreground;  // [B, K, D]
  ad::Tensor background;  // [B, D]
  bool normalized = false;
};

struct RoutingResult {
  ad::Tensor scores;   // S [B, A, K]
  ad::Tensor weights;  // W [B, A, K], rows sum to 1 over K
  ad::Tensor logits;   // y_hat [B, A]
};

enum class OrthoVariant { Decorrelated, Legacy };

struct LossConfig {
  double lambda_orth = 1.0;
  double lambda_tv = 0.5;
  double lambda_eq = 1.0;
  double lambda_p = 1.0;
  double lambda_ent = 0.1;
  double eps = 1e-8;
  OrthoVariant ortho = OrthoVariant::Decorrelated;

  void validate() const;
};

struct LossBreakdown {
  double att_stage1 = 0, att_stage2 = 0, bg = 0, decorr = 0, tv = 0, eq = 0, presence = 0, entropy = 0, total = 0;
};

/// Loss tensors on one batch. `att_stage2` is left undefined in
/// single-stage mode.
struct LossTerms {
  ad::Tensor att_stage1, att_stage2, bg, decorr, tv, eq, presence, entropy;
};

// ---- stage 1 -------------------------------------------------------------

/// Logits = z . p_k / sqrt(D). Train: hard Gumbel-softmax (needs rng);
/// eval: softmax. z is [B, H*W, D]; prototypes [(K+1), D].
PartMaps part_attention_maps(const ad::Tensor& z, const ad::Tensor& prototypes, Rng* rng, bool train,
                             double temperature = 1.0);

/// v^k = (1/HW) sum_ij a^k_ij z_ij for every map including background.
PartEmbeddings pool_parts(const ad::Tensor& maps, const ad::Tensor& z);
/// One LayerNorm instance applied to every foreground embedding.
PartEmbeddings shared_layer_norm(const PartEmbeddings& v, const ad::Tensor& gamma, const ad::Tensor& beta);
/// S[:, :, k] = v_m^k W + b with one linear map shared by all parts.
ad::Tensor attribute_scores(const PartEmbeddings& normalized, const ad::Tensor& weight, const ad::Tensor& bias);
/// W = softmax over parts of S; y_hat = sum_k W * S.
RoutingResult softmax_routing(const ad::Tensor& scores);

// ---- losses --------------------------------------------------------------

/// Mean BCE with logits; labels must be 0 or 1.
ad::Tensor loss_attr(std::span<const double> labels, const ad::Tensor& logits);

struct OrthoLosses {
  ad::Tensor bg;
  ad::Tensor decorr;
};
/// Decorrelated: L_bg = mean_k cos^2(v_bg, v^k); L_decorr = mean over
/// ordered pairs i != j of cos_eps^2(u^i, u^j) with u^k = v^k - mean_k v^k.
/// Legacy: L_bg = 0 and L_decorr = mean over ordered pairs of all K+1 raw
/// vectors of cos^2. Both are averaged over the batch.
OrthoLosses loss_orthogonality(const PartEmbeddings& raw, const LossConfig& cfg);

/// Mean over foreground maps of (mean |horizontal diff| + mean |vertical diff|).
ad::Tensor loss_tv(const ad::Tensor& maps, std::size_t grid);
/// Mean squared difference between A(T(x)) and T(A(x)).
ad::Tensor loss_equivariance(const ad::Tensor& maps_of_transformed, const ad::Tensor& transformed_maps);
/// (1/(K+1)) sum_k (1 - max over batch and space of a^k).
ad::Tensor loss_presence(const ad::Tensor& maps);
/// Mean per-pixel Shannon entropy over the K+1 assignment distribution.
ad::Tensor loss_entropy(const ad::Tensor& maps);

/// L_att1 + L_att2 + lambda_orth (L_bg + L_decorr) + the weighted shaping
/// terms; fills `out` with the scalar values.
ad::Tensor total_loss(const LossTerms& terms, const LossConfig& cfg, LossBreakdown* out = nullptr);

/// Random affine maps (rotation <= 30 deg, translation <= 10 %, scale in
/// [0.9, 1.1]), one 2x3 matrix per batch.
std::vector<double> random_affine(Rng& rng);
/// Apply one 2x3 matrix to [B, C, S*S] maps laid out on a S x S grid.
ad::Tensor transform_maps(const ad::Tensor& maps, std::size_t grid, std::span<const double> theta);
/// Apply one 2x3 matrix to a batch of images [B, C, S, S] (constants).
std::vector<double> transform_images(std::span<const double> images, std::size_t batch, std::size_t channels,
                                     std::size_t size, std::span<const double> theta);

std::vector<double> ensemble_logits(std::span<const double> stage1, std::span<const double> stage2);

// ---- parameters and full model -----------------------------------------

/// Stage-1 learnable layers: "proto" (group "proto") and "ln_g", "ln_b",
/// "head_w", "head_b" (group "stage1").
ParamStore init_stage1(std::size_t embed_dim, std::size_t parts, std::size_t attributes, Rng& rng);
/// Stage-2 ViT copy (prefix replicated, names prefixed "s2.") plus its
/// own shared LN and attribute head.
ParamStore init_stage2(const ParamStore& backbone, const vit::ViTConfig& cfg, std::size_t parts,
                       std::size_t attributes, Rng& rng);

struct Stage2Output {
  ad::Tensor part_features;  // [B, K, D] foreground CLS outputs
  RoutingResult routing;
  vit::AttentionMask mask;
};

/// Stage 2 on images [B, C, S, S] with maps [B, K+1, H*W].
Stage2Output stage2_forward(const BoundParams& params, const vit::ViTConfig& cfg, const ad::Tensor& images,
                            const ad::Tensor& maps, vit::MaskVariant variant);

enum class Variant { Single, Soft, Hard, Ste };
std::string to_string(Variant v);
Variant parse_model_variant(const std::string& s);

struct ModelConfig {
  vit::ViTConfig vit;
  std::size_t parts = 4;
  std::size_t attributes = 0;
  double temperature = 1.0;
  Variant variant = Variant::Ste;
  LossConfig loss;
};

/// Everything a forward pass produced on one batch.
struct ModelOutput {
  PartMaps maps;
  PartEmbeddings raw;
  RoutingResult stage1;
  std::optional<Stage2Output> stage2;
  ad::Tensor loss;  // defined when labels were given
  LossBreakdown breakdown;
};

/// Full model forward. Parameters: frozen backbone under "bb.", stage 1,
/// and (two-stage variants) stage 2 under "s2.". With `labels` (row-major
/// [B, A]) the training loss is assembled; `rng` drives the Gumbel noise
/// and the equivariance transform and is required when `train` is set.
ModelOutput model_forward(const BoundParams& params, const ModelConfig& cfg, std::span<const double> images,
                          std::size_t batch, std::span<const double> labels, Rng* rng, bool train);

}  // namespace partleak::partmodel
