#pragma once

// Minimal pre-norm Vision Transformer with replicated prefix tokens and
// clique-restricted attention.
//
// Token layout per image: `groups * (1 + num_registers)` prefix tokens,
// group-major (group g = [CLS_g, REG_g0, ...]), followed by the H*W patch
// tokens in row-major order. Group g is the stream for part g; the last
// group (index K) belongs to the background.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "partleak/ops.hpp"
#include "partleak/params.hpp"
#include "partleak/rng.hpp"

namespace partleak::vit {

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t embed_dim = 64;
  std::size_t depth = 3;
  std::size_t heads = 4;
  std::size_t num_registers = 1;
  std::size_t mlp_ratio = 4;

  void validate() const;
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t prefix_per_group() const { return 1 + num_registers; }
};

enum class MaskVariant { Full, Soft, Hard, Ste };

std::string to_string(MaskVariant v);
MaskVariant parse_variant(const std::string& s);

/// Which attention links exist. For hard/ste every patch belongs to exactly
/// one clique (`patch_clique`), and prefix group g belongs to clique g.
/// For soft/ste `soft_weights` holds the part maps [B, groups, H*W].
struct AttentionMask {
  MaskVariant variant = MaskVariant::Full;
  std::size_t groups = 1;
  std::size_t batch = 0;
  std::size_t patches = 0;
  std::vector<int> patch_clique;  // [batch * patches]
  ad::Tensor soft_weights;

  std::size_t tokens(std::size_t per_group) const { return groups * per_group + patches; }
};

/// Floor applied to soft weights before taking the log bias.
inline constexpr double kSoftWeightFloor = 1e-6;

/// Unrestricted attention over `groups` prefix groups.
AttentionMask full_mask(std::size_t batch, std::size_t patches, std::size_t groups = 1);
/// Hard clique mask from explicit patch -> clique labels in [0, groups).
AttentionMask hard_mask(std::size_t batch, std::size_t patches, std::size_t groups, std::vector<int> patch_clique,
                        MaskVariant variant = MaskVariant::Hard);
/// Clique mask from part maps A [B, K+1, H*W]. hard/ste: per patch argmax
/// (lowest index wins ties); soft/ste also keep A for the soft bias.
AttentionMask build_clique_mask(const ad::Tensor& part_maps, MaskVariant variant);

/// [B, T, T] key-allowed matrix implied by the mask (empty for full).
std::vector<std::uint8_t> allowed_links(const AttentionMask& mask, std::size_t per_group);
/// Differentiable [B, T, T] soft bias log(max(w, floor)), where w is the
/// probability that query and key fall in the same clique.
ad::Tensor soft_bias(const AttentionMask& mask, std::size_t per_group);

/// Image [C, h, w] -> [H*W, C*p*p] patches, row-major over the patch grid;
/// each patch is flattened channel, row, column.
std::vector<double> patchify(std::span<const double> image, const ViTConfig& cfg);
std::vector<double> unpatchify(std::span<const double> patches, const ViTConfig& cfg);
/// Batched patchify of [B, C, h, w] into a constant [B, H*W, C*p*p] tensor.
ad::Tensor patchify(ad::Tape& tape, std::span<const double> images, std::size_t batch, const ViTConfig& cfg);

/// Learned parameters of a ViT with `groups` prefix groups.
ParamStore init_vit(const ViTConfig& cfg, Rng& rng, std::size_t groups = 1, const std::string& group = "backbone");
/// (K+1) copies of a [(1+R), D] prefix bank, bitwise equal to the source.
std::vector<double> replicate_prefix(std::span<const double> prefix, const ViTConfig& cfg, std::size_t parts);
/// Copy of a single-group ViT whose prefix bank is replicated for K parts.
ParamStore replicate_for_parts(const ParamStore& vit, const ViTConfig& cfg, std::size_t parts,
                               const std::string& group);

/// Multi-head attention under a clique mask.
///  full: plain attention; hard: keys outside the query's clique excluded;
///  soft: additive log-weight bias on the scaled logits;
///  ste:  forward of hard, gradient of soft.
ad::Tensor masked_attention(const ad::Tensor& q, const ad::Tensor& k, const ad::Tensor& v, std::size_t heads,
                            const AttentionMask& mask, std::size_t per_group);

struct FeatureMap {
  ad::Tensor z;           // [B, H*W, D] patch features
  ad::Tensor prefix_out;  // [B, groups*(1+R), D]
};

/// Full forward pass. Params are bound with a name prefix (e.g. "s2." for
/// the second-stage copy). Under the ste variant the hard and soft passes
/// both run and are joined with a straight-through at the output, so the
/// forward equals the hard pass exactly and gradients are those of the
/// soft pass.
FeatureMap vit_forward(const BoundParams& params, const ViTConfig& cfg, const ad::Tensor& images,
                       const AttentionMask& mask, const std::string& prefix = "");

/// CLS output of each prefix group: [B, groups, D].
ad::Tensor group_cls(const FeatureMap& fm, const ViTConfig& cfg);

}  // namespace partleak::vit
