#pragma once

// Leakage measurement: part feature extraction (late / early masking),
// average precision, the keypoint contingency between discovered and
// ground-truth parts, part specificity, most-predictive-part overlap, and
// NMI / ARI part-quality scores.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "partleak/params.hpp"
#include "partleak/probe.hpp"
#include "partleak/vit.hpp"

namespace partleak::leak {

/// Sink for non-fatal problems (skipped attributes, empty masks). May be null.
using Warnings = std::vector<std::string>;

struct AttributeSpec {
  std::vector<std::string> names;
  std::vector<std::size_t> group_of;  // g(a), 0-based
  std::size_t groups = 0;

  std::size_t size() const { return group_of.size(); }
  std::vector<std::size_t> attributes_in(std::size_t g) const;
  void validate() const;
};

// ---- average precision ----------------------------------------------------

/// AP = mean over positives of precision at their rank; scores sorted
/// descending with ties kept in input order. nullopt without positives.
std::optional<double> average_precision(std::span<const double> scores, std::span<const double> labels);

struct MeanAp {
  double value = 0.0;  // NaN when no attribute was usable
  std::size_t used = 0;
  std::vector<std::size_t> skipped;
};

/// mAP over the listed attribute columns of row-major scores / labels
/// [n, A]. Columns without positives are skipped and reported.
MeanAp mean_ap(std::span<const double> scores, std::span<const double> labels, std::size_t n, std::size_t attributes,
               std::span<const std::size_t> columns, Warnings* warnings = nullptr);

// ---- contingency ------------------------------------------------------------

/// One keypoint per (sample, ground-truth part) on the mask grid.
struct KeypointSet {
  std::size_t samples = 0, parts = 0;
  std::vector<int> row, col;         // [samples * parts]
  std::vector<std::uint8_t> visible;  // [samples * parts]
};

struct PartAssignment {
  std::size_t groups = 0, parts = 0;
  std::vector<double> c;  // [G, K]
  double tau = 0.25;
  std::vector<std::vector<std::size_t>> k_plus, k_minus;
};

/// c_g^k = #samples whose visible keypoint of g lies in discovered mask k
/// / #samples where g is visible. Masks are binary [samples, K, height*width].
PartAssignment contingency(const KeypointSet& keypoints, std::span<const std::uint8_t> masks, std::size_t parts,
                           std::size_t height, std::size_t width, double tau = 0.25);
/// Recompute K+ / K- for a new threshold.
void assign_parts(PartAssignment& asg, double tau);

// ---- part specificity -------------------------------------------------------

struct ProbeMatrix {
  std::size_t parts = 0, groups = 0;
  std::vector<double> map;  // [K, G]
  double at(std::size_t k, std::size_t g) const { return map[k * groups + g]; }
};

struct PSReport {
  std::vector<double> per_group;
  double ps = 0.0;
};

PSReport part_specificity(const ProbeMatrix& m, const PartAssignment& asg);

// ---- MPPO -------------------------------------------------------------------

enum class KStarMode { PerSample, PerAttributeMean };

struct MPPOReport {
  std::vector<double> per_attribute;  // NaN for skipped attributes
  std::vector<std::size_t> skipped;
  double mppo = 0.0;
};

/// logits [n, K, A]: probe k's logit for attribute a from sample part k.
/// discovered [n, K, cells], gt [n, G, cells] binary masks; labels [n, A].
MPPOReport mppo(std::span<const double> logits, std::span<const double> labels,
                std::span<const std::uint8_t> discovered, std::span<const std::uint8_t> gt, std::size_t n,
                std::size_t parts, std::size_t cells, const AttributeSpec& spec,
                KStarMode mode = KStarMode::PerSample, Warnings* warnings = nullptr);

// ---- NMI / ARI --------------------------------------------------------------

struct PartQualityReport {
  double nmi = 0.0;
  double ari = 0.0;
};

/// Arithmetic-mean normalised mutual information and adjusted Rand index.
PartQualityReport nmi_ari(std::span<const int> predicted, std::span<const int> truth);

// ---- feature extraction -------------------------------------------------------

/// Mask-weighted average of frozen backbone patch tokens. masks
/// [batch, K, HW] weights; returns [batch, K, D]. Empty masks give a zero
/// vector and a warning.
std::vector<double> extract_late(const ParamStore& backbone, const vit::ViTConfig& cfg, std::span<const double> images,
                                 std::size_t batch, std::span<const double> masks, std::size_t parts,
                                 Warnings* warnings = nullptr);
/// Same pooling on precomputed patch features z [batch, HW, D].
std::vector<double> pool_late(std::span<const double> z, std::size_t batch, std::size_t hw, std::size_t dim,
                              std::span<const double> masks, std::size_t parts, Warnings* warnings = nullptr);

/// Clique-masked forward with the prefix replicated per group. labels
/// [batch, HW] give each patch's clique in [0, groups); returns the CLS
/// output of every group, [batch, groups, D].
std::vector<double> extract_early(const ParamStore& backbone, const vit::ViTConfig& cfg,
                                  std::span<const double> images, std::size_t batch, std::span<const int> labels,
                                  std::size_t groups);

/// Patch labels from binary masks [batch, K, HW]: first covering mask,
/// K when none covers the patch.
std::vector<int> masks_to_labels(std::span<const double> masks, std::size_t batch, std::size_t parts,
                                 std::size_t hw);

// ---- probe matrix -------------------------------------------------------------

struct ProbeResult {
  ProbeMatrix matrix;
  std::vector<double> test_logits;  // [n_test, K, A]
};

/// Train one probe per part on train features [n, K, D] and evaluate each
/// on every attribute group of the test split.
ProbeResult probe_matrix(std::span<const double> train_features, std::span<const double> train_labels,
                         std::size_t n_train, std::span<const double> test_features,
                         std::span<const double> test_labels, std::size_t n_test, std::size_t parts, std::size_t dim,
                         const AttributeSpec& spec, const ProbeConfig& cfg, Warnings* warnings = nullptr);

}  // namespace partleak::leak
