#pragma once

// Differentiable primitives. Every op takes and returns Tensors living on
// the same Tape. Reductions always run left to right in memory order so
// results are reproducible bit for bit.

#include <cstdint>
#include <span>
#include <vector>

#include "partleak/rng.hpp"
#include "partleak/tensor.hpp"

namespace partleak::ad {

// ---- elementwise, numpy-style broadcasting -------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh form
Tensor abs(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);
/// max(x, floor); zero gradient where x < floor.
Tensor clamp_min(const Tensor& x, double floor);
/// -x log x with the convention 0 log 0 = 0.
Tensor neg_xlogx(const Tensor& x);

// ---- reductions ----------------------------------------------------------
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, std::size_t axis);
Tensor mean_axis(const Tensor& x, std::size_t axis);
/// Maximum along an axis; the gradient goes to the first maximal entry.
Tensor max_axis(const Tensor& x, std::size_t axis);

// ---- shape ---------------------------------------------------------------
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm);
Tensor transpose_last2(const Tensor& x);
Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& xs, std::size_t axis);
/// Broadcast to a larger shape; the backward pass sums over expanded axes.
Tensor expand(const Tensor& x, const Shape& shape);

// ---- linear algebra ------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor bmm(const Tensor& a, const Tensor& b);     // [B,m,k] x [B,k,n]
/// x[..., in] * w[in, out] (+ bias[out]).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

// ---- neural-net primitives -----------------------------------------------
/// Softmax along the last axis. Entries with allowed == 0 are excluded from
/// the normalisation and come out as exactly 0. An empty mask allows all.
Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> allowed);
Tensor softmax(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);
/// Mean binary cross-entropy with logits against fixed targets in [0, 1].
Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets);
/// Cosine along the last axis: a.b / (|a||b| + eps).
Tensor cosine(const Tensor& a, const Tensor& b, double eps);

/// Forward identity, no gradient flows to x.
Tensor stop_gradient(const Tensor& x);
/// Forward value copied bit for bit from `forward`; the incoming gradient
/// is routed to `gradient_path` only. Equivalent to
/// SG(forward) + gradient_path - SG(gradient_path) without rounding.
Tensor straight_through(const Tensor& forward, const Tensor& gradient_path);

/// Gumbel-softmax over the last axis. Noise is -log(-log u) with u drawn
/// from `rng`. With hard = true the forward value is the one-hot argmax
/// (lowest index on ties) and gradients come from the relaxed sample.
Tensor gumbel_softmax(const Tensor& logits, double temperature, Rng& rng, bool hard);

/// Multi-head scaled dot-product attention on [B, T, D] inputs.
/// `allowed` is a [B, T, T] key mask (empty = all keys allowed); `bias`
/// is an optional differentiable [B, T, T] additive term on the scaled
/// logits, shared across heads.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::span<const std::uint8_t> allowed, const Tensor& bias = {});

/// 2-D affine resampling of [N, C, H, W] maps. `theta` holds one 2x3 matrix
/// (row-major, normalised [-1, 1] coordinates, pixel centres) per map,
/// mapping output coordinates to input coordinates. Bilinear, zero padding.
Tensor affine_transform(const Tensor& maps, std::span<const double> theta);

/// One-hot of the argmax along the last axis (lowest index on ties). Not
/// differentiable; returned as a constant.
Tensor one_hot_argmax(const Tensor& x);

}  // namespace partleak::ad
