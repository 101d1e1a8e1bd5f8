#pragma once

#include "plm/autodiff.hpp"
#include "plm/random.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace plm {

struct EmptyLossError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Differentiable primitives. Each op records itself on the active tape when
// any input requires a gradient; otherwise it produces a constant.

template <typename Scalar>
Var<Scalar> constant(Tensor<Scalar> value) {
  return Var<Scalar>(std::move(value));
}

/// a [.., m, k] x b [.., k, n]. b may be rank 2 and is then shared across a's batch.
template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b);

/// x [.., d_in] * weight[d_out, d_in]^T + bias[d_out]. bias may be undefined.
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias);

// Elementwise binary ops. b's shape must equal a's or a trailing suffix of it.
template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar factor);
/// x * s where s holds exactly one element.
template <typename Scalar>
Var<Scalar> scale_by(const Var<Scalar>& x, const Var<Scalar>& s);

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& x);
/// Tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& x);
template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& x);

template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& x, Index axis);
template <typename Scalar>
Var<Scalar> rms_norm(const Var<Scalar>& x, const Var<Scalar>& weight, Scalar eps);
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, Scalar eps);

template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>>& parts, Index axis);
template <typename Scalar>
Var<Scalar> slice(const Var<Scalar>& x, Index axis, Index begin, Index end);
template <typename Scalar>
Var<Scalar> permute(const Var<Scalar>& x, const std::vector<Index>& order);
/// Swaps the last two axes.
template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& x);
template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape);
/// Prepends a leading axis by repeating x `count` times.
template <typename Scalar>
Var<Scalar> broadcast_batch(const Var<Scalar>& x, Index count);

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x, Index axis);
template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x, Index axis);
template <typename Scalar>
Var<Scalar> sum_all(const Var<Scalar>& x);

/// Rows of table [V, d] selected by ids; result shape is ids_shape + [d].
template <typename Scalar>
Var<Scalar> embedding(const Var<Scalar>& table, std::span<const int> ids, Shape ids_shape);
/// Selects entries along `axis` in the given order (repeats allowed).
template <typename Scalar>
Var<Scalar> index_select(const Var<Scalar>& x, Index axis, std::span<const Index> indices);
/// x [B, n, d]; rows[b] lists the tokens kept for batch element b (equal lengths).
template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& x, const std::vector<std::vector<Index>>& rows);

/// Sets disallowed entries of the trailing [sq, sk] block to -inf.
/// allow is row-major [sq, sk] with nonzero meaning visible.
template <typename Scalar>
Var<Scalar> mask_fill(const Var<Scalar>& scores, std::span<const std::uint8_t> allow);

/// Scaled dot-product attention split into n_heads heads along the feature axis.
/// q [B, sq, d], k and v [B, sk, d] -> [B, sq, d]. allow, when non-empty, is a
/// row-major [sq, sk] visibility mask shared by every batch element and head.
template <typename Scalar>
Var<Scalar> attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v, Index n_heads,
                      std::span<const std::uint8_t> allow = {});

/// Inverted dropout; identity when not training or p == 0.
template <typename Scalar>
Var<Scalar> dropout(const Var<Scalar>& x, double p, bool training, Rng* rng);

/// Mean over unmasked positions of (1-eps)(-log p_target) + eps * mean_v(-log p_v).
/// logits [.., V]; targets and mask have one entry per row.
template <typename Scalar>
Var<Scalar> smoothed_cross_entropy(const Var<Scalar>& logits, std::span<const int> targets, Scalar eps,
                                   std::span<const std::uint8_t> mask);

}  // namespace plm
