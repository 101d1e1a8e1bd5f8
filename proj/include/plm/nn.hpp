#pragma once

#include "plm/ops.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace plm {

/// Dropout switch plus the generator that drives it.
struct ForwardContext {
  bool train = false;
  Rng* rng = nullptr;
};

template <typename Scalar>
using ParamList = std::vector<Var<Scalar>>;

template <typename Scalar>
Index count_elements(const ParamList<Scalar>& params) {
  Index n = 0;
  for (const auto& p : params) n += p.value().size();
  return n;
}

/// Lower-triangular allow-mask (diagonal included), row-major [s, s].
std::vector<std::uint8_t> build_causal_mask(Index s);

template <typename Scalar>
struct Linear {
  Var<Scalar> weight;  // [d_out, d_in]
  Var<Scalar> bias;    // [d_out] or undefined

  Linear() = default;
  Linear(const std::string& name, Index d_in, Index d_out, bool with_bias, Rng& rng);

  Var<Scalar> operator()(const Var<Scalar>& x) const { return linear(x, weight, bias); }
  Index d_in() const { return weight.dim(1); }
  Index d_out() const { return weight.dim(0); }
  void collect(ParamList<Scalar>& out) const;
};

template <typename Scalar>
struct RMSNorm {
  Var<Scalar> weight;
  Scalar eps = Scalar(1e-6);

  RMSNorm() = default;
  RMSNorm(const std::string& name, Index d);
  Var<Scalar> operator()(const Var<Scalar>& x) const { return rms_norm(x, weight, eps); }
  void collect(ParamList<Scalar>& out) const { out.push_back(weight); }
};

template <typename Scalar>
struct LayerNorm {
  Var<Scalar> weight;
  Var<Scalar> bias;
  Scalar eps = Scalar(1e-5);

  LayerNorm() = default;
  LayerNorm(const std::string& name, Index d);
  Var<Scalar> operator()(const Var<Scalar>& x) const { return layer_norm(x, weight, bias, eps); }
  void collect(ParamList<Scalar>& out) const {
    out.push_back(weight);
    out.push_back(bias);
  }
};

struct AttentionSpec {
  Index d_model = 0;
  Index n_heads = 1;
  bool bias = true;
  bool out_proj = true;
};

/// Scaled dot-product attention over n_heads heads of width d_model / n_heads.
template <typename Scalar>
struct MultiHeadAttention {
  AttentionSpec spec;
  Linear<Scalar> q, k, v;
  std::optional<Linear<Scalar>> o;

  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, AttentionSpec spec, Rng& rng);

  /// query [B, sq, d], memory [B, sk, d] (rank-2 inputs are treated as B = 1).
  /// allow, when given, is a row-major [sq, sk] visibility mask.
  Var<Scalar> forward(const Var<Scalar>& query, const Var<Scalar>& memory,
                      const std::vector<std::uint8_t>* allow = nullptr) const;
  Var<Scalar> causal_self(const Var<Scalar>& x) const;
  void collect(ParamList<Scalar>& out) const;
};

template <typename Scalar>
struct FeedForward {
  Linear<Scalar> fc1, fc2;

  FeedForward() = default;
  FeedForward(const std::string& name, Index d_model, Index d_hidden, bool bias, Rng& rng);
  Var<Scalar> operator()(const Var<Scalar>& x) const { return fc2(gelu(fc1(x))); }
  void collect(ParamList<Scalar>& out) const {
    fc1.collect(out);
    fc2.collect(out);
  }
};

/// Post-norm encoder layer: x = LN(x + Drop(Attn(x))); x = LN(x + Drop(FFN(x))).
template <typename Scalar>
struct TransformerEncoderLayer {
  MultiHeadAttention<Scalar> attn;
  FeedForward<Scalar> ffn;
  LayerNorm<Scalar> ln1, ln2;
  double dropout_p = 0.0;

  TransformerEncoderLayer() = default;
  TransformerEncoderLayer(const std::string& name, Index d_model, Index n_heads, Index d_ff, double dropout_p,
                          Rng& rng);
  Var<Scalar> forward(const Var<Scalar>& x, const ForwardContext& ctx) const;
  /// The last `keep` positions of forward(x), attending over all of x.
  Var<Scalar> forward_tail(const Var<Scalar>& x, Index keep, const ForwardContext& ctx) const;
  void collect(ParamList<Scalar>& out) const;
};

/// Pre-norm causal layer with RMSNorm and bias-free projections.
template <typename Scalar>
struct CausalDecoderLayer {
  RMSNorm<Scalar> norm1, norm2;
  MultiHeadAttention<Scalar> attn;
  FeedForward<Scalar> ffn;

  CausalDecoderLayer() = default;
  CausalDecoderLayer(const std::string& name, Index d_model, Index n_heads, Index d_ff, Rng& rng);
  Var<Scalar> forward(const Var<Scalar>& x) const;
  void collect(ParamList<Scalar>& out) const;
};

// Closed-form parameter counts of the blocks above.
Index linear_params(Index d_in, Index d_out, bool bias);
Index attention_params(Index d_model, bool bias, bool out_proj);
Index encoder_layer_params(Index d_model, Index d_ff);
Index decoder_layer_params(Index d_model, Index d_ff);

}  // namespace plm
