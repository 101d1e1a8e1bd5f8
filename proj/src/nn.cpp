#include "plm/nn.hpp"

#include <cmath>

namespace plm {

std::vector<std::uint8_t> build_causal_mask(Index s) {
  std::vector<std::uint8_t> allow(static_cast<std::size_t>(s * s), 0);
  for (Index r = 0; r < s; ++r) {
    for (Index c = 0; c <= r; ++c) allow[static_cast<std::size_t>(r * s + c)] = 1;
  }
  return allow;
}

Index linear_params(Index d_in, Index d_out, bool bias) { return d_in * d_out + (bias ? d_out : 0); }

Index attention_params(Index d_model, bool bias, bool out_proj) {
  return (out_proj ? 4 : 3) * linear_params(d_model, d_model, bias);
}

Index encoder_layer_params(Index d_model, Index d_ff) {
  return attention_params(d_model, true, true) + linear_params(d_model, d_ff, true) +
         linear_params(d_ff, d_model, true) + 4 * d_model;
}

Index decoder_layer_params(Index d_model, Index d_ff) {
  return attention_params(d_model, false, true) + linear_params(d_model, d_ff, false) +
         linear_params(d_ff, d_model, false) + 2 * d_model;
}

template <typename Scalar>
Linear<Scalar>::Linear(const std::string& name, Index d_in, Index d_out, bool with_bias, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
  weight = Var<Scalar>::parameter(name + ".weight", uniform_tensor<Scalar>({d_out, d_in}, bound, rng));
  if (with_bias) bias = Var<Scalar>::parameter(name + ".bias", uniform_tensor<Scalar>({d_out}, bound, rng));
}

template <typename Scalar>
void Linear<Scalar>::collect(ParamList<Scalar>& out) const {
  out.push_back(weight);
  if (bias.defined()) out.push_back(bias);
}

template <typename Scalar>
RMSNorm<Scalar>::RMSNorm(const std::string& name, Index d)
    : weight(Var<Scalar>::parameter(name + ".weight", Tensor<Scalar>::filled({d}, Scalar(1)))) {}

template <typename Scalar>
LayerNorm<Scalar>::LayerNorm(const std::string& name, Index d)
    : weight(Var<Scalar>::parameter(name + ".weight", Tensor<Scalar>::filled({d}, Scalar(1)))),
      bias(Var<Scalar>::parameter(name + ".bias", Tensor<Scalar>({d}))) {}

template <typename Scalar>
MultiHeadAttention<Scalar>::MultiHeadAttention(const std::string& name, AttentionSpec s, Rng& rng) : spec(s) {
  if (spec.n_heads <= 0 || spec.d_model % spec.n_heads != 0) {
    throw ConfigError("attention width " + std::to_string(spec.d_model) + " is not divisible by " +
                      std::to_string(spec.n_heads) + " heads");
  }
  q = Linear<Scalar>(name + ".q", spec.d_model, spec.d_model, spec.bias, rng);
  k = Linear<Scalar>(name + ".k", spec.d_model, spec.d_model, spec.bias, rng);
  v = Linear<Scalar>(name + ".v", spec.d_model, spec.d_model, spec.bias, rng);
  if (spec.out_proj) o = Linear<Scalar>(name + ".o", spec.d_model, spec.d_model, spec.bias, rng);
}

template <typename Scalar>
Var<Scalar> MultiHeadAttention<Scalar>::forward(const Var<Scalar>& query, const Var<Scalar>& memory,
                                                const std::vector<std::uint8_t>* allow) const {
  if (query.rank() == 2) {
    auto out = forward(reshape(query, {1, query.dim(0), query.dim(1)}),
                       reshape(memory, {1, memory.dim(0), memory.dim(1)}), allow);
    return reshape(out, {query.dim(0), spec.d_model});
  }
  if (query.rank() != 3 || memory.rank() != 3 || query.dim(0) != memory.dim(0) || query.dim(2) != spec.d_model ||
      memory.dim(2) != spec.d_model) {
    throw DimensionError("attention expects [B, s, " + std::to_string(spec.d_model) + "] inputs, got " +
                         to_string(query.shape()) + " and " + to_string(memory.shape()));
  }
  const auto empty = std::span<const std::uint8_t>();
  auto merged = attention(q(query), k(memory), v(memory), spec.n_heads,
                          allow != nullptr ? std::span<const std::uint8_t>(*allow) : empty);
  return o ? (*o)(merged) : merged;
}

template <typename Scalar>
Var<Scalar> MultiHeadAttention<Scalar>::causal_self(const Var<Scalar>& x) const {
  const auto allow = build_causal_mask(x.dim(-2));
  return forward(x, x, &allow);
}

template <typename Scalar>
void MultiHeadAttention<Scalar>::collect(ParamList<Scalar>& out) const {
  q.collect(out);
  k.collect(out);
  v.collect(out);
  if (o) o->collect(out);
}

template <typename Scalar>
FeedForward<Scalar>::FeedForward(const std::string& name, Index d_model, Index d_hidden, bool bias, Rng& rng)
    : fc1(name + ".fc1", d_model, d_hidden, bias, rng), fc2(name + ".fc2", d_hidden, d_model, bias, rng) {}

template <typename Scalar>
TransformerEncoderLayer<Scalar>::TransformerEncoderLayer(const std::string& name, Index d_model, Index n_heads,
                                                         Index d_ff, double p, Rng& rng)
    : attn(name + ".attn", AttentionSpec{d_model, n_heads, true, true}, rng),
      ffn(name + ".ffn", d_model, d_ff, true, rng),
      ln1(name + ".ln1", d_model),
      ln2(name + ".ln2", d_model),
      dropout_p(p) {}

template <typename Scalar>
Var<Scalar> TransformerEncoderLayer<Scalar>::forward(const Var<Scalar>& x, const ForwardContext& ctx) const {
  auto h = ln1(add(x, dropout(attn.forward(x, x), dropout_p, ctx.train, ctx.rng)));
  return ln2(add(h, dropout(ffn(h), dropout_p, ctx.train, ctx.rng)));
}

template <typename Scalar>
Var<Scalar> TransformerEncoderLayer<Scalar>::forward_tail(const Var<Scalar>& x, Index keep,
                                                          const ForwardContext& ctx) const {
  const Index n = x.dim(-2);
  if (keep <= 0 || keep > n) {
    throw DimensionError("cannot keep " + std::to_string(keep) + " of " + std::to_string(n) + " positions");
  }
  if (keep == n) return forward(x, ctx);
  auto tail = slice(x, x.rank() - 2, n - keep, n);
  auto h = ln1(add(tail, dropout(attn.forward(tail, x), dropout_p, ctx.train, ctx.rng)));
  return ln2(add(h, dropout(ffn(h), dropout_p, ctx.train, ctx.rng)));
}

template <typename Scalar>
void TransformerEncoderLayer<Scalar>::collect(ParamList<Scalar>& out) const {
  attn.collect(out);
  ffn.collect(out);
  ln1.collect(out);
  ln2.collect(out);
}

template <typename Scalar>
CausalDecoderLayer<Scalar>::CausalDecoderLayer(const std::string& name, Index d_model, Index n_heads, Index d_ff,
                                               Rng& rng)
    : norm1(name + ".norm1", d_model),
      norm2(name + ".norm2", d_model),
      attn(name + ".attn", AttentionSpec{d_model, n_heads, false, true}, rng),
      ffn(name + ".ffn", d_model, d_ff, false, rng) {}

template <typename Scalar>
Var<Scalar> CausalDecoderLayer<Scalar>::forward(const Var<Scalar>& x) const {
  auto h = add(x, attn.causal_self(norm1(x)));
  return add(h, ffn(norm2(h)));
}

template <typename Scalar>
void CausalDecoderLayer<Scalar>::collect(ParamList<Scalar>& out) const {
  norm1.collect(out);
  attn.collect(out);
  norm2.collect(out);
  ffn.collect(out);
}

#define PLM_INSTANTIATE_NN(S)                 \
  template struct Linear<S>;                  \
  template struct RMSNorm<S>;                 \
  template struct LayerNorm<S>;               \
  template struct MultiHeadAttention<S>;      \
  template struct FeedForward<S>;             \
  template struct TransformerEncoderLayer<S>; \
  template struct CausalDecoderLayer<S>;

PLM_INSTANTIATE_NN(float)
PLM_INSTANTIATE_NN(double)

}  // namespace plm
