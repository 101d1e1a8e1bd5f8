#include "plm/injection.hpp"

namespace plm {

template <typename Scalar>
GatedCrossAttnBlock<Scalar>::GatedCrossAttnBlock(const std::string& name, const Options& opt, Rng& rng)
    : p_in(name + ".p_in", opt.d_feats, opt.d_embed, true, rng),
      feature_layer(name + ".feature_layer", opt.d_embed, opt.heads, opt.ffn_mult * opt.d_embed, opt.dropout, rng),
      text_fc1(name + ".text_fc1", opt.d_llm, opt.d_embed, true, rng),
      text_fc2(name + ".text_fc2", opt.d_embed, opt.d_embed, true, rng),
      text_norm(name + ".text_norm", opt.d_embed),
      cross(name + ".cross", AttentionSpec{opt.d_embed, opt.heads, true, opt.inner_out_proj}, rng),
      out(name + ".out", opt.d_embed, opt.d_llm, true, rng),
      out_norm(name + ".out_norm", opt.d_llm) {
  for (Index i = 0; i < opt.n_gates; ++i) {
    gates.push_back(Var<Scalar>::parameter(name + ".gate." + std::to_string(i), Tensor<Scalar>({1})));
  }
}

template <typename Scalar>
Var<Scalar> GatedCrossAttnBlock<Scalar>::encode_features(const Var<Scalar>& level, const ForwardContext& ctx) const {
  return feature_layer.forward(p_in(level), ctx);
}

template <typename Scalar>
Var<Scalar> GatedCrossAttnBlock<Scalar>::delta(const Var<Scalar>& x, const Var<Scalar>& memory) const {
  auto queries = text_norm(text_fc2(gelu(text_fc1(x))));
  return out_norm(out(cross.forward(queries, memory)));
}

template <typename Scalar>
Var<Scalar> GatedCrossAttnBlock<Scalar>::inject(const Var<Scalar>& x, const Var<Scalar>& memory, Index slot) const {
  if (slot < 0 || slot >= static_cast<Index>(gates.size())) {
    throw PlanError("cross-attention gate " + std::to_string(slot) + " does not exist");
  }
  return add(x, scale_by(delta(x, memory), tanh(gates[static_cast<std::size_t>(slot)])));
}

template <typename Scalar>
void GatedCrossAttnBlock<Scalar>::collect(ParamList<Scalar>& out_params) const {
  p_in.collect(out_params);
  feature_layer.collect(out_params);
  text_fc1.collect(out_params);
  text_fc2.collect(out_params);
  text_norm.collect(out_params);
  cross.collect(out_params);
  out.collect(out_params);
  out_norm.collect(out_params);
  for (const auto& g : gates) out_params.push_back(g);
}

template <typename Scalar>
Index GatedCrossAttnBlock<Scalar>::param_count(const Options& opt) {
  return linear_params(opt.d_feats, opt.d_embed, true) + encoder_layer_params(opt.d_embed, opt.ffn_mult * opt.d_embed) +
         linear_params(opt.d_llm, opt.d_embed, true) + linear_params(opt.d_embed, opt.d_embed, true) + opt.d_embed +
         attention_params(opt.d_embed, true, opt.inner_out_proj) + linear_params(opt.d_embed, opt.d_llm, true) +
         opt.d_llm + opt.n_gates;
}

template <typename Scalar>
Index InjectionPlan<Scalar>::prefix_incidences() const {
  Index total = 0;
  for (const auto& [layer, entry] : layers) {
    if (entry.prefix.defined()) total += entry.prefix.dim(-2);
  }
  return total;
}

Index window_start(Index n_llm, Index n_left, Index n_layers) {
  if (n_llm < 1 || n_left < 0 || n_llm + n_left > n_layers) {
    throw PlanError("injection window n_llm=" + std::to_string(n_llm) + ", n_left=" + std::to_string(n_left) +
                    " does not fit " + std::to_string(n_layers) + " layers");
  }
  return n_layers - n_left - n_llm;
}

std::map<Index, Index> assign_levels(Index k, Index n_llm, Index n_left, Index n_layers) {
  const Index start = window_start(n_llm, n_left, n_layers);
  if (k < 1 || k > n_llm) {
    throw PlanError("cannot spread " + std::to_string(k) + " feature levels over " + std::to_string(n_llm) +
                    " layers");
  }
  std::map<Index, Index> out;
  for (Index j = 0; j < n_llm; ++j) out[start + j] = ((j + 1) * k - 1) / n_llm;
  return out;
}

template <typename Scalar>
InjectionPlan<Scalar> plan_first_layer(const Var<Scalar>& mapped) {
  if (!mapped.defined() || mapped.rank() < 2 || mapped.dim(-2) == 0) {
    throw PlanError("first-layer injection needs at least one token");
  }
  InjectionPlan<Scalar> plan;
  plan.mode = InjectionMode::first_layer;
  plan.input_prefix = mapped.rank() == 2 ? reshape(mapped, {1, mapped.dim(0), mapped.dim(1)}) : mapped;
  return plan;
}

template <typename Scalar>
InjectionPlan<Scalar> plan_inner_layers(const std::vector<Var<Scalar>>& levels, Index n_llm, Index n_left,
                                        Index n_layers) {
  const auto schedule = assign_levels(static_cast<Index>(levels.size()), n_llm, n_left, n_layers);
  InjectionPlan<Scalar> plan;
  plan.mode = InjectionMode::inner_layers;
  plan.n_llm = n_llm;
  plan.n_left = n_left;
  for (const auto& [layer, level] : schedule) {
    const Var<Scalar>& tokens = levels[static_cast<std::size_t>(level)];
    if (tokens.rank() < 2 || tokens.dim(-2) == 0) throw PlanError("feature level " + std::to_string(level) + " is empty");
    LayerEntry<Scalar> entry;
    entry.prefix = tokens.rank() == 2 ? reshape(tokens, {1, tokens.dim(0), tokens.dim(1)}) : tokens;
    entry.level = level;
    plan.layers[layer] = entry;
  }
  return plan;
}

template <typename Scalar>
InjectionPlan<Scalar> plan_cross_attn(const GatedCrossAttnBlock<Scalar>& block, std::vector<Var<Scalar>> memory,
                                      Index n_llm, Index n_left, Index n_layers) {
  const auto schedule = assign_levels(static_cast<Index>(memory.size()), n_llm, n_left, n_layers);
  if (static_cast<Index>(block.gates.size()) != n_llm) {
    throw PlanError("cross-attention block has " + std::to_string(block.gates.size()) + " gates for " +
                    std::to_string(n_llm) + " insertion layers");
  }
  InjectionPlan<Scalar> plan;
  plan.mode = InjectionMode::cross_attn;
  plan.n_llm = n_llm;
  plan.n_left = n_left;
  plan.cross_block = &block;
  plan.cross_memory = std::move(memory);
  Index slot = 0;
  for (const auto& [layer, level] : schedule) {
    LayerEntry<Scalar> entry;
    entry.level = level;
    entry.gate = slot++;
    plan.layers[layer] = entry;
  }
  return plan;
}

#define PLM_INSTANTIATE_INJECTION(S)                                                                           \
  template struct GatedCrossAttnBlock<S>;                                                                      \
  template struct InjectionPlan<S>;                                                                            \
  template InjectionPlan<S> plan_first_layer(const Var<S>&);                                                   \
  template InjectionPlan<S> plan_inner_layers(const std::vector<Var<S>>&, Index, Index, Index);                \
  template InjectionPlan<S> plan_cross_attn(const GatedCrossAttnBlock<S>&, std::vector<Var<S>>, Index, Index, \
                                            Index);

PLM_INSTANTIATE_INJECTION(float)
PLM_INSTANTIATE_INJECTION(double)

}  // namespace plm
