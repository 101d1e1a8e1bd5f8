#include "plm/model.hpp"

namespace plm {

template <typename Scalar>
AdapterModel<Scalar>::AdapterModel(const AdapterConfig& cfg, const ModelSeeds& seeds, std::ostream& warn)
    : cfg_(cfg) {
  validate(cfg_);
  Rng enc_rng(seeds.encoder), lm_rng(seeds.lm), adapter_rng(seeds.adapter);
  encoder = ToyEncoder<Scalar>("encoder", cfg_.model, enc_rng);
  lm = ToyCausalLM<Scalar>("lm", cfg_.model, lm_rng);
  mapper = make_mapper<Scalar>(cfg_, adapter_rng);
  if (cfg_.injection.mode == InjectionMode::cross_attn) {
    typename GatedCrossAttnBlock<Scalar>::Options opt;
    opt.d_feats = cfg_.model.d_feats;
    opt.d_embed = cfg_.mapping.d_embed;
    opt.d_llm = cfg_.model.d_llm;
    opt.heads = cfg_.mapping.heads;
    opt.ffn_mult = cfg_.mapping.ffn_mult;
    opt.n_gates = cfg_.injection.n_llm;
    opt.dropout = cfg_.mapping.dropout;
    opt.inner_out_proj = cfg_.injection.cross_out_proj;
    cross.emplace("cross", opt, adapter_rng);
  }
  prompt = PromptTokens<Scalar>("prompt", cfg_.finetune.n_pt, cfg_.model.d_llm, adapter_rng);
  freeze_backbones(backbone_params(), adapter_params());
  if (cfg_.finetune.bias_tuning) apply_bias_tuning(encoder_params(), warn);
}

template <typename Scalar>
FeatureStack<Scalar> AdapterModel<Scalar>::extract(const Var<Scalar>& patches) const {
  return encoder.extract(patches, cfg_.extraction.n_fl, cfg_.extraction.cls_mode);
}

template <typename Scalar>
InjectionPlan<Scalar> AdapterModel<Scalar>::plan(const FeatureStack<Scalar>& stack, const ForwardContext& ctx) const {
  const auto& inj = cfg_.injection;
  switch (inj.mode) {
    case InjectionMode::first_layer:
      if (stack.n_levels() != 1) throw PlanError("first-layer injection takes exactly one feature level");
      return plan_first_layer(mapper->forward(stack.levels.front(), ctx));
    case InjectionMode::inner_layers: {
      std::vector<Var<Scalar>> mapped;
      for (const auto& level : stack.levels) mapped.push_back(mapper->forward(level, ctx));
      return plan_inner_layers(mapped, inj.n_llm, inj.n_left, lm.depth());
    }
    case InjectionMode::cross_attn: {
      std::vector<Var<Scalar>> memory;
      for (const auto& level : stack.levels) memory.push_back(cross->encode_features(level, ctx));
      return plan_cross_attn(*cross, std::move(memory), inj.n_llm, inj.n_left, lm.depth());
    }
  }
  throw PlanError("unknown injection mode");
}

template <typename Scalar>
Var<Scalar> AdapterModel<Scalar>::forward(const FeatureStack<Scalar>& stack, std::span<const int> ids, Index batch,
                                          Index seq, const ForwardContext& ctx,
                                          std::vector<Var<Scalar>>* trace) const {
  const auto p = plan(stack, ctx);
  return lm.forward(ids, batch, seq, &p, prompt.get(), trace);
}

template <typename Scalar>
Var<Scalar> AdapterModel<Scalar>::forward_patches(const Var<Scalar>& patches, std::span<const int> ids, Index batch,
                                                  Index seq, const ForwardContext& ctx) const {
  return forward(extract(patches), ids, batch, seq, ctx);
}

template <typename Scalar>
ParamList<Scalar> AdapterModel<Scalar>::encoder_params() const {
  ParamList<Scalar> out;
  encoder.collect(out);
  return out;
}

template <typename Scalar>
ParamList<Scalar> AdapterModel<Scalar>::lm_params() const {
  ParamList<Scalar> out;
  lm.collect(out);
  return out;
}

template <typename Scalar>
ParamList<Scalar> AdapterModel<Scalar>::backbone_params() const {
  ParamList<Scalar> out = encoder_params();
  lm.collect(out);
  return out;
}

template <typename Scalar>
ParamList<Scalar> AdapterModel<Scalar>::adapter_params() const {
  ParamList<Scalar> out;
  if (mapper) mapper->collect(out);
  if (cross) cross->collect(out);
  prompt.collect(out);
  return out;
}

template <typename Scalar>
ParamList<Scalar> AdapterModel<Scalar>::all_params() const {
  ParamList<Scalar> out = backbone_params();
  for (const auto& p : adapter_params()) out.push_back(p);
  return out;
}

template <typename Scalar>
ParamList<Scalar> AdapterModel<Scalar>::trainable_params() const {
  ParamList<Scalar> out;
  for (const auto& p : all_params()) {
    if (p.trainable()) out.push_back(p);
  }
  return out;
}

template <typename Scalar>
Index AdapterModel<Scalar>::input_prefix_tokens() const {
  Index n = prompt.count();
  if (cfg_.injection.mode == InjectionMode::first_layer) {
    const Index tokens = cfg_.extraction.cls_mode == ClsMode::all ? 1 + cfg_.model.n_patches() : 1;
    n += mapper->output_tokens(tokens);
  }
  return n;
}

template class AdapterModel<float>;
template class AdapterModel<double>;

}  // namespace plm
