#include "plm/backbones.hpp"

namespace plm {

namespace {

template <typename Scalar>
Var<Scalar> batched(const Var<Scalar>& tokens, Index batch) {
  if (tokens.rank() == 2) return broadcast_batch(tokens, batch);
  if (tokens.dim(0) == batch) return tokens;
  if (tokens.dim(0) == 1) return broadcast_batch(reshape(tokens, {tokens.dim(1), tokens.dim(2)}), batch);
  throw DimensionError("prefix batch " + std::to_string(tokens.dim(0)) + " does not match text batch " +
                       std::to_string(batch));
}

}  // namespace

template <typename Scalar>
ToyEncoder<Scalar>::ToyEncoder(const std::string& name, const ModelDims& dims, Rng& rng)
    : patch_embed(name + ".patch_embed", dims.patch_dim, dims.d_feats, true, rng),
      grid(dims.grid),
      patch_dim(dims.patch_dim) {
  cls = Var<Scalar>::parameter(name + ".cls", normal_tensor<Scalar>({dims.d_feats}, 0.02, rng));
  pos = Var<Scalar>::parameter(name + ".pos", normal_tensor<Scalar>({1 + dims.n_patches(), dims.d_feats}, 0.02, rng));
  for (Index l = 0; l < dims.enc_layers; ++l) {
    layers.emplace_back(name + ".layers." + std::to_string(l), dims.d_feats, dims.enc_heads, dims.enc_ff(), 0.0, rng);
  }
}

template <typename Scalar>
std::vector<Var<Scalar>> ToyEncoder<Scalar>::forward_layers(const Var<Scalar>& patches) const {
  const Index n = pos.dim(0) - 1;
  if (patches.rank() != 3 || patches.dim(1) != n || patches.dim(2) != patch_dim) {
    throw DimensionError("encoder expects patches [B, " + std::to_string(n) + ", " + std::to_string(patch_dim) +
                         "], got " + to_string(patches.shape()));
  }
  const Index batch = patches.dim(0);
  auto x = concat<Scalar>({broadcast_batch(reshape(cls, {1, width()}), batch), patch_embed(patches)}, 1);
  x = add(x, pos);
  std::vector<Var<Scalar>> outputs;
  outputs.reserve(layers.size());
  const ForwardContext ctx{};
  for (const auto& layer : layers) {
    x = layer.forward(x, ctx);
    outputs.push_back(x);
  }
  return outputs;
}

template <typename Scalar>
FeatureStack<Scalar> select_tokens(std::vector<Var<Scalar>> levels, ClsMode mode, const Shape& grid) {
  FeatureStack<Scalar> stack;
  stack.grid = grid;
  stack.cls_only = mode != ClsMode::all;
  for (auto& level : levels) {
    switch (mode) {
      case ClsMode::all:
        stack.levels.push_back(std::move(level));
        break;
      case ClsMode::cls:
        stack.levels.push_back(slice(level, 1, 0, 1));
        break;
      case ClsMode::mean: {
        auto patches = slice(level, 1, 1, level.dim(1));
        stack.levels.push_back(reshape(mean(patches, 1), {level.dim(0), 1, level.dim(2)}));
        break;
      }
    }
  }
  return stack;
}

template <typename Scalar>
FeatureStack<Scalar> ToyEncoder<Scalar>::extract(const Var<Scalar>& patches, Index n_fl, ClsMode mode) const {
  if (n_fl < 1 || n_fl > depth()) {
    throw ConfigError("extraction.n_fl: " + std::to_string(n_fl) + " levels requested from a " +
                      std::to_string(depth()) + "-layer encoder");
  }
  auto outputs = forward_layers(patches);
  std::vector<Var<Scalar>> last(outputs.end() - n_fl, outputs.end());
  return select_tokens(std::move(last), mode, grid);
}

template <typename Scalar>
void ToyEncoder<Scalar>::collect(ParamList<Scalar>& out) const {
  patch_embed.collect(out);
  out.push_back(cls);
  out.push_back(pos);
  for (const auto& layer : layers) layer.collect(out);
}

template <typename Scalar>
ToyCausalLM<Scalar>::ToyCausalLM(const std::string& name, const ModelDims& dims, Rng& rng)
    : final_norm(name + ".final_norm", dims.d_llm) {
  tok_emb = Var<Scalar>::parameter(name + ".tok_emb", normal_tensor<Scalar>({dims.vocab, dims.d_llm}, 0.02, rng));
  pos = Var<Scalar>::parameter(name + ".pos", normal_tensor<Scalar>({dims.max_positions, dims.d_llm}, 0.02, rng));
  for (Index l = 0; l < dims.llm_layers; ++l) {
    layers.emplace_back(name + ".layers." + std::to_string(l), dims.d_llm, dims.llm_heads, dims.llm_ff(), rng);
  }
}

template <typename Scalar>
Var<Scalar> ToyCausalLM<Scalar>::forward(std::span<const int> ids, Index batch, Index seq,
                                         const InjectionPlan<Scalar>* plan, const Var<Scalar>* prompt,
                                         std::vector<Var<Scalar>>* trace) const {
  if (batch < 1 || seq < 1 || static_cast<Index>(ids.size()) != batch * seq) {
    throw DimensionError("text ids hold " + std::to_string(ids.size()) + " entries for batch " +
                         std::to_string(batch) + " x length " + std::to_string(seq));
  }
  if (plan != nullptr) {
    for (const auto& [layer, entry] : plan->layers) {
      if (layer < 0 || layer >= depth()) {
        throw PlanError("plan references layer " + std::to_string(layer) + " of a " + std::to_string(depth()) +
                        "-layer model");
      }
    }
  }
  std::vector<Var<Scalar>> parts;
  if (plan != nullptr && plan->input_prefix.defined()) parts.push_back(batched(plan->input_prefix, batch));
  if (prompt != nullptr && prompt->defined() && prompt->dim(0) > 0) parts.push_back(batched(*prompt, batch));
  Index lead = 0;
  for (const auto& p : parts) lead += p.dim(1);
  parts.push_back(embedding(tok_emb, ids, {batch, seq}));

  const Index total = lead + seq;
  if (total > max_positions()) {
    throw DimensionError("sequence of " + std::to_string(total) + " tokens exceeds " +
                         std::to_string(max_positions()) + " positions");
  }
  auto x = parts.size() == 1 ? parts.front() : concat(parts, 1);
  x = add(x, slice(pos, 0, 0, total));

  for (Index l = 0; l < depth(); ++l) {
    const LayerEntry<Scalar>* entry = nullptr;
    if (plan != nullptr) {
      auto it = plan->layers.find(l);
      if (it != plan->layers.end()) entry = &it->second;
    }
    const auto& layer = layers[static_cast<std::size_t>(l)];
    if (entry != nullptr && entry->gate >= 0) {
      x = plan->cross_block->inject(x, batched(plan->cross_memory.at(static_cast<std::size_t>(entry->level)), batch),
                                    entry->gate);
    }
    if (entry != nullptr && entry->prefix.defined()) {
      const Index n = entry->prefix.dim(-2);
      auto h = layer.forward(concat<Scalar>({batched(entry->prefix, batch), x}, 1));
      x = slice(h, 1, n, h.dim(1));
    } else {
      x = layer.forward(x);
    }
    if (trace != nullptr) trace->push_back(x);
  }
  auto text = final_norm(slice(x, 1, lead, total));
  return linear(text, tok_emb, Var<Scalar>());
}

template <typename Scalar>
void ToyCausalLM<Scalar>::collect(ParamList<Scalar>& out) const {
  out.push_back(tok_emb);
  out.push_back(pos);
  for (const auto& layer : layers) layer.collect(out);
  final_norm.collect(out);
}

#define PLM_INSTANTIATE_BACKBONES(S)                                                           \
  template struct ToyEncoder<S>;                                                               \
  template struct ToyCausalLM<S>;                                                              \
  template FeatureStack<S> select_tokens(std::vector<Var<S>>, ClsMode, const Shape&);

PLM_INSTANTIATE_BACKBONES(float)
PLM_INSTANTIATE_BACKBONES(double)

}  // namespace plm
