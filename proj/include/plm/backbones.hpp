#pragma once

#include "plm/config.hpp"
#include "plm/injection.hpp"
#include "plm/nn.hpp"

#include <span>
#include <vector>

namespace plm {

/// Encoder outputs handed to the mappers, shallow level first.
template <typename Scalar>
struct FeatureStack {
  std::vector<Var<Scalar>> levels;  // each [B, n_tok, d_feats]
  bool cls_only = false;
  Shape grid;

  Index n_levels() const { return static_cast<Index>(levels.size()); }
  Index n_tokens() const { return levels.empty() ? 0 : levels.front().dim(1); }
};

/// ViT-style stand-in for a frozen perceptual encoder.
template <typename Scalar>
struct ToyEncoder {
  Linear<Scalar> patch_embed;
  Var<Scalar> cls;  // [d_feats]
  Var<Scalar> pos;  // [1 + n_patches, d_feats]
  std::vector<TransformerEncoderLayer<Scalar>> layers;
  Shape grid;
  Index patch_dim = 0;

  ToyEncoder() = default;
  ToyEncoder(const std::string& name, const ModelDims& dims, Rng& rng);

  Index width() const { return cls.dim(0); }
  Index depth() const { return static_cast<Index>(layers.size()); }

  /// patches [B, n_patches, patch_dim] -> every layer's output, each [B, 1 + n_patches, d_feats].
  std::vector<Var<Scalar>> forward_layers(const Var<Scalar>& patches) const;
  /// Outputs of the last n_fl layers, reduced per cls_mode.
  FeatureStack<Scalar> extract(const Var<Scalar>& patches, Index n_fl, ClsMode mode) const;
  void collect(ParamList<Scalar>& out) const;
};

/// Reduces full-token levels per cls_mode; shared by extract() and cached features.
template <typename Scalar>
FeatureStack<Scalar> select_tokens(std::vector<Var<Scalar>> levels, ClsMode mode, const Shape& grid);

/// Decoder-only LM with a tied output head.
template <typename Scalar>
struct ToyCausalLM {
  Var<Scalar> tok_emb;  // [V, d]
  Var<Scalar> pos;      // [max_positions, d]
  std::vector<CausalDecoderLayer<Scalar>> layers;
  RMSNorm<Scalar> final_norm;

  ToyCausalLM() = default;
  ToyCausalLM(const std::string& name, const ModelDims& dims, Rng& rng);

  Index width() const { return tok_emb.dim(1); }
  Index vocab() const { return tok_emb.dim(0); }
  Index depth() const { return static_cast<Index>(layers.size()); }
  Index max_positions() const { return pos.dim(0); }

  /// ids: row-major [B, s]. Input layer sequence is [prefix | prompt | text];
  /// per-layer prefixes are prepended before that layer and stripped after it.
  /// Returns logits [B, s, V] over text positions. When `trace` is given it
  /// receives every layer's output (layer prefixes already stripped).
  Var<Scalar> forward(std::span<const int> ids, Index batch, Index seq, const InjectionPlan<Scalar>* plan = nullptr,
                      const Var<Scalar>* prompt = nullptr, std::vector<Var<Scalar>>* trace = nullptr) const;
  void collect(ParamList<Scalar>& out) const;
};

}  // namespace plm
