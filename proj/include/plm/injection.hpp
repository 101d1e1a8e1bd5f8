#pragma once

#include "plm/config.hpp"
#include "plm/nn.hpp"

#include <map>
#include <stdexcept>
#include <vector>

namespace plm {

struct PlanError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Perceptual features read by text queries, added back through per-layer
/// tanh gates. One set of weights serves every insertion layer.
template <typename Scalar>
struct GatedCrossAttnBlock {
  Linear<Scalar> p_in;
  TransformerEncoderLayer<Scalar> feature_layer;
  Linear<Scalar> text_fc1, text_fc2;
  RMSNorm<Scalar> text_norm;
  MultiHeadAttention<Scalar> cross;
  Linear<Scalar> out;
  RMSNorm<Scalar> out_norm;
  std::vector<Var<Scalar>> gates;  // [1] each, zero at init

  struct Options {
    Index d_feats = 0;
    Index d_embed = 0;
    Index d_llm = 0;
    Index heads = 8;
    Index ffn_mult = 1;
    Index n_gates = 1;
    double dropout = 0.1;
    bool inner_out_proj = true;
  };

  GatedCrossAttnBlock() = default;
  GatedCrossAttnBlock(const std::string& name, const Options& opt, Rng& rng);

  /// P_in followed by the single encoder layer: [B, n, d_feats] -> [B, n, d_embed].
  Var<Scalar> encode_features(const Var<Scalar>& level, const ForwardContext& ctx) const;
  /// The update Delta for text activations x [B, s, d_llm] given encoded memory.
  Var<Scalar> delta(const Var<Scalar>& x, const Var<Scalar>& memory) const;
  /// x + tanh(h_slot) * Delta.
  Var<Scalar> inject(const Var<Scalar>& x, const Var<Scalar>& memory, Index slot) const;
  void collect(ParamList<Scalar>& out) const;

  static Index param_count(const Options& opt);
};

template <typename Scalar>
struct LayerEntry {
  Var<Scalar> prefix;  // [B, n, d_llm]; lives for this layer only
  Index level = -1;
  Index gate = -1;     // cross-attention slot, -1 when unused
};

/// What the language model receives at each layer.
template <typename Scalar>
struct InjectionPlan {
  InjectionMode mode = InjectionMode::first_layer;
  Index n_llm = 0;
  Index n_left = 0;
  Var<Scalar> input_prefix;  // first-layer tokens [B, n, d_llm], carried through the stack
  std::map<Index, LayerEntry<Scalar>> layers;
  const GatedCrossAttnBlock<Scalar>* cross_block = nullptr;
  std::vector<Var<Scalar>> cross_memory;  // encoded features per level

  Index input_prefix_tokens() const { return input_prefix.defined() ? input_prefix.dim(-2) : 0; }
  /// Sum over populated layers of the tokens prepended there.
  Index prefix_incidences() const;
  bool empty() const { return !input_prefix.defined() && layers.empty(); }
};

/// First layer of the n_llm-layer window ending n_left below the top.
Index window_start(Index n_llm, Index n_left, Index n_layers);

/// Absolute layer -> feature level. Level i covers window positions
/// floor(i n / k) .. floor((i + 1) n / k) - 1.
std::map<Index, Index> assign_levels(Index k, Index n_llm, Index n_left, Index n_layers);

template <typename Scalar>
InjectionPlan<Scalar> plan_first_layer(const Var<Scalar>& mapped);

template <typename Scalar>
InjectionPlan<Scalar> plan_inner_layers(const std::vector<Var<Scalar>>& levels, Index n_llm, Index n_left,
                                        Index n_layers);

template <typename Scalar>
InjectionPlan<Scalar> plan_cross_attn(const GatedCrossAttnBlock<Scalar>& block, std::vector<Var<Scalar>> memory,
                                      Index n_llm, Index n_left, Index n_layers);

}  // namespace plm
