#pragma once

#include "plm/backbones.hpp"
#include "plm/config.hpp"
#include "plm/finetune.hpp"
#include "plm/injection.hpp"
#include "plm/mapping.hpp"

#include <cstdint>
#include <iostream>
#include <memory>
#include <optional>

namespace plm {

struct ModelSeeds {
  std::uint64_t encoder = 2;
  std::uint64_t lm = 1;
  std::uint64_t adapter = 0;
};

/// Encoder and LM seeds from the pretraining section, adapter seed from train.seed.
inline ModelSeeds seeds_from(const AdapterConfig& cfg) {
  return {cfg.pretrain.encoder_seed, cfg.pretrain.seed, cfg.train.seed};
}

/// Frozen encoder and LM joined by the configured extraction, mapping,
/// injection and fine-tuning blocks.
template <typename Scalar>
class AdapterModel {
 public:
  AdapterModel(const AdapterConfig& cfg, const ModelSeeds& seeds, std::ostream& warn = std::cerr);

  const AdapterConfig& config() const { return cfg_; }

  FeatureStack<Scalar> extract(const Var<Scalar>& patches) const;
  InjectionPlan<Scalar> plan(const FeatureStack<Scalar>& stack, const ForwardContext& ctx) const;
  /// Logits [B, s, V] over the text positions.
  Var<Scalar> forward(const FeatureStack<Scalar>& stack, std::span<const int> ids, Index batch, Index seq,
                      const ForwardContext& ctx, std::vector<Var<Scalar>>* trace = nullptr) const;
  Var<Scalar> forward_patches(const Var<Scalar>& patches, std::span<const int> ids, Index batch, Index seq,
                              const ForwardContext& ctx) const;

  ParamList<Scalar> encoder_params() const;
  ParamList<Scalar> lm_params() const;
  ParamList<Scalar> backbone_params() const;
  ParamList<Scalar> adapter_params() const;
  ParamList<Scalar> all_params() const;
  ParamList<Scalar> trainable_params() const;

  /// Tokens the LM sees ahead of the text at its input layer (prefix + prompt).
  Index input_prefix_tokens() const;

  ToyEncoder<Scalar> encoder;
  ToyCausalLM<Scalar> lm;
  std::unique_ptr<Mapper<Scalar>> mapper;
  std::optional<GatedCrossAttnBlock<Scalar>> cross;
  PromptTokens<Scalar> prompt;

 private:
  AdapterConfig cfg_;
};

}  // namespace plm
