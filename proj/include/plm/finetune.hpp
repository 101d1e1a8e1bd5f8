#pragma once

#include "plm/nn.hpp"

#include "json.hpp"

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace plm {

/// Learnable embeddings placed between the perceptual prefix and the text.
template <typename Scalar>
struct PromptTokens {
  Var<Scalar> tokens;  // [n_pt, d_llm]; undefined when n_pt == 0

  PromptTokens() = default;
  PromptTokens(const std::string& name, Index n_pt, Index d_llm, Rng& rng);
  Index count() const { return tokens.defined() ? tokens.dim(0) : 0; }
  const Var<Scalar>* get() const { return tokens.defined() ? &tokens : nullptr; }
  void collect(ParamList<Scalar>& out) const {
    if (tokens.defined()) out.push_back(tokens);
  }
};

struct RegistryEntry {
  std::string name;
  Shape shape;
  bool trainable = false;
  Index count = 0;
};

/// Snapshot of which parameters the optimizer may touch.
struct TrainableRegistry {
  std::vector<RegistryEntry> entries;

  template <typename Scalar>
  static TrainableRegistry of(const ParamList<Scalar>& params);

  Index total() const;
  Index trainable_total() const;
  /// Trainable counts keyed by the leading name component ("mapper", "prompt", ...).
  std::map<std::string, Index> trainable_by_component() const;
  std::vector<std::string> trainable_names() const;
  nlohmann::json to_json() const;
};

/// Marks backbone parameters frozen and adapter parameters trainable.
template <typename Scalar>
void freeze_backbones(const ParamList<Scalar>& backbone, const ParamList<Scalar>& adapter);

/// Makes every parameter named "*.bias" trainable. Returns how many elements
/// were unfrozen and writes a warning to `warn` when there were none.
template <typename Scalar>
Index apply_bias_tuning(const ParamList<Scalar>& encoder, std::ostream& warn);

/// Analytic count of encoder bias elements: patch embedding plus, per layer,
/// q/k/v/o biases, both feed-forward biases and both LayerNorm shifts.
Index encoder_bias_count(Index d_feats, Index d_ff, Index n_layers);

}  // namespace plm
