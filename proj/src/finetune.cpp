#include "plm/finetune.hpp"

#include <ostream>

namespace plm {

template <typename Scalar>
PromptTokens<Scalar>::PromptTokens(const std::string& name, Index n_pt, Index d_llm, Rng& rng) {
  if (n_pt < 0) throw ConfigError("finetune.n_pt: must be non-negative");
  if (n_pt > 0) tokens = Var<Scalar>::parameter(name, normal_tensor<Scalar>({n_pt, d_llm}, 0.02, rng));
}

template <typename Scalar>
TrainableRegistry TrainableRegistry::of(const ParamList<Scalar>& params) {
  TrainableRegistry reg;
  for (const auto& p : params) reg.entries.push_back({p.name(), p.shape(), p.trainable(), p.value().size()});
  return reg;
}

Index TrainableRegistry::total() const {
  Index n = 0;
  for (const auto& e : entries) n += e.count;
  return n;
}

Index TrainableRegistry::trainable_total() const {
  Index n = 0;
  for (const auto& e : entries) n += e.trainable ? e.count : 0;
  return n;
}

std::map<std::string, Index> TrainableRegistry::trainable_by_component() const {
  std::map<std::string, Index> out;
  for (const auto& e : entries) {
    if (e.trainable) out[e.name.substr(0, e.name.find('.'))] += e.count;
  }
  return out;
}

std::vector<std::string> TrainableRegistry::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& e : entries) {
    if (e.trainable) out.push_back(e.name);
  }
  return out;
}

nlohmann::json TrainableRegistry::to_json() const {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& e : entries) {
    params.push_back({{"name", e.name}, {"shape", e.shape}, {"trainable", e.trainable}, {"count", e.count}});
  }
  return {{"total", total()},
          {"trainable_total", trainable_total()},
          {"trainable_by_component", trainable_by_component()},
          {"parameters", params}};
}

template <typename Scalar>
void freeze_backbones(const ParamList<Scalar>& backbone, const ParamList<Scalar>& adapter) {
  for (auto p : backbone) p.set_trainable(false);
  for (auto p : adapter) p.set_trainable(true);
}

template <typename Scalar>
Index apply_bias_tuning(const ParamList<Scalar>& encoder, std::ostream& warn) {
  Index n = 0;
  for (auto p : encoder) {
    const std::string& name = p.name();
    if (name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0) {
      p.set_trainable(true);
      n += p.value().size();
    }
  }
  if (n == 0) warn << "warning: bias tuning requested but the encoder has no bias parameters\n";
  return n;
}

Index encoder_bias_count(Index d_feats, Index d_ff, Index n_layers) {
  return d_feats + n_layers * (4 * d_feats + d_ff + d_feats + 2 * d_feats);
}

#define PLM_INSTANTIATE_FINETUNE(S)                                               \
  template struct PromptTokens<S>;                                                \
  template TrainableRegistry TrainableRegistry::of(const ParamList<S>&);          \
  template void freeze_backbones(const ParamList<S>&, const ParamList<S>&);       \
  template Index apply_bias_tuning(const ParamList<S>&, std::ostream&);

PLM_INSTANTIATE_FINETUNE(float)
PLM_INSTANTIATE_FINETUNE(double)

}  // namespace plm
