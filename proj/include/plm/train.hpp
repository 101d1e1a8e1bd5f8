#pragma once

#include "plm/model.hpp"
#include "plm/task.hpp"

#include "json.hpp"

#include <functional>
#include <iosfwd>
#include <vector>

namespace plm {

/// Linear warmup from lr_max * min_lr_ratio to lr_max over the first
/// floor(warmup_frac * total) steps, then cosine decay back to the minimum.
double lr_at(Index step, Index total, const TrainConfig& cfg);

/// AdamW with decoupled decay: p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps).
template <typename Scalar>
class AdamW {
 public:
  AdamW(ParamList<Scalar> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  /// Parameters without a gradient are treated as having a zero gradient.
  void step(double lr, double weight_decay);
  Index steps() const { return t_; }
  const Tensor<Scalar>& first_moment(std::size_t i) const { return m_[i]; }
  const Tensor<Scalar>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  ParamList<Scalar> params_;
  std::vector<Tensor<Scalar>> m_, v_;
  double beta1_, beta2_, eps_;
  Index t_ = 0;
};

/// Scales all gradients by clip / norm when their global L2 norm exceeds clip.
/// Returns the norm before clipping.
template <typename Scalar>
double clip_gradients(const ParamList<Scalar>& params, double clip);

template <typename Scalar>
double global_grad_norm(const ParamList<Scalar>& params);

/// Mean label-smoothed cross-entropy over the batch's loss mask.
template <typename Scalar>
Var<Scalar> batch_loss(const Var<Scalar>& logits, const Batch& batch, double smoothing);

/// Encoder outputs precomputed for a dataset; valid while the encoder is frozen.
struct FeatureCache {
  std::vector<Tensor<float>> levels;  // [N, n_tok, d_feats] each
  bool cls_only = false;
  Shape grid;

  static FeatureCache build(const AdapterModel<float>& model, const Dataset& data, Index chunk = 64);
  FeatureStack<float> gather(const std::vector<Index>& rows) const;
};

/// Feature stack for a batch, from the cache when one is given.
FeatureStack<float> batch_features(const AdapterModel<float>& model, const Batch& batch, const FeatureCache* cache);

using LogitsFn = std::function<Var<float>(std::span<const int> ids, Index batch, Index seq)>;

/// Argmax decoding from each start sequence (all of equal length) until EOS or
/// max_len new tokens. Returned sequences include the EOS when produced.
std::vector<std::vector<int>> greedy_decode(const LogitsFn& logits, const std::vector<std::vector<int>>& starts,
                                            Index max_len);

std::vector<std::vector<int>> decode_batch(const AdapterModel<float>& model, const FeatureStack<float>& stack,
                                           const std::vector<std::vector<int>>& prompts, Index max_len);

struct EvalResult {
  double exact_match = 0.0;
  double token_accuracy = 0.0;  // teacher-forced argmax accuracy on the loss mask
  double loss = 0.0;
  Index examples = 0;
};

EvalResult evaluate(const AdapterModel<float>& model, const Dataset& data, const FeatureCache* cache,
                    Index batch_size = 64, Index limit = 0);

struct TrainOptions {
  Index max_steps = 0;   // 0: epochs x ceil(groups / batch)
  Index eval_every = 0;  // 0: after every epoch
  Index eval_limit = 0;  // 0: whole evaluation split
  bool cache_features = true;
  std::function<void(const nlohmann::json&)> on_metrics;
  std::ostream* progress = nullptr;
};

struct TrainResult {
  Index steps = 0;
  double final_train_loss = 0.0;
  EvalResult final_eval;
  std::vector<nlohmann::json> metrics;
  double ms_per_step = 0.0;
};

Index planned_steps(const AdapterConfig& cfg, Index n_groups);

/// Trains the model's trainable parameters with the configured recipe.
TrainResult train(AdapterModel<float>& model, const Dataset& train_data, const Dataset& eval_data,
                  const TrainOptions& opts = {});

}  // namespace plm
