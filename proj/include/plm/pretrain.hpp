#pragma once

#include "plm/backbones.hpp"
#include "plm/checkpoint.hpp"
#include "plm/task.hpp"

#include <iosfwd>

namespace plm {

/// Language-model sequences: m context tokens, then BOS and a caption or a
/// question/answer pair. Context holds the described attribute tokens in
/// random order among fillers, so the LM learns to read attributes from
/// whatever precedes BOS. Only the text after BOS is scored.
struct CorpusBatch {
  Index batch = 0;
  Index seq = 0;
  std::vector<int> ids;
  std::vector<int> labels;
  std::vector<std::uint8_t> mask;
};

CorpusBatch make_corpus_batch(const SyntheticTask& task, Index batch, Index context, bool question, Rng& rng);

struct PretrainReport {
  Index steps = 0;
  double final_train_loss = 0.0;
  double heldout_loss = 0.0;
  double unigram_entropy = 0.0;  // entropy of the held-out scored tokens
};

/// Held-out next-token loss and the unigram baseline on the same tokens.
PretrainReport heldout_lm_loss(const ToyCausalLM<float>& lm, const SyntheticTask& task, const PretrainConfig& cfg);

/// Trains every LM parameter on the synthetic corpus. Deterministic in cfg.seed.
PretrainReport pretrain_toy_lm(ToyCausalLM<float>& lm, const SyntheticTask& task, const PretrainConfig& cfg,
                               std::ostream* progress = nullptr);

/// Copies the "lm.*" entries of a checkpoint into an LM built under the name "lm"; other entries are ignored.
void load_lm_weights(const ToyCausalLM<float>& lm, const Checkpoint& ckpt);
Checkpoint lm_weights(const ToyCausalLM<float>& lm);

}  // namespace plm
