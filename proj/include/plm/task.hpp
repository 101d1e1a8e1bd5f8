#pragma once

#include "plm/config.hpp"
#include "plm/random.hpp"
#include "plm/tensor.hpp"

#include <cstdint>
#include <vector>

namespace plm {

/// Attribute captioning / question answering over rendered patch grids.
///
/// Vocabulary: 0 = BOS, 1 = EOS, then one token per (attribute, value),
/// one question token per attribute, and filler tokens up to V.
class SyntheticTask {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;

  SyntheticTask(const TaskConfig& cfg, const ModelDims& dims);

  const TaskConfig& config() const { return cfg_; }
  Index n_patches() const { return n_patches_; }
  Index patch_dim() const { return patch_dim_; }
  Index vocab() const { return vocab_; }

  int attr_token(Index attribute, Index value) const {
    return static_cast<int>(2 + attribute * cfg_.n_values + value);
  }
  int question_token(Index attribute) const {
    return static_cast<int>(2 + cfg_.n_attributes * cfg_.n_values + attribute);
  }
  int first_filler() const { return question_token(cfg_.n_attributes); }

  /// Patch grid [n_patches, patch_dim] for the given attribute values.
  Tensor<float> render(const std::vector<int>& values, double noise, Rng& rng) const;
  /// Caption tokens followed by EOS.
  std::vector<int> caption(const std::vector<int>& values) const;

 private:
  TaskConfig cfg_;
  Index n_patches_;
  Index patch_dim_;
  Index vocab_;
  std::vector<Tensor<float>> render_;  // per patch [patch_dim, n_attributes * n_values]
};

/// Examples share one text layout: the LM reads [BOS | prompt | target[:-1]]
/// and is scored on [prompt | target] with the prompt span masked out.
struct Dataset {
  Tensor<float> patches;  // [N, n_patches, patch_dim]
  std::vector<std::vector<int>> values;
  std::vector<std::vector<int>> prompts;
  std::vector<std::vector<int>> targets;

  Index size() const { return static_cast<Index>(targets.size()); }
  Index text_length() const;
};

Dataset make_dataset(const SyntheticTask& task, Index n, std::uint64_t seed);

struct TaskSplits {
  Dataset train;
  Dataset eval;
};

/// Training and held-out splits of the configured sizes, seeded from task.render_seed.
TaskSplits make_splits(const SyntheticTask& task);

/// Examples with identical perceptual input and prompt; one of their targets is used per visit.
struct Group {
  std::vector<Index> members;
};

std::vector<Group> group_duplicates(const Dataset& data);
Index sample_target(const Group& group, Rng& rng);

struct Batch {
  Index batch = 0;
  Index seq = 0;
  std::vector<Index> examples;  // dataset row of each element
  Tensor<float> patches;        // [B, n_patches, patch_dim]
  std::vector<int> ids;         // [B, seq]
  std::vector<int> labels;      // [B, seq]
  std::vector<std::uint8_t> mask;
};

/// Text layout for one example.
void text_layout(const std::vector<int>& prompt, const std::vector<int>& target, std::vector<int>& ids,
                 std::vector<int>& labels, std::vector<std::uint8_t>& mask);

Batch make_batch(const Dataset& data, const std::vector<Index>& rows);

}  // namespace plm
