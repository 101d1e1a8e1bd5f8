#include "plm/task.hpp"

#include <cmath>
#include <cstring>
#include <map>

namespace plm {

SyntheticTask::SyntheticTask(const TaskConfig& cfg, const ModelDims& dims)
    : cfg_(cfg), n_patches_(dims.n_patches()), patch_dim_(dims.patch_dim), vocab_(dims.vocab) {
  if (first_filler() > vocab_) throw ConfigError("model.vocab: too small for the task vocabulary");
  Rng rng(cfg_.render_seed);
  const Index onehot = cfg_.n_attributes * cfg_.n_values;
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.n_attributes));
  for (Index p = 0; p < n_patches_; ++p) render_.push_back(normal_tensor<float>({patch_dim_, onehot}, scale, rng));
}

Tensor<float> SyntheticTask::render(const std::vector<int>& values, double noise, Rng& rng) const {
  Tensor<float> out({n_patches_, patch_dim_});
  std::normal_distribution<double> jitter(0.0, 1.0);
  const Index onehot = cfg_.n_attributes * cfg_.n_values;
  for (Index p = 0; p < n_patches_; ++p) {
    const Tensor<float>& r = render_[static_cast<std::size_t>(p)];
    for (Index i = 0; i < patch_dim_; ++i) {
      double acc = 0.0;
      for (Index a = 0; a < cfg_.n_attributes; ++a) {
        acc += r[i * onehot + a * cfg_.n_values + values[static_cast<std::size_t>(a)]];
      }
      out[p * patch_dim_ + i] = static_cast<float>(acc + (noise > 0 ? noise * jitter(rng) : 0.0));
    }
  }
  return out;
}

std::vector<int> SyntheticTask::caption(const std::vector<int>& values) const {
  std::vector<int> out;
  for (Index a = 0; a < cfg_.n_attributes; ++a) out.push_back(attr_token(a, values[static_cast<std::size_t>(a)]));
  out.push_back(kEos);
  return out;
}

Index Dataset::text_length() const {
  if (targets.empty()) return 0;
  return 1 + static_cast<Index>(prompts.front().size() + targets.front().size()) - 1;
}

Dataset make_dataset(const SyntheticTask& task, Index n, std::uint64_t seed) {
  const TaskConfig& cfg = task.config();
  Rng rng(seed);
  std::uniform_int_distribution<int> value(0, static_cast<int>(cfg.n_values) - 1);
  std::uniform_int_distribution<Index> attribute(0, cfg.n_attributes - 1);
  Dataset data;
  data.patches = Tensor<float>({n, task.n_patches(), task.patch_dim()});
  const Index stride = task.n_patches() * task.patch_dim();
  for (Index i = 0; i < n; ++i) {
    std::vector<int> values;
    for (Index a = 0; a < cfg.n_attributes; ++a) values.push_back(value(rng));
    const Tensor<float> grid = task.render(values, cfg.noise, rng);
    std::memcpy(data.patches.data() + i * stride, grid.data(), sizeof(float) * static_cast<std::size_t>(stride));
    if (cfg.mode == TaskMode::caption) {
      data.prompts.push_back({});
      data.targets.push_back(task.caption(values));
    } else {
      const Index a = attribute(rng);
      data.prompts.push_back({task.question_token(a)});
      data.targets.push_back({task.attr_token(a, values[static_cast<std::size_t>(a)]), SyntheticTask::kEos});
    }
    data.values.push_back(std::move(values));
  }
  return data;
}

std::vector<Group> group_duplicates(const Dataset& data) {
  const Index stride = data.size() > 0 ? data.patches.size() / data.size() : 0;
  std::map<std::pair<std::string, std::vector<int>>, std::size_t> index;
  std::vector<Group> groups;
  for (Index i = 0; i < data.size(); ++i) {
    std::string bytes(reinterpret_cast<const char*>(data.patches.data() + i * stride),
                      sizeof(float) * static_cast<std::size_t>(stride));
    auto key = std::make_pair(std::move(bytes), data.prompts[static_cast<std::size_t>(i)]);
    auto [it, inserted] = index.emplace(std::move(key), groups.size());
    if (inserted) groups.emplace_back();
    groups[it->second].members.push_back(i);
  }
  return groups;
}

Index sample_target(const Group& group, Rng& rng) {
  if (group.members.size() == 1) return group.members.front();
  std::uniform_int_distribution<std::size_t> pick(0, group.members.size() - 1);
  return group.members[pick(rng)];
}

void text_layout(const std::vector<int>& prompt, const std::vector<int>& target, std::vector<int>& ids,
                 std::vector<int>& labels, std::vector<std::uint8_t>& mask) {
  ids.push_back(SyntheticTask::kBos);
  ids.insert(ids.end(), prompt.begin(), prompt.end());
  ids.insert(ids.end(), target.begin(), target.end() - 1);
  labels.insert(labels.end(), prompt.begin(), prompt.end());
  labels.insert(labels.end(), target.begin(), target.end());
  mask.insert(mask.end(), prompt.size(), 0);
  mask.insert(mask.end(), target.size(), 1);
}

Batch make_batch(const Dataset& data, const std::vector<Index>& rows) {
  Batch b;
  b.batch = static_cast<Index>(rows.size());
  b.examples = rows;
  const Index n_patches = data.patches.dim(1), patch_dim = data.patches.dim(2);
  const Index stride = n_patches * patch_dim;
  b.patches = Tensor<float>({b.batch, n_patches, patch_dim});
  for (Index r = 0; r < b.batch; ++r) {
    const auto i = static_cast<std::size_t>(rows[static_cast<std::size_t>(r)]);
    std::memcpy(b.patches.data() + r * stride, data.patches.data() + static_cast<Index>(i) * stride,
                sizeof(float) * static_cast<std::size_t>(stride));
    const std::size_t before = b.ids.size();
    text_layout(data.prompts[i], data.targets[i], b.ids, b.labels, b.mask);
    const Index len = static_cast<Index>(b.ids.size() - before);
    if (r == 0) b.seq = len;
    if (len != b.seq) throw DimensionError("batch mixes text lengths " + std::to_string(b.seq) + " and " +
                                           std::to_string(len));
  }
  return b;
}

TaskSplits make_splits(const SyntheticTask& task) {
  const auto& cfg = task.config();
  return {make_dataset(task, cfg.train_size, cfg.render_seed * 31 + 101),
          make_dataset(task, cfg.eval_size, cfg.render_seed * 31 + 202)};
}

}  // namespace plm
