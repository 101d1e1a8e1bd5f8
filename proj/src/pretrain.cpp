#include "plm/pretrain.hpp"

#include "plm/train.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>

namespace plm {

CorpusBatch make_corpus_batch(const SyntheticTask& task, Index batch, Index context, bool question, Rng& rng) {
  const TaskConfig& tc = task.config();
  std::uniform_int_distribution<int> value(0, static_cast<int>(tc.n_values) - 1);
  std::uniform_int_distribution<Index> attribute(0, tc.n_attributes - 1);
  std::uniform_int_distribution<int> filler(task.first_filler(), static_cast<int>(task.vocab()) - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  CorpusBatch out;
  out.batch = batch;
  for (Index b = 0; b < batch; ++b) {
    std::vector<int> values;
    for (Index a = 0; a < tc.n_attributes; ++a) values.push_back(value(rng));
    std::vector<int> ctx(static_cast<std::size_t>(context));
    for (auto& t : ctx) t = filler(rng);
    if (context >= tc.n_attributes && coin(rng) < 0.9) {
      std::vector<Index> slots(static_cast<std::size_t>(context));
      std::iota(slots.begin(), slots.end(), Index{0});
      for (Index a = 0; a < tc.n_attributes; ++a) {
        std::uniform_int_distribution<Index> pick(a, context - 1);
        std::swap(slots[static_cast<std::size_t>(a)], slots[static_cast<std::size_t>(pick(rng))]);
        ctx[static_cast<std::size_t>(slots[static_cast<std::size_t>(a)])] =
            task.attr_token(a, values[static_cast<std::size_t>(a)]);
      }
    }
    std::vector<int> prompt, target;
    if (question) {
      const Index a = attribute(rng);
      prompt = {task.question_token(a)};
      target = {task.attr_token(a, values[static_cast<std::size_t>(a)]), SyntheticTask::kEos};
    } else {
      target = task.caption(values);
    }
    out.ids.insert(out.ids.end(), ctx.begin(), ctx.end());
    if (context > 0) {
      out.labels.insert(out.labels.end(), ctx.begin() + 1, ctx.end());
      out.labels.push_back(SyntheticTask::kBos);
      out.mask.insert(out.mask.end(), static_cast<std::size_t>(context), 0);
    }
    text_layout(prompt, target, out.ids, out.labels, out.mask);
  }
  out.seq = static_cast<Index>(out.ids.size()) / batch;
  return out;
}

namespace {

Batch as_batch(const CorpusBatch& c) {
  Batch b;
  b.batch = c.batch;
  b.seq = c.seq;
  b.ids = c.ids;
  b.labels = c.labels;
  b.mask = c.mask;
  return b;
}

}  // namespace

PretrainReport heldout_lm_loss(const ToyCausalLM<float>& lm, const SyntheticTask& task, const PretrainConfig& cfg) {
  Rng rng(cfg.seed + 0x9E3779B97F4A7C15ULL);
  std::uniform_int_distribution<Index> context(0, cfg.max_context);
  double loss_sum = 0.0;
  Index scored = 0;
  std::map<int, Index> counts;
  for (int i = 0; i < 16; ++i) {
    const CorpusBatch c = make_corpus_batch(task, 32, context(rng), i % 2 == 1, rng);
    const Index n = std::count(c.mask.begin(), c.mask.end(), std::uint8_t{1});
    const auto logits = lm.forward(c.ids, c.batch, c.seq);
    loss_sum += batch_loss(logits, as_batch(c), 0.0).value().item() * static_cast<double>(n);
    scored += n;
    for (std::size_t t = 0; t < c.mask.size(); ++t) {
      if (c.mask[t]) ++counts[c.labels[t]];
    }
  }
  PretrainReport report;
  report.heldout_loss = loss_sum / static_cast<double>(scored);
  for (const auto& [token, n] : counts) {
    const double p = static_cast<double>(n) / static_cast<double>(scored);
    report.unigram_entropy -= p * std::log(p);
  }
  return report;
}

PretrainReport pretrain_toy_lm(ToyCausalLM<float>& lm, const SyntheticTask& task, const PretrainConfig& cfg,
                               std::ostream* progress) {
  ParamList<float> params;
  lm.collect(params);
  for (auto p : params) p.set_trainable(true);
  TrainConfig schedule;
  schedule.lr_max = cfg.lr;
  schedule.warmup_frac = 0.1;
  AdamW<float> optimizer(params);
  Rng rng(cfg.seed);
  std::uniform_int_distribution<Index> context(0, cfg.max_context);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  PretrainReport report;
  double window = 0.0;
  for (Index step = 0; step < cfg.steps; ++step) {
    const Index m = context(rng);
    const CorpusBatch c = make_corpus_batch(task, cfg.batch, m, coin(rng) < 0.5, rng);
    for (auto p : params) p.zero_grad();
    Tape<float> tape;
    TapeScope<float> scope(tape);
    auto loss = batch_loss(lm.forward(c.ids, c.batch, c.seq), as_batch(c), 0.0);
    const double value = loss.value().item();
    if (!std::isfinite(value)) {
      throw NumericError("language-model pretraining diverged at step " + std::to_string(step));
    }
    tape.backward(loss);
    clip_gradients(params, 1.0);
    optimizer.step(lr_at(step, cfg.steps, schedule), 0.01);
    report.final_train_loss = value;
    window += value;
    if (progress != nullptr && (step + 1) % 100 == 0) {
      *progress << "pretrain step " << step + 1 << " loss " << window / 100.0 << '\n';
      window = 0.0;
    }
  }
  for (auto p : params) p.set_trainable(false);
  const PretrainReport held = heldout_lm_loss(lm, task, cfg);
  report.steps = cfg.steps;
  report.heldout_loss = held.heldout_loss;
  report.unigram_entropy = held.unigram_entropy;
  return report;
}

void load_lm_weights(const ToyCausalLM<float>& lm, const Checkpoint& ckpt) {
  ParamList<float> params;
  lm.collect(params);
  Checkpoint subset;
  for (const auto& e : ckpt.entries) {
    if (e.name.starts_with("lm.")) subset.entries.push_back(e);
  }
  restore(params, subset);
}

Checkpoint lm_weights(const ToyCausalLM<float>& lm) {
  ParamList<float> params;
  lm.collect(params);
  return snapshot(params);
}

}  // namespace plm
