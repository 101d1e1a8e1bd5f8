#include "plm/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>

namespace plm {

double lr_at(Index step, Index total, const TrainConfig& cfg) {
  const double hi = cfg.lr_max, lo = cfg.lr_max * cfg.min_lr_ratio;
  if (total <= 0) return lo;
  step = std::clamp<Index>(step, 0, total);
  const auto warmup = static_cast<Index>(std::floor(cfg.warmup_frac * static_cast<double>(total)));
  if (step <= warmup && warmup > 0) {
    return lo + (hi - lo) * static_cast<double>(step) / static_cast<double>(warmup);
  }
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return lo + 0.5 * (hi - lo) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename Scalar>
AdamW<Scalar>::AdamW(ParamList<Scalar> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.shape());
    v_.emplace_back(p.shape());
  }
}

template <typename Scalar>
void AdamW<Scalar>::step(double lr, double weight_decay) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.trainable()) continue;
    auto& value = p.mutable_value().array();
    auto& m = m_[i].array();
    auto& v = v_[i].array();
    if (p.has_grad()) {
      const auto& g = p.grad().array();
      if (!g.allFinite()) throw NumericError("non-finite gradient in parameter " + p.name());
      m = static_cast<Scalar>(beta1_) * m + static_cast<Scalar>(1.0 - beta1_) * g;
      v = static_cast<Scalar>(beta2_) * v + static_cast<Scalar>(1.0 - beta2_) * g.square();
    } else {
      m *= static_cast<Scalar>(beta1_);
      v *= static_cast<Scalar>(beta2_);
    }
    if (weight_decay != 0.0) value *= static_cast<Scalar>(1.0 - lr * weight_decay);
    const auto m_hat = m / static_cast<Scalar>(c1);
    const auto v_hat = v / static_cast<Scalar>(c2);
    value -= static_cast<Scalar>(lr) * (m_hat / (v_hat.sqrt() + static_cast<Scalar>(eps_)));
  }
}

template <typename Scalar>
double global_grad_norm(const ParamList<Scalar>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (p.has_grad()) sq += p.grad().array().template cast<double>().square().sum();
  }
  return std::sqrt(sq);
}

template <typename Scalar>
double clip_gradients(const ParamList<Scalar>& params, double clip) {
  if (clip <= 0) throw ConfigError("train.grad_clip: must be positive");
  const double norm = global_grad_norm(params);
  if (norm > clip) {
    const auto factor = static_cast<Scalar>(clip / norm);
    for (const auto& p : params) {
      if (p.has_grad()) p.node()->grad.array() *= factor;
    }
  }
  return norm;
}

template <typename Scalar>
Var<Scalar> batch_loss(const Var<Scalar>& logits, const Batch& batch, double smoothing) {
  return smoothed_cross_entropy(logits, std::span<const int>(batch.labels), static_cast<Scalar>(smoothing),
                                std::span<const std::uint8_t>(batch.mask));
}

FeatureCache FeatureCache::build(const AdapterModel<float>& model, const Dataset& data, Index chunk) {
  FeatureCache cache;
  cache.grid = model.config().model.grid;
  cache.cls_only = model.config().extraction.cls_mode != ClsMode::all;
  const Index n = data.size();
  const Index n_patches = data.patches.dim(1), patch_dim = data.patches.dim(2);
  for (Index start = 0; start < n; start += chunk) {
    const Index count = std::min(chunk, n - start);
    Tensor<float> part({count, n_patches, patch_dim});
    std::memcpy(part.data(), data.patches.data() + start * n_patches * patch_dim,
                sizeof(float) * static_cast<std::size_t>(part.size()));
    const auto stack = model.extract(Var<float>(std::move(part)));
    if (cache.levels.empty()) {
      for (const auto& level : stack.levels) cache.levels.emplace_back(Shape{n, level.dim(1), level.dim(2)});
    }
    for (std::size_t l = 0; l < stack.levels.size(); ++l) {
      const auto& src = stack.levels[l].value();
      std::memcpy(cache.levels[l].data() + start * src.size() / count, src.data(),
                  sizeof(float) * static_cast<std::size_t>(src.size()));
    }
  }
  return cache;
}

FeatureStack<float> FeatureCache::gather(const std::vector<Index>& rows) const {
  FeatureStack<float> stack;
  stack.cls_only = cls_only;
  stack.grid = grid;
  for (const auto& level : levels) {
    const Index per = level.dim(1) * level.dim(2);
    Tensor<float> out({static_cast<Index>(rows.size()), level.dim(1), level.dim(2)});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::memcpy(out.data() + static_cast<Index>(r) * per, level.data() + rows[r] * per,
                  sizeof(float) * static_cast<std::size_t>(per));
    }
    stack.levels.emplace_back(std::move(out));
  }
  return stack;
}

FeatureStack<float> batch_features(const AdapterModel<float>& model, const Batch& batch, const FeatureCache* cache) {
  if (cache != nullptr) return cache->gather(batch.examples);
  return model.extract(Var<float>(batch.patches));
}

std::vector<std::vector<int>> greedy_decode(const LogitsFn& logits, const std::vector<std::vector<int>>& starts,
                                            Index max_len) {
  const auto batch = static_cast<Index>(starts.size());
  std::vector<std::vector<int>> generated(starts.size());
  if (batch == 0) return generated;
  std::vector<std::vector<int>> seqs = starts;
  std::vector<bool> done(starts.size(), false);
  for (Index step = 0; step < max_len; ++step) {
    const auto seq = static_cast<Index>(seqs.front().size());
    std::vector<int> ids;
    for (const auto& s : seqs) ids.insert(ids.end(), s.begin(), s.end());
    const Var<float> out = logits(ids, batch, seq);
    const Index vocab = out.dim(-1);
    bool all_done = true;
    for (Index b = 0; b < batch; ++b) {
      const float* row = out.value().data() + (b * seq + seq - 1) * vocab;
      const int next = static_cast<int>(std::max_element(row, row + vocab) - row);
      seqs[static_cast<std::size_t>(b)].push_back(next);
      if (!done[static_cast<std::size_t>(b)]) {
        generated[static_cast<std::size_t>(b)].push_back(next);
        if (next == SyntheticTask::kEos) done[static_cast<std::size_t>(b)] = true;
      }
      all_done = all_done && done[static_cast<std::size_t>(b)];
    }
    if (all_done) break;
  }
  return generated;
}

std::vector<std::vector<int>> decode_batch(const AdapterModel<float>& model, const FeatureStack<float>& stack,
                                           const std::vector<std::vector<int>>& prompts, Index max_len) {
  const ForwardContext ctx{};
  const auto plan = model.plan(stack, ctx);
  std::vector<std::vector<int>> starts;
  for (const auto& p : prompts) {
    std::vector<int> s{SyntheticTask::kBos};
    s.insert(s.end(), p.begin(), p.end());
    starts.push_back(std::move(s));
  }
  return greedy_decode(
      [&](std::span<const int> ids, Index b, Index s) { return model.lm.forward(ids, b, s, &plan, model.prompt.get()); },
      starts, max_len);
}

EvalResult evaluate(const AdapterModel<float>& model, const Dataset& data, const FeatureCache* cache,
                    Index batch_size, Index limit) {
  const Index n = limit > 0 ? std::min(limit, data.size()) : data.size();
  EvalResult result;
  Index exact = 0, correct = 0, scored = 0;
  double loss_sum = 0.0;
  const ForwardContext ctx{};
  for (Index start = 0; start < n; start += batch_size) {
    std::vector<Index> rows;
    for (Index i = start; i < std::min(n, start + batch_size); ++i) rows.push_back(i);
    const Batch batch = make_batch(data, rows);
    const auto stack = batch_features(model, batch, cache);
    const auto logits = model.forward(stack, batch.ids, batch.batch, batch.seq, ctx);
    loss_sum += batch_loss(logits, batch, 0.0).value().item() * static_cast<double>(rows.size());
    const Index vocab = logits.dim(-1);
    for (Index t = 0; t < batch.batch * batch.seq; ++t) {
      if (!batch.mask[static_cast<std::size_t>(t)]) continue;
      const float* row = logits.value().data() + t * vocab;
      correct += (std::max_element(row, row + vocab) - row) == batch.labels[static_cast<std::size_t>(t)];
      ++scored;
    }
    std::vector<std::vector<int>> prompts;
    for (Index r : rows) prompts.push_back(data.prompts[static_cast<std::size_t>(r)]);
    const Index max_len = static_cast<Index>(data.targets.front().size()) + 2;
    const auto decoded = decode_batch(model, stack, prompts, max_len);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      exact += decoded[r] == data.targets[static_cast<std::size_t>(rows[r])];
    }
  }
  result.examples = n;
  result.exact_match = n > 0 ? static_cast<double>(exact) / static_cast<double>(n) : 0.0;
  result.token_accuracy = scored > 0 ? static_cast<double>(correct) / static_cast<double>(scored) : 0.0;
  result.loss = n > 0 ? loss_sum / static_cast<double>(n) : 0.0;
  return result;
}

Index planned_steps(const AdapterConfig& cfg, Index n_groups) {
  const Index per_epoch = (n_groups + cfg.train.batch - 1) / cfg.train.batch;
  return per_epoch * cfg.train.epochs;
}

TrainResult train(AdapterModel<float>& model, const Dataset& train_data, const Dataset& eval_data,
                  const TrainOptions& opts) {
  using Clock = std::chrono::steady_clock;
  const AdapterConfig& cfg = model.config();
  const TrainConfig& tc = cfg.train;
  const auto params = model.trainable_params();
  const auto encoder_params = model.encoder_params();
  const bool encoder_frozen =
      std::none_of(encoder_params.begin(), encoder_params.end(), [](const Var<float>& p) { return p.trainable(); });
  std::optional<FeatureCache> train_cache, eval_cache;
  if (opts.cache_features && encoder_frozen) {
    train_cache = FeatureCache::build(model, train_data);
    eval_cache = FeatureCache::build(model, eval_data);
  }
  const FeatureCache* train_feats = train_cache ? &*train_cache : nullptr;
  const FeatureCache* eval_feats = eval_cache ? &*eval_cache : nullptr;

  const auto groups = group_duplicates(train_data);
  const Index per_epoch = (static_cast<Index>(groups.size()) + tc.batch - 1) / tc.batch;
  const Index total = opts.max_steps > 0 ? opts.max_steps : planned_steps(cfg, static_cast<Index>(groups.size()));
  const Index eval_every = opts.eval_every > 0 ? opts.eval_every : per_epoch;

  Rng order_rng(tc.seed * 7919 + 11), target_rng(tc.seed * 7919 + 23), noise_rng(tc.seed * 7919 + 37);
  AdamW<float> optimizer(params, tc.beta1, tc.beta2, tc.adam_eps);
  TrainResult result;
  std::vector<Index> order(groups.size());
  std::size_t cursor = order.size();
  double loss_acc = 0.0, ms_acc = 0.0, ms_total = 0.0;
  Index loss_count = 0;

  for (Index step = 0; step < total; ++step) {
    const auto t0 = Clock::now();
    std::vector<Index> rows;
    while (static_cast<Index>(rows.size()) < tc.batch) {
      if (cursor >= order.size()) {
        std::iota(order.begin(), order.end(), Index{0});
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
        if (!rows.empty()) break;
      }
      rows.push_back(sample_target(groups[static_cast<std::size_t>(order[cursor++])], target_rng));
    }
    for (auto p : params) p.zero_grad();
    const Index micro = (static_cast<Index>(rows.size()) + tc.grad_accum - 1) / tc.grad_accum;
    double step_loss = 0.0;
    for (std::size_t begin = 0; begin < rows.size(); begin += static_cast<std::size_t>(micro)) {
      const std::vector<Index> part(rows.begin() + static_cast<std::ptrdiff_t>(begin),
                                    rows.begin() + static_cast<std::ptrdiff_t>(
                                                       std::min(rows.size(), begin + static_cast<std::size_t>(micro))));
      const Batch batch = make_batch(train_data, part);
      Tape<float> tape;
      TapeScope<float> scope(tape);
      const ForwardContext ctx{true, &noise_rng};
      const auto stack = batch_features(model, batch, train_feats);
      auto loss = batch_loss(model.forward(stack, batch.ids, batch.batch, batch.seq, ctx), batch, tc.label_smoothing);
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        throw NumericError("non-finite training loss at step " + std::to_string(step) + " (lr " +
                           std::to_string(lr_at(step, total, tc)) + ")");
      }
      const double weight = static_cast<double>(part.size()) / static_cast<double>(rows.size());
      step_loss += value * weight;
      if (weight != 1.0) loss = scale(loss, static_cast<float>(weight));
      tape.backward(loss);
    }
    clip_gradients(params, tc.grad_clip);
    const double lr = lr_at(step, total, tc);
    optimizer.step(lr, tc.weight_decay);
    const double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    ms_acc += ms;
    ms_total += ms;
    loss_acc += step_loss;
    ++loss_count;
    result.final_train_loss = step_loss;

    if ((step + 1) % eval_every == 0 || step + 1 == total) {
      const EvalResult ev = evaluate(model, eval_data, eval_feats, 64, opts.eval_limit);
      nlohmann::json row = {{"step", step + 1},
                            {"lr", lr},
                            {"train_loss", loss_acc / static_cast<double>(loss_count)},
                            {"exact_match", ev.exact_match},
                            {"token_accuracy", ev.token_accuracy},
                            {"wall_ms_per_step", ms_acc / static_cast<double>(loss_count)}};
      result.metrics.push_back(row);
      result.final_eval = ev;
      if (opts.on_metrics) opts.on_metrics(row);
      if (opts.progress != nullptr) *opts.progress << row.dump() << '\n';
      loss_acc = ms_acc = 0.0;
      loss_count = 0;
    }
  }
  result.steps = total;
  result.ms_per_step = total > 0 ? ms_total / static_cast<double>(total) : 0.0;
  return result;
}

#define PLM_INSTANTIATE_TRAIN(S)                                       \
  template class AdamW<S>;                                             \
  template double clip_gradients(const ParamList<S>&, double);         \
  template double global_grad_norm(const ParamList<S>&);               \
  template Var<S> batch_loss(const Var<S>&, const Batch&, double);

PLM_INSTANTIATE_TRAIN(float)
PLM_INSTANTIATE_TRAIN(double)

}  // namespace plm
