// Acceptance suite: one PASS/FAIL line per criterion; exit status 1 if any fails.

#include "gradcheck.hpp"

#include "plm/accounting.hpp"
#include "plm/checkpoint.hpp"
#include "plm/injection.hpp"
#include "plm/mapping.hpp"
#include "plm/model.hpp"
#include "plm/pretrain.hpp"
#include "plm/train.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numbers>
#include <algorithm>
#include <set>
#include <sstream>

using namespace plm;
using plm::testing::grad_check;
using plm::testing::probe_loss;

namespace {

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 3) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

// ---------------------------------------------------------------------------

void published_counts(Verdict& v) {
  const std::vector<std::pair<std::string, double>> expected = {
      {"ep-alm", 4.2e6},           {"depalm-qp-l0", 17.9e6},    {"depalm-qp-inner", 18.1e6},
      {"depalm-r-avgpool", 21e6},  {"depalm-r-linear", 88e6},   {"depalm-r-qp", 18e6},
      {"depalm-r-rand", 21e6}};
  for (const auto& [name, target] : expected) {
    const auto r = count_trainable(make_preset(name, full_dims()));
    const double rel = (static_cast<double>(r.total) - target) / target;
    v.detail << name << " " << fmt(static_cast<double>(r.total) / 1e6, 4) << "M (" << std::showpos
             << fmt(100 * rel, 2) << std::noshowpos << "%); ";
    v.require(std::abs(rel) <= 0.10, name + " within 10%");
  }
  const auto cross = count_trainable(make_preset("depalm-c-attn", full_dims()));
  v.detail << "depalm-c-attn " << fmt(static_cast<double>(cross.total) / 1e6, 4) << "M ("
           << std::showpos << fmt(100 * cross.relative_error(), 3) << std::noshowpos << "%, flagged="
           << (cross.discrepancy ? "yes" : "no") << "); ";
  v.require(cross.discrepancy && std::abs(cross.relative_error()) <= 0.25, "c-attn flagged within 25%");
}

// ---------------------------------------------------------------------------

void efficiency_ratio(Verdict& v) {
  ModelDims dims = desk_dims();
  dims.grid = {16, 16};
  BenchOptions opt;
  opt.text_len = 16;
  const auto limber = make_preset("limber-all", dims);
  const auto depalm = make_preset("depalm-qp-l0", dims);
  const auto rows = bench_steps({limber, depalm}, opt);
  const auto& slow = rows[0];
  const auto& fast = rows[1];
  const double ratio = slow.mean_ms / fast.mean_ms;
  v.detail << "limber-all " << slow.prefix_tokens << " tokens " << fmt(slow.mean_ms) << "+-" << fmt(slow.std_ms)
           << " ms, depalm-qp-l0 " << fast.prefix_tokens << " tokens " << fmt(fast.mean_ms) << "+-"
           << fmt(fast.std_ms) << " ms over " << fast.trials << " trials; ratio " << fmt(ratio);
  v.require(slow.prefix_tokens == 257 && fast.prefix_tokens == 33, "injected token counts 257 and 33");
  v.require(slow.trials >= 10 && fast.trials >= 10, ">= 10 timed trials");
  v.require(ratio >= 2.0, "ratio >= 2");
}

// ---------------------------------------------------------------------------

void learnability(Verdict& v) {
  const auto base = make_preset("depalm-qp-l0");
  SyntheticTask task(base.task, base.model);
  const auto splits = make_splits(task);

  auto t0 = Clock::now();
  Rng lm_rng(base.pretrain.seed);
  ToyCausalLM<float> lm("lm", base.model, lm_rng);
  const auto pre = pretrain_toy_lm(lm, task, base.pretrain);
  const Checkpoint lm_ckpt = lm_weights(lm);
  v.detail << "LM pretrain " << fmt(seconds_since(t0), 4) << " s (held-out loss " << fmt(pre.heldout_loss)
           << " vs unigram " << fmt(pre.unigram_entropy) << "); ";

  for (const char* name : {"depalm-qp-l0", "limber-all"}) {
    const auto cfg = make_preset(name);
    std::ostringstream quiet;
    AdapterModel<float> model(cfg, seeds_from(cfg), quiet);
    load_lm_weights(model.lm, lm_ckpt);
    const auto untrained = evaluate(model, splits.eval, nullptr);

    t0 = Clock::now();
    const std::clock_t c0 = std::clock();
    const auto result = train(model, splits.train, splits.eval);
    const double wall = seconds_since(t0);
    const double cpu = static_cast<double>(std::clock() - c0) / CLOCKS_PER_SEC;
    const auto trained = evaluate(model, splits.eval, nullptr);

    v.detail << name << ": untrained EM " << fmt(100 * untrained.exact_match) << "%, after " << result.steps
             << " steps EM " << fmt(100 * trained.exact_match, 4) << "% (" << fmt(wall, 4) << " s wall, "
             << fmt(cpu, 4) << " s CPU); ";
    v.require(untrained.exact_match <= 0.01, std::string(name) + " untrained <= 1%");
    v.require(result.steps <= 2000, std::string(name) + " within 2000 steps");
    v.require(trained.exact_match >= 0.90, std::string(name) + " >= 90% exact match");
    v.require(cpu <= 900, std::string(name) + " <= 15 min CPU");
  }
}

// ---------------------------------------------------------------------------

AdapterConfig tiny_config(const std::string& preset) {
  ModelDims d = desk_dims();
  d.d_llm = 16;
  d.llm_heads = 2;
  d.d_feats = 8;
  d.enc_heads = 2;
  d.enc_layers = 4;
  d.llm_layers = 4;
  d.grid = {4, 4};
  d.patch_dim = 6;
  d.max_positions = 64;
  auto cfg = make_preset(preset, d);
  cfg.mapping.heads = 2;
  cfg.mapping.dropout = 0.0;
  if (cfg.mapping.kind != MapperKind::linear && cfg.mapping.kind != MapperKind::r_rand) cfg.mapping.d_embed = 8;
  if (cfg.mapping.n_q > 4) cfg.mapping.n_q = 4;
  if (cfg.mapping.l_qp > 2) cfg.mapping.l_qp = 2;
  return cfg;
}

void gradient_suite(Verdict& v) {
  const double tol = 1e-4;
  double worst = 0;
  std::string worst_block;
  auto record = [&](const std::string& block, const plm::testing::GradCheckResult& r) {
    if (r.max_relative_error > worst) {
      worst = r.max_relative_error;
      worst_block = block + ":" + r.worst;
    }
    v.require(r.max_relative_error < tol, block + " (" + r.worst + " " + fmt(r.max_relative_error) + ")");
  };
  auto params_of = [](const auto& block) {
    ParamList<double> ps;
    block.collect(ps);
    return ps;
  };
  Rng rng(11);
  const ForwardContext eval{};
  auto input = [&](Shape s) { return Var<double>::parameter("x", normal_tensor<double>(std::move(s), 1.0, rng)); };

  {
    Linear<double> lin("lin", 6, 5, true, rng);
    auto x = input({2, 3, 6});
    auto ps = params_of(lin);
    ps.push_back(x);
    record("linear", grad_check([&] { return probe_loss(lin(x)); }, ps));
  }
  {
    MultiHeadAttention<double> attn("attn", {8, 2, true, true}, rng);
    auto x = input({2, 4, 8});
    auto m = input({2, 5, 8});
    auto ps = params_of(attn);
    ps.push_back(x);
    ps.push_back(m);
    record("attention", grad_check([&] { return probe_loss(attn.forward(x, m)); }, ps));
    record("causal attention", grad_check([&] { return probe_loss(attn.causal_self(x)); }, ps));
  }
  {
    TransformerEncoderLayer<double> layer("enc", 8, 2, 8, 0.0, rng);
    auto x = input({2, 5, 8});
    auto ps = params_of(layer);
    ps.push_back(x);
    record("encoder layer", grad_check([&] { return probe_loss(layer.forward(x, eval)); }, ps));
  }
  {
    auto cfg = tiny_config("depalm-qp-l0");
    QPMapper<double> qp("qp", 8, 16, cfg.mapping, rng);
    auto x = input({2, 17, 8});
    auto ps = params_of(qp);
    ps.push_back(x);
    record("query mapper", grad_check([&] { return probe_loss(qp.forward(x, eval)); }, ps));
  }
  for (auto [preset, kind] : {std::pair{"depalm-r-avgpool", BlockPool::avgpool},
                              std::pair{"depalm-r-linear", BlockPool::linear}, std::pair{"depalm-r-qp", BlockPool::qp}}) {
    auto cfg = tiny_config(preset);
    BlockResampler<double> res("res", kind, 8, 16, cfg.model.grid, cfg.mapping, rng);
    auto x = input({2, 17, 8});
    auto ps = params_of(res);
    ps.push_back(x);
    record(preset, grad_check([&] { return probe_loss(res.forward(x, eval)); }, ps));
  }
  {
    auto cfg = tiny_config("depalm-r-rand");
    RandSubsampler<double> rs("rand", 8, 16, cfg.mapping.rand, rng);
    auto x = input({2, 17, 8});
    auto ps = params_of(rs);
    ps.push_back(x);
    record("depalm-r-rand", grad_check(
                                [&] {
                                  Rng draw(5);
                                  return probe_loss(rs.forward(x, ForwardContext{true, &draw}));
                                },
                                ps));
  }
  {
    GatedCrossAttnBlock<double>::Options opt;
    opt.d_feats = 8;
    opt.d_embed = 8;
    opt.d_llm = 16;
    opt.heads = 2;
    opt.dropout = 0.0;
    GatedCrossAttnBlock<double> block("cross", opt, rng);
    block.gates[0].mutable_value()[0] = 0.4;
    auto x = input({2, 3, 16});
    auto level = input({2, 5, 8});
    auto ps = params_of(block);
    ps.push_back(x);
    ps.push_back(level);
    record("gated cross-attention",
           grad_check([&] { return probe_loss(block.inject(x, block.encode_features(level, eval), 0)); }, ps));
  }
  for (const char* preset : {"depalm-qp-l0", "ep-alm", "depalm-c-attn", "depalm-r-linear"}) {
    auto cfg = tiny_config(preset);
    cfg.finetune.bias_tuning = std::string(preset) == "depalm-qp-l0";
    std::ostringstream quiet;
    AdapterModel<double> model(cfg, seeds_from(cfg), quiet);
    if (model.cross) {
      for (auto& g : model.cross->gates) g.mutable_value()[0] = 0.3;
    }
    Batch b;
    b.batch = 2;
    b.seq = 4;
    b.ids = {0, 3, 4, 5, 0, 6, 7, 8};
    b.labels = {3, 4, 5, 1, 6, 7, 8, 1};
    b.mask = {1, 1, 1, 1, 0, 1, 1, 1};
    auto patches = Var<double>(normal_tensor<double>({2, cfg.model.n_patches(), cfg.model.patch_dim}, 1.0, rng));
    auto loss_fn = [&] {
      return batch_loss(model.forward_patches(patches, b.ids, b.batch, b.seq, eval), b, cfg.train.label_smoothing);
    };
    record(std::string("full stack ") + preset, grad_check(loss_fn, model.trainable_params(), 1e-6, 12));
  }
  v.detail << "worst relative error " << fmt(worst) << " (" << worst_block << "); ";
}

// ---------------------------------------------------------------------------

void identity_at_init(Verdict& v) {
  double worst = 0;
  for (Index n_pt : {0, 1}) {
    auto cfg = make_preset("depalm-c-attn");
    cfg.finetune.n_pt = n_pt;
    std::ostringstream quiet;
    AdapterModel<float> model(cfg, seeds_from(cfg), quiet);
    Rng rng(3);
    const Index batch = 3, s = 7;
    auto patches = Var<float>(normal_tensor<float>({batch, cfg.model.n_patches(), cfg.model.patch_dim}, 1.0, rng));
    std::vector<int> ids;
    for (Index i = 0; i < batch * s; ++i) ids.push_back(static_cast<int>(i % cfg.model.vocab));
    const auto with = model.forward_patches(patches, ids, batch, s, ForwardContext{});
    const auto bare = model.lm.forward(ids, batch, s, nullptr, model.prompt.get());
    double diff = 0;
    for (Index i = 0; i < with.value().size(); ++i) {
      diff = std::max(diff, static_cast<double>(std::abs(with.value()[i] - bare.value()[i])));
    }
    worst = std::max(worst, diff);
  }
  v.detail << "max |logit difference| = " << worst << " with zero gates (with and without a prompt token)";
  v.require(worst == 0.0, "exactly zero");
}

// ---------------------------------------------------------------------------

void freezing_contract(Verdict& v) {
  Index checked = 0;
  auto run = [&](AdapterConfig cfg, bool expect_bias_only) {
    cfg.task.train_size = 256;
    cfg.task.eval_size = 16;
    cfg.train.batch = 8;
    std::ostringstream quiet;
    AdapterModel<float> model(cfg, seeds_from(cfg), quiet);
    SyntheticTask task(cfg.task, cfg.model);
    const auto splits = make_splits(task);
    const auto params = model.all_params();
    const Checkpoint before = snapshot(params);
    TrainOptions opts;
    opts.max_steps = 100;
    opts.eval_every = 1000;
    opts.eval_limit = 8;
    const auto result = train(model, splits.train, splits.eval, opts);
    const auto changed = differing_entries(before, snapshot(params));
    const std::set<std::string> changed_set(changed.begin(), changed.end());
    std::set<std::string> trainable, encoder_biases;
    for (const auto& p : params) {
      if (p.trainable()) trainable.insert(p.name());
      if (p.name().starts_with("encoder.") && p.name().ends_with(".bias")) encoder_biases.insert(p.name());
    }
    bool frozen_intact = true;
    for (const auto& name : changed_set) frozen_intact = frozen_intact && trainable.contains(name);
    v.require(result.steps == 100, cfg.name + " ran 100 steps");
    v.require(frozen_intact, cfg.name + " frozen parameters byte-identical");
    v.require(!changed_set.empty(), cfg.name + " trainable parameters moved");
    if (expect_bias_only) {
      std::set<std::string> backbone_changed;
      for (const auto& name : changed_set) {
        if (name.starts_with("encoder.") || name.starts_with("lm.")) backbone_changed.insert(name);
      }
      v.require(backbone_changed == encoder_biases, cfg.name + " with bias tuning changes exactly the encoder biases");
      v.detail << cfg.name << "+bias tuning: " << backbone_changed.size() << " backbone tensors changed, all "
               << encoder_biases.size() << " encoder biases; ";
    }
    ++checked;
  };
  for (const auto& name : preset_names()) run(make_preset(name), false);
  for (const char* name : {"depalm-qp-l0", "depalm-c-attn"}) {
    auto cfg = make_preset(name);
    cfg.finetune.bias_tuning = true;
    run(cfg, true);
  }
  v.detail << checked << " runs of 100 steps, frozen tensors byte-identical; ";
}

// ---------------------------------------------------------------------------

bool close_rel(double a, double b, double tol) { return std::abs(a - b) <= tol * std::max(std::abs(b), 1e-300); }

void schedule_and_optimizer(Verdict& v) {
  TrainConfig cfg;
  const Index total = 1920;
  const Index warmup = static_cast<Index>(std::floor(cfg.warmup_frac * total));
  const double hi = cfg.lr_max, lo = cfg.lr_max * cfg.min_lr_ratio;
  const Index mid = warmup + (total - warmup) / 2;
  const double mid_expected =
      lo + 0.5 * (hi - lo) * (1 + std::cos(std::numbers::pi * static_cast<double>(mid - warmup) /
                                           static_cast<double>(total - warmup)));
  const std::vector<std::tuple<const char*, Index, double>> points = {
      {"step 0", 0, lo}, {"warmup end", warmup, hi}, {"cosine midpoint", mid, mid_expected}, {"final", total, lo}};
  for (const auto& [label, step, expected] : points) {
    const double got = lr_at(step, total, cfg);
    v.require(close_rel(got, expected, 1e-12), std::string("lr at ") + label);
  }
  v.require(close_rel(mid_expected, 0.5 * (lo + hi), 1e-12), "midpoint is the mean of the bounds");

  const double p0 = 0.7, g = -0.3, lr = 8e-4, wd = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  auto p = Var<double>::parameter("p", Tensor<double>({1}, {p0}));
  AdamW<double> opt({p}, b1, b2, eps);
  for (int step = 1; step <= 2; ++step) {
    p.zero_grad();
    p.node()->grad_buffer()[0] = g;
    opt.step(lr, wd);
  }
  double hand = p0, m = 0, s = 0;
  for (int t = 1; t <= 2; ++t) {
    m = b1 * m + (1 - b1) * g;
    s = b2 * s + (1 - b2) * g * g;
    const double m_hat = m / (1 - std::pow(b1, t)), s_hat = s / (1 - std::pow(b2, t));
    hand = hand * (1 - lr * wd) - lr * m_hat / (std::sqrt(s_hat) + eps);
  }
  v.require(close_rel(p.value()[0], hand, 1e-12), "AdamW matches hand arithmetic");
  v.detail << "lr at {0, " << warmup << ", " << mid << ", " << total << "} = {" << lr_at(0, total, cfg) << ", "
           << lr_at(warmup, total, cfg) << ", " << lr_at(mid, total, cfg) << ", " << lr_at(total, total, cfg)
           << "}; AdamW two steps " << std::setprecision(17) << p.value()[0] << " vs hand " << hand;
}

// ---------------------------------------------------------------------------

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }
double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2 * std::numbers::pi); }

void mapping_oracles(Verdict& v) {
  // Block mean pooling against direct 2x2 averaging over grid coordinates.
  {
    auto cfg = make_preset("depalm-r-avgpool");
    Rng rng(21);
    BlockResampler<double> res("res", BlockPool::avgpool, cfg.model.d_feats, cfg.model.d_llm, cfg.model.grid,
                               cfg.mapping, rng);
    const Index batch = 2, g = cfg.model.grid[0], d = cfg.mapping.d_embed;
    auto patches = Var<double>(normal_tensor<double>({batch, g * g, d}, 1.0, rng));
    const auto pooled = res.pool_blocks(patches, ForwardContext{}).value();
    double err = 0;
    Index block = 0;
    for (Index b = 0; b < batch; ++b) {
      block = 0;
      for (Index br = 0; br < g; br += 2) {
        for (Index bc = 0; bc < g; bc += 2, ++block) {
          for (Index c = 0; c < d; ++c) {
            double mean = 0;
            for (Index r = br; r < br + 2; ++r) {
              for (Index q = bc; q < bc + 2; ++q) mean += patches.value()[(b * g * g + r * g + q) * d + c];
            }
            mean /= 4;
            err = std::max(err, std::abs(pooled[(b * (g * g / 4) + block) * d + c] - mean));
          }
        }
      }
    }
    v.require(err < 1e-12, "avgpool equals direct 2x2 means");
    v.detail << "avgpool max error " << err << " over " << block << " blocks; ";
  }
  // Keep-fraction law: spike at f_max, otherwise a normal clamped to [f_min, f_max].
  {
    RandConfig rc;
    const Index n = 100000;
    Rng rng(2024);
    double sum = 0;
    Index at_max = 0, at_min = 0;
    for (Index i = 0; i < n; ++i) {
      const double f = sample_keep_fraction(rc, rng);
      sum += f;
      at_max += f == rc.f_max;
      at_min += f == rc.f_min;
    }
    const double a = (rc.f_min - rc.f_mean) / rc.f_std, b = (rc.f_max - rc.f_mean) / rc.f_std;
    const double p_lo = normal_cdf(a), p_hi = 1 - normal_cdf(b);
    const double p_max = rc.spike_p + (1 - rc.spike_p) * p_hi;
    const double p_min = (1 - rc.spike_p) * p_lo;
    // E[clamp(X)] and E[clamp(X)^2] for X ~ N(mu, sigma).
    const double mu = rc.f_mean, sg = rc.f_std;
    const double inner_mass = normal_cdf(b) - normal_cdf(a);
    const double inner_m1 = mu * inner_mass + sg * (normal_pdf(a) - normal_pdf(b));
    const double inner_m2 = (mu * mu + sg * sg) * inner_mass + 2 * mu * sg * (normal_pdf(a) - normal_pdf(b)) +
                            sg * sg * (a * normal_pdf(a) - b * normal_pdf(b));
    const double clamp_m1 = rc.f_min * p_lo + inner_m1 + rc.f_max * p_hi;
    const double clamp_m2 = rc.f_min * rc.f_min * p_lo + inner_m2 + rc.f_max * rc.f_max * p_hi;
    const double m1 = rc.spike_p * rc.f_max + (1 - rc.spike_p) * clamp_m1;
    const double m2 = rc.spike_p * rc.f_max * rc.f_max + (1 - rc.spike_p) * clamp_m2;
    const double sd_mean = std::sqrt((m2 - m1 * m1) / static_cast<double>(n));
    auto within = [&](double count, double p) {
      const double expected = p * static_cast<double>(n);
      return std::abs(count - expected) <= 3 * std::sqrt(static_cast<double>(n) * p * (1 - p));
    };
    const double mean = sum / static_cast<double>(n);
    v.require(within(static_cast<double>(at_max), p_max), "P(f = f_max) within 3 sigma");
    v.require(within(static_cast<double>(at_min), p_min), "P(f = f_min) within 3 sigma");
    v.require(std::abs(mean - m1) <= 3 * sd_mean, "mean keep fraction within 3 sigma");
    v.detail << "keep fraction over 1e5 draws: P(max) " << fmt(static_cast<double>(at_max) / n, 4) << " vs "
             << fmt(p_max, 4) << ", P(min) " << fmt(static_cast<double>(at_min) / n, 4) << " vs " << fmt(p_min, 4)
             << ", mean " << fmt(mean, 5) << " vs " << fmt(m1, 5) << "; ";
  }
  // Query mapper output length is n_q regardless of input length.
  {
    auto cfg = make_preset("depalm-qp-l0");
    Rng rng(8);
    QPMapper<float> qp("qp", cfg.model.d_feats, cfg.model.d_llm, cfg.mapping, rng);
    std::vector<Index> lengths;
    for (Index n : {1, 65, 257}) {
      auto x = Var<float>(normal_tensor<float>({2, n, cfg.model.d_feats}, 1.0, rng));
      const auto y = qp.forward(x, ForwardContext{});
      v.require(y.dim(1) == cfg.mapping.n_q && y.dim(2) == cfg.model.d_llm, "query mapper emits n_q tokens");
      lengths.push_back(y.dim(1));
    }
    v.detail << "query mapper outputs " << lengths[0] << "/" << lengths[1] << "/" << lengths[2]
             << " tokens for inputs of 1/65/257; ";
  }
}

// ---------------------------------------------------------------------------

// Every split of n layers into k ordered, non-empty contiguous runs.
void compositions(Index n, Index k, std::vector<Index>& current, std::vector<std::vector<Index>>& out) {
  if (k == 0) {
    if (n == 0) out.push_back(current);
    return;
  }
  for (Index run = 1; run <= n - (k - 1); ++run) {
    current.push_back(run);
    compositions(n - run, k - 1, current, out);
    current.pop_back();
  }
}

void injection_schedule(Verdict& v) {
  const Index layers = 32;
  for (auto [k, n_llm, n_left] : {std::tuple<Index, Index, Index>{4, 12, 3}, {6, 12, 1}}) {
    // Keep the most even splits; the window ends n_left layers before the top.
    std::vector<std::vector<Index>> all, even;
    std::vector<Index> current;
    compositions(n_llm, k, current, all);
    Index best = n_llm;
    for (const auto& c : all) best = std::min(best, *std::ranges::max_element(c) - *std::ranges::min_element(c));
    for (const auto& c : all) {
      if (*std::ranges::max_element(c) - *std::ranges::min_element(c) == best) even.push_back(c);
    }
    v.require(even.size() == 1, "unique even split for k=" + std::to_string(k));
    std::map<Index, Index> brute;
    Index layer = layers - n_left - n_llm;
    for (Index level = 0; level < k; ++level) {
      for (Index r = 0; r < even.front()[static_cast<std::size_t>(level)]; ++r) brute[layer++] = level;
    }
    const auto got = assign_levels(k, n_llm, n_left, layers);
    v.require(got == brute, "schedule for k=" + std::to_string(k));
    v.detail << "k=" << k << " over " << all.size() << " splits: layers " << got.begin()->first << ".."
             << got.rbegin()->first << " get levels ";
    for (const auto& [l, lev] : got) v.detail << lev;
    v.detail << "; ";
  }
}

// ---------------------------------------------------------------------------

void causality_and_masking(Verdict& v) {
  double worst_logit = 0, worst_loss = 0;
  Index probes = 0;
  for (const auto& name : preset_names()) {
    auto cfg = make_preset(name);
    std::ostringstream quiet;
    AdapterModel<float> model(cfg, seeds_from(cfg), quiet);
    if (model.cross) {
      for (auto& g : model.cross->gates) g.mutable_value()[0] = 0.5f;
    }
    Rng rng(17);
    const Index batch = 2, s = 6;
    auto patches = Var<float>(normal_tensor<float>({batch, cfg.model.n_patches(), cfg.model.patch_dim}, 1.0, rng));
    const auto stack = model.extract(patches);
    std::uniform_int_distribution<int> tok(0, static_cast<int>(cfg.model.vocab) - 1);
    std::vector<int> ids(static_cast<std::size_t>(batch * s));
    for (auto& id : ids) id = tok(rng);
    const auto base = model.forward(stack, ids, batch, s, ForwardContext{}).value();
    const Index vocab = cfg.model.vocab;
    for (Index t = 1; t < s; ++t) {
      auto edited = ids;
      for (Index b = 0; b < batch; ++b) {
        auto& id = edited[static_cast<std::size_t>(b * s + t)];
        id = (id + 1 + static_cast<int>(t)) % static_cast<int>(vocab);
      }
      const auto out = model.forward(stack, edited, batch, s, ForwardContext{}).value();
      for (Index b = 0; b < batch; ++b) {
        for (Index pos = 0; pos < t; ++pos) {
          for (Index c = 0; c < vocab; ++c) {
            const Index i = (b * s + pos) * vocab + c;
            worst_logit = std::max(worst_logit, static_cast<double>(std::abs(out[i] - base[i])));
          }
        }
      }
      ++probes;
    }
    // Labels under a zero mask never reach the loss.
    Batch bt;
    bt.batch = batch;
    bt.seq = s;
    bt.ids = ids;
    for (Index i = 0; i < batch * s; ++i) {
      bt.labels.push_back(tok(rng));
      bt.mask.push_back(static_cast<std::uint8_t>(i % 3 != 0));
    }
    auto logits = Var<float>(base);
    const float loss = batch_loss(logits, bt, cfg.train.label_smoothing).value().item();
    Batch edited = bt;
    for (Index i = 0; i < batch * s; ++i) {
      if (!edited.mask[static_cast<std::size_t>(i)]) edited.labels[static_cast<std::size_t>(i)] = tok(rng);
    }
    const float loss2 = batch_loss(logits, edited, cfg.train.label_smoothing).value().item();
    worst_loss = std::max(worst_loss, static_cast<double>(std::abs(loss2 - loss)));
  }
  v.require(worst_logit == 0.0, "earlier logits unchanged");
  v.require(worst_loss == 0.0, "masked label edits leave the loss unchanged");
  v.detail << probes << " token edits over " << preset_names().size() << " presets: max earlier-logit change "
           << worst_logit << ", max loss change from masked labels " << worst_loss << "; ";
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

struct Criterion {
  std::string name;
  std::function<void(Verdict&)> run;
  /// CPU-second budget for the whole criterion; 0 when only per-part budgets apply.
  double budget;
};

}  // namespace

// Optional arguments select criteria by number; none runs them all.
int main(int argc, char** argv) {
  retain_heap_memory();
  std::set<std::string> only(argv + 1, argv + argc);
  const std::vector<Criterion> criteria = {
      {"1 trainable-parameter accounting at full scale", published_counts, 1},
      {"4 float64 gradient suite", gradient_suite, 120},
      {"5 zero-gate cross-attention leaves LM logits unchanged", identity_at_init, 10},
      {"6 freezing contract", freezing_contract, 120},
      {"7 schedule and optimizer closed forms", schedule_and_optimizer, 1},
      {"8 mapping oracles", mapping_oracles, 60},
      {"9 level-to-layer injection schedule", injection_schedule, 1},
      {"10 causality and loss masking", causality_and_masking, 60},
      {"2 per-step cost ratio limber-all / depalm-qp-l0", efficiency_ratio, 300},
      {"3 end-to-end learnability", learnability, 0},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.contains(c.name.substr(0, c.name.find(' ')))) continue;
    Verdict v;
    const double start = cpu_seconds();
    try {
      c.run(v);
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail << "[exception: " << e.what() << "] ";
    }
    const double used = cpu_seconds() - start;
    if (const auto so_far = v.detail.str(); !so_far.empty() && !so_far.ends_with("; ")) v.detail << "; ";
    v.detail << "CPU " << fmt(used) << " s";
    if (c.budget > 0) {
      v.detail << " (budget " << c.budget << " s)";
      v.require(used < c.budget, "runtime budget");
    }
    failures += v.pass ? 0 : 1;
    std::cout << (v.pass ? "PASS" : "FAIL") << "  criterion " << c.name << ": " << v.detail.str() << std::endl;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
