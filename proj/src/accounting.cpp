#include "plm/accounting.hpp"

#include "plm/finetune.hpp"
#include "plm/mapping.hpp"
#include "plm/model.hpp"
#include "plm/nn.hpp"
#include "plm/train.hpp"

#include <Eigen/Core>

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <ostream>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>

namespace plm {

namespace {

struct Published {
  double count;
  double tolerance;
  bool discrepancy;
  const char* note;
};

const std::map<std::string, Published>& published_counts() {
  static const std::map<std::string, Published> table = {
      {"limber-1",
       {12.5e6, 0.10, true,
        "published 12.5M corresponds to a different encoder width; the count here is the 1024->4096 projection"}},
      {"limber-all",
       {12.5e6, 0.10, true,
        "published 12.5M corresponds to a different encoder width; the count here is the 1024->4096 projection"}},
      {"mapl", {3.4e6, 0.10, false, "3.4M is matched by a query-mapper feed-forward width of 2 d_embed"}},
      {"ep-alm", {4.2e6, 0.10, false, ""}},
      {"depalm-qp-l0", {17.9e6, 0.10, false, ""}},
      {"depalm-qp-inner", {18.1e6, 0.10, false, ""}},
      {"depalm-r-avgpool", {21e6, 0.10, false, ""}},
      {"depalm-r-linear", {88e6, 0.10, false, ""}},
      {"depalm-r-qp", {18e6, 0.10, false, ""}},
      {"depalm-r-rand", {21e6, 0.10, false, ""}},
      {"depalm-c-attn",
       {17.9e6, 0.25, true,
        "no reading of the cross-attention block reproduces 17.9M; both inner out-projection variants are listed"}},
  };
  return table;
}

Index query_pool_layers(const MappingConfig& m) { return m.l_qp * encoder_layer_params(m.d_embed, m.ffn_mult * m.d_embed); }

std::vector<std::pair<std::string, Index>> block_parts(const AdapterConfig& cfg) {
  const Index d_f = cfg.model.d_feats, d_llm = cfg.model.d_llm;
  const MappingConfig& m = cfg.mapping;
  std::vector<std::pair<std::string, Index>> parts;
  switch (m.kind) {
    case MapperKind::linear:
      parts.emplace_back("mapper.proj", linear_params(d_f, d_llm, true));
      break;
    case MapperKind::qpmapper:
      parts.emplace_back("mapper.down", linear_params(d_f, m.d_embed, true));
      parts.emplace_back("mapper.pool.queries", m.n_q * m.d_embed);
      parts.emplace_back("mapper.pool.layers", query_pool_layers(m));
      parts.emplace_back("mapper.up", linear_params(m.d_embed, d_llm, true));
      parts.emplace_back("mapper.norm", d_llm);
      break;
    case MapperKind::r_avgpool:
    case MapperKind::r_linear:
    case MapperKind::r_qp: {
      parts.emplace_back("mapper.embed", linear_params(d_f, m.d_embed, true));
      if (m.kind == MapperKind::r_linear) {
        parts.emplace_back("mapper.pool", linear_params(numel(effective_block(cfg)) * m.d_embed, m.d_embed, true));
      } else if (m.kind == MapperKind::r_qp) {
        parts.emplace_back("mapper.pool.queries", m.n_q * m.d_embed);
        parts.emplace_back("mapper.pool.layers", query_pool_layers(m));
      }
      parts.emplace_back("mapper.norm", m.d_embed);
      parts.emplace_back("mapper.out", linear_params(m.d_embed, d_llm, true));
      break;
    }
    case MapperKind::r_rand:
      parts.emplace_back("mapper.proj_in", linear_params(d_f, d_llm, true));
      parts.emplace_back("mapper.norm", d_llm);
      parts.emplace_back("mapper.proj_out", linear_params(d_llm, d_llm, true));
      break;
    case MapperKind::none:
      break;
  }
  if (cfg.injection.mode == InjectionMode::cross_attn) {
    const Index d_e = m.d_embed;
    parts.emplace_back("cross.p_in", linear_params(d_f, d_e, true));
    parts.emplace_back("cross.feature_layer", encoder_layer_params(d_e, m.ffn_mult * d_e));
    parts.emplace_back("cross.text_fc1", linear_params(d_llm, d_e, true));
    parts.emplace_back("cross.text_fc2", linear_params(d_e, d_e, true));
    parts.emplace_back("cross.text_norm", d_e);
    parts.emplace_back("cross.attention", attention_params(d_e, true, cfg.injection.cross_out_proj));
    parts.emplace_back("cross.out", linear_params(d_e, d_llm, true));
    parts.emplace_back("cross.out_norm", d_llm);
    parts.emplace_back("cross.gates", cfg.injection.n_llm);
  }
  if (cfg.finetune.n_pt > 0) parts.emplace_back("prompt", cfg.finetune.n_pt * d_llm);
  if (cfg.finetune.bias_tuning) {
    parts.emplace_back("encoder.biases",
                       encoder_bias_count(cfg.model.d_feats, cfg.model.enc_ff(), cfg.model.enc_layers));
  }
  return parts;
}

Index sum_parts(const std::vector<std::pair<std::string, Index>>& parts) {
  Index total = 0;
  for (const auto& [name, n] : parts) total += n;
  return total;
}

bool has_encoder_layers(const AdapterConfig& cfg) {
  return cfg.mapping.kind == MapperKind::qpmapper || cfg.mapping.kind == MapperKind::r_qp ||
         cfg.injection.mode == InjectionMode::cross_attn;
}

}  // namespace

double ParamReport::relative_error() const {
  if (!published || *published == 0) return 0.0;
  return (static_cast<double>(total) - *published) / *published;
}

bool ParamReport::within_tolerance() const { return !published || std::abs(relative_error()) <= tolerance; }

std::string dims_label(const ModelDims& dims) {
  if (dims == full_dims()) return "full";
  if (dims == desk_dims()) return "desk";
  return "custom";
}

ParamReport count_trainable(const AdapterConfig& cfg) {
  validate(cfg);
  ParamReport r;
  r.config = cfg.name;
  r.dims = dims_label(cfg.model);
  r.parts = block_parts(cfg);
  r.total = sum_parts(r.parts);
  if (has_encoder_layers(cfg)) {
    for (Index mult : {1, 2}) {
      AdapterConfig alt = cfg;
      alt.mapping.ffn_mult = mult;
      r.variants.emplace_back("d_ff=" + std::to_string(mult) + "*d_embed", sum_parts(block_parts(alt)));
    }
  }
  if (cfg.injection.mode == InjectionMode::cross_attn) {
    AdapterConfig alt = cfg;
    alt.injection.cross_out_proj = !cfg.injection.cross_out_proj;
    r.variants.emplace_back(alt.injection.cross_out_proj ? "with inner out-projection" : "without inner out-projection",
                            sum_parts(block_parts(alt)));
  }
  if (r.dims == "full") {
    auto it = published_counts().find(cfg.name);
    if (it != published_counts().end()) {
      r.published = it->second.count;
      r.tolerance = it->second.tolerance;
      r.note = it->second.note;
      r.discrepancy = it->second.discrepancy || !r.within_tolerance();
    }
  }
  return r;
}

namespace {

// Multiply-adds of one transformer layer over n tokens (self-attention over all pairs).
double layer_macs(double n, double d, double d_ff) { return 4 * n * d * d + 2 * n * n * d + 2 * n * d * d_ff; }

// Softmax 3 per score, each norm 4 per element, GELU 8 per hidden unit, residual adds 1 per element.
double layer_elementwise(double n, double d, double d_ff, double heads) {
  return 3 * heads * n * n + 2 * 4 * n * d + 8 * n * d_ff + 2 * n * d;
}

Index level_tokens(const AdapterConfig& cfg) {
  return cfg.extraction.cls_mode == ClsMode::all ? 1 + cfg.model.n_patches() : 1;
}

Index rand_kept_tokens(const AdapterConfig& cfg, Index n_in) {
  if (cfg.mapping.rand.eval_keep_all) return n_in;
  return 1 + kept_patches(cfg.mapping.rand.f_max, n_in - 1);
}

double mapper_macs(const AdapterConfig& cfg, double n_in) {
  const double d_f = static_cast<double>(cfg.model.d_feats), d_llm = static_cast<double>(cfg.model.d_llm);
  const MappingConfig& m = cfg.mapping;
  const double d_e = static_cast<double>(m.d_embed), d_ff = static_cast<double>(m.ffn_mult * m.d_embed);
  const double n_q = static_cast<double>(m.n_q), l_qp = static_cast<double>(m.l_qp);
  const double bs = static_cast<double>(numel(effective_block(cfg)));
  const double n_blocks = (n_in - 1) / bs;
  switch (m.kind) {
    case MapperKind::linear:
      return n_in * d_f * d_llm;
    case MapperKind::qpmapper:
      return n_in * d_f * d_e + l_qp * layer_macs(n_in + n_q, d_e, d_ff) + n_q * d_e * d_llm;
    case MapperKind::r_avgpool:
      return n_in * d_f * d_e + (1 + n_blocks) * d_e * d_llm;
    case MapperKind::r_linear:
      return n_in * d_f * d_e + n_blocks * bs * d_e * d_e + (1 + n_blocks) * d_e * d_llm;
    case MapperKind::r_qp:
      return n_in * d_f * d_e + n_blocks * l_qp * layer_macs(bs + n_q, d_e, d_ff) + (1 + n_blocks) * d_e * d_llm;
    case MapperKind::r_rand: {
      const double kept = static_cast<double>(rand_kept_tokens(cfg, static_cast<Index>(n_in)));
      return kept * (d_f * d_llm + d_llm * d_llm);
    }
    case MapperKind::none:
      return 0;
  }
  return 0;
}

}  // namespace

std::string elementwise_constants() {
  return "softmax 3 ops per attention score; LayerNorm/RMSNorm 4 ops per element; GELU 8 ops per hidden unit; "
         "residual add 1 op per element";
}

Index injected_tokens(const AdapterConfig& cfg) {
  switch (cfg.injection.mode) {
    case InjectionMode::first_layer: {
      Index n = cfg.finetune.n_pt;
      const Index n_in = level_tokens(cfg);
      switch (cfg.mapping.kind) {
        case MapperKind::linear:
          return n + n_in;
        case MapperKind::qpmapper:
          return n + cfg.mapping.n_q;
        case MapperKind::r_avgpool:
        case MapperKind::r_linear:
        case MapperKind::r_qp:
          return n + 1 + (n_in - 1) / numel(effective_block(cfg));
        case MapperKind::r_rand:
          return n + rand_kept_tokens(cfg, n_in);
        case MapperKind::none:
          return n;
      }
      return n;
    }
    case InjectionMode::inner_layers:
      return cfg.mapping.kind == MapperKind::qpmapper ? cfg.mapping.n_q : level_tokens(cfg);
    case InjectionMode::cross_attn:
      return level_tokens(cfg);
  }
  return 0;
}

FlopReport estimate_flops(const AdapterConfig& cfg, Index prefix_tokens, Index text_len, Index batch) {
  const ModelDims& m = cfg.model;
  const double d = static_cast<double>(m.d_llm), d_ff = static_cast<double>(m.llm_ff());
  const double s = static_cast<double>(text_len), n_p = static_cast<double>(prefix_tokens);
  const double layers = static_cast<double>(m.llm_layers), heads = static_cast<double>(m.llm_heads);
  FlopReport r;
  r.prefix_tokens = prefix_tokens;
  r.text_len = text_len;
  r.batch = batch;
  r.head = s * d * static_cast<double>(m.vocab);
  if (prefix_tokens == 0) {
    r.lm_layers = layers * layer_macs(s, d, d_ff);
    r.elementwise = layers * layer_elementwise(s, d, d_ff, heads);
  } else {
    const double n_enc = static_cast<double>(1 + m.n_patches()), d_f = static_cast<double>(m.d_feats);
    const double enc_ff = static_cast<double>(m.enc_ff()), enc_layers = static_cast<double>(m.enc_layers);
    r.encoder = n_enc * static_cast<double>(m.patch_dim) * d_f + enc_layers * layer_macs(n_enc, d_f, enc_ff);
    r.elementwise += enc_layers * layer_elementwise(n_enc, d_f, enc_ff, static_cast<double>(m.enc_heads));

    const double n_in = static_cast<double>(level_tokens(cfg));
    const double levels = cfg.injection.mode == InjectionMode::first_layer ? 1 : static_cast<double>(cfg.extraction.n_fl);
    const double n_pt = static_cast<double>(cfg.finetune.n_pt);
    const double window = static_cast<double>(cfg.injection.n_llm);
    const double base = n_pt + s;
    switch (cfg.injection.mode) {
      case InjectionMode::first_layer:
        r.adapter = mapper_macs(cfg, n_in);
        r.lm_layers = layers * layer_macs(n_p + s, d, d_ff);
        r.elementwise += layers * layer_elementwise(n_p + s, d, d_ff, heads);
        break;
      case InjectionMode::inner_layers:
        r.adapter = levels * mapper_macs(cfg, n_in);
        r.lm_layers = (layers - window) * layer_macs(base, d, d_ff) + window * layer_macs(base + n_p, d, d_ff);
        r.elementwise += (layers - window) * layer_elementwise(base, d, d_ff, heads) +
                         window * layer_elementwise(base + n_p, d, d_ff, heads);
        break;
      case InjectionMode::cross_attn: {
        const double d_e = static_cast<double>(cfg.mapping.d_embed);
        const double x_ff = static_cast<double>(cfg.mapping.ffn_mult * cfg.mapping.d_embed);
        const double out_proj = cfg.injection.cross_out_proj ? 1 : 0;
        const double encode = n_in * d_f * d_e + layer_macs(n_in, d_e, x_ff);
        const double per_layer = base * d * d_e + base * d_e * d_e + base * d_e * d_e + 2 * n_p * d_e * d_e +
                                 2 * base * n_p * d_e + out_proj * base * d_e * d_e + base * d_e * d;
        r.adapter = levels * encode + window * per_layer;
        r.lm_layers = layers * layer_macs(base, d, d_ff);
        r.elementwise += layers * layer_elementwise(base, d, d_ff, heads);
        break;
      }
    }
  }
  const double b = static_cast<double>(batch);
  r.encoder *= b;
  r.adapter *= b;
  r.lm_layers *= b;
  r.head *= b;
  r.elementwise *= b;
  r.total = r.encoder + r.adapter + r.lm_layers + r.head;
  return r;
}

namespace {

using Clock = std::chrono::steady_clock;

struct Timing {
  double mean = 0, std = 0;
  Index reps = 1;
};

// Runs warmup steps for each step function, picks per-function inner repetition
// counts so one trial lasts at least min_trial_ms, then times `trials` rounds.
// Each round times every function once, so drift in machine speed hits all alike.
std::vector<Timing> time_interleaved(const std::vector<std::function<void()>>& steps, const BenchOptions& opt) {
  if (opt.trials < 10) throw ConfigError("bench.trials: at least 10 timed trials are required");
  if (opt.warmup < 3) throw ConfigError("bench.warmup: at least 3 warmup steps are required");
  std::vector<Timing> out(steps.size());
  for (std::size_t k = 0; k < steps.size(); ++k) {
    double last_ms = 0;
    for (Index i = 0; i < opt.warmup; ++i) {
      const auto t0 = Clock::now();
      steps[k]();
      last_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    }
    if (last_ms < opt.min_trial_ms) {
      out[k].reps = static_cast<Index>(std::ceil(opt.min_trial_ms / std::max(last_ms, 1e-3)));
    }
  }
  std::vector<std::vector<double>> samples(steps.size());
  for (Index i = 0; i < opt.trials; ++i) {
    for (std::size_t k = 0; k < steps.size(); ++k) {
      const auto t0 = Clock::now();
      for (Index r = 0; r < out[k].reps; ++r) steps[k]();
      samples[k].push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count() /
                           static_cast<double>(out[k].reps));
    }
  }
  for (std::size_t k = 0; k < steps.size(); ++k) {
    const auto& xs = samples[k];
    out[k].mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    double ss = 0;
    for (double x : xs) ss += (x - out[k].mean) * (x - out[k].mean);
    out[k].std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return out;
}

Batch random_text_batch(const ModelDims& dims, Index batch, Index text_len, Rng& rng, bool with_patches) {
  Batch b;
  b.batch = batch;
  b.seq = text_len;
  std::uniform_int_distribution<int> tok(0, static_cast<int>(dims.vocab) - 1);
  for (Index i = 0; i < batch * text_len; ++i) {
    b.ids.push_back(tok(rng));
    b.labels.push_back(tok(rng));
    b.mask.push_back(1);
  }
  if (with_patches) b.patches = normal_tensor<float>({batch, dims.n_patches(), dims.patch_dim}, 1.0, rng);
  return b;
}

}  // namespace

namespace {

// Model, batch and optimizer state for one benchmarked configuration.
struct StepBench {
  AdapterConfig cfg;
  AdapterModel<float> model;
  Rng rng;
  Batch batch;
  Var<float> patches;
  ParamList<float> params;
  AdamW<float> optimizer;

  StepBench(const AdapterConfig& c, const BenchOptions& opt, std::ostream& quiet)
      : cfg(c),
        model(c, seeds_from(c), quiet),
        rng(opt.seed * 7919 + 5),
        batch(random_text_batch(c.model, opt.batch, opt.text_len, rng, true)),
        patches(batch.patches),
        params(model.trainable_params()),
        optimizer(params, c.train.beta1, c.train.beta2, c.train.adam_eps) {}

  void step() {
    for (auto p : params) p.zero_grad();
    Tape<float> tape;
    TapeScope<float> scope(tape);
    ForwardContext ctx{true, &rng};
    auto logits = model.forward_patches(patches, batch.ids, batch.batch, batch.seq, ctx);
    auto loss = batch_loss(logits, batch, cfg.train.label_smoothing);
    tape.backward(loss);
    clip_gradients(params, cfg.train.grad_clip);
    optimizer.step(cfg.train.lr_max, cfg.train.weight_decay);
  }
};

}  // namespace

std::vector<BenchResult> bench_steps(const std::vector<AdapterConfig>& cfgs, const BenchOptions& opt) {
  std::ostringstream quiet;
  std::vector<std::unique_ptr<StepBench>> benches;
  std::vector<std::function<void()>> steps;
  for (const auto& cfg : cfgs) {
    benches.push_back(std::make_unique<StepBench>(cfg, opt, quiet));
    steps.push_back([b = benches.back().get()] { b->step(); });
  }
  const auto timings = time_interleaved(steps, opt);
  std::vector<BenchResult> rows;
  for (std::size_t k = 0; k < cfgs.size(); ++k) {
    const auto& cfg = cfgs[k];
    BenchResult r;
    r.config = cfg.name;
    r.dims = dims_label(cfg.model);
    r.total_params = count_elements(benches[k]->params);
    r.prefix_tokens = injected_tokens(cfg);
    r.flops_fwd = estimate_flops(cfg, r.prefix_tokens, opt.text_len, opt.batch).total;
    r.mean_ms = timings[k].mean;
    r.std_ms = timings[k].std;
    r.trials = opt.trials;
    r.inner_reps = timings[k].reps;
    r.threads = Eigen::nbThreads();
    rows.push_back(r);
  }
  return rows;
}

BenchResult bench_step(const AdapterConfig& cfg, const BenchOptions& opt) { return bench_steps({cfg}, opt).front(); }

BenchResult bench_bare_lm(const ModelDims& dims, const BenchOptions& opt) {
  Rng init(1);
  ToyCausalLM<float> lm("lm", dims, init);
  Rng rng(opt.seed * 7919 + 5);
  Batch batch = random_text_batch(dims, opt.batch, opt.text_len, rng, false);
  auto step = [&] {
    auto logits = lm.forward(batch.ids, batch.batch, batch.seq);
    auto loss = batch_loss(logits, batch, 0.0);
    (void)loss;
  };
  const Timing t = time_interleaved({step}, opt).front();
  AdapterConfig cfg;
  cfg.model = dims;
  BenchResult r;
  r.config = "bare-lm";
  r.dims = dims_label(dims);
  r.flops_fwd = estimate_flops(cfg, 0, opt.text_len, opt.batch).total;
  r.mean_ms = t.mean;
  r.std_ms = t.std;
  r.trials = opt.trials;
  r.inner_reps = t.reps;
  r.threads = Eigen::nbThreads();
  return r;
}

nlohmann::json to_json(const BenchResult& r) {
  return {{"config", r.config},       {"dims", r.dims},       {"total_params", r.total_params},
          {"prefix_tokens", r.prefix_tokens}, {"flops_fwd", r.flops_fwd}, {"ms_per_step", r.mean_ms},
          {"ms_std", r.std_ms},       {"trials", r.trials},   {"inner_reps", r.inner_reps},
          {"threads", r.threads}};
}

BenchResult bench_from_json(const nlohmann::json& j) {
  BenchResult r;
  r.config = j.at("config").get<std::string>();
  r.dims = j.at("dims").get<std::string>();
  r.total_params = j.at("total_params").get<Index>();
  r.prefix_tokens = j.at("prefix_tokens").get<Index>();
  r.flops_fwd = j.at("flops_fwd").get<double>();
  r.mean_ms = j.at("ms_per_step").get<double>();
  r.std_ms = j.at("ms_std").get<double>();
  r.trials = j.value("trials", Index{0});
  r.inner_reps = j.value("inner_reps", Index{1});
  r.threads = j.value("threads", Index{1});
  return r;
}

nlohmann::json to_json(const ParamReport& r) {
  nlohmann::json parts = nlohmann::json::object();
  for (const auto& [name, n] : r.parts) parts[name] = n;
  nlohmann::json j{{"config", r.config}, {"dims", r.dims}, {"parts", parts}, {"total", r.total}};
  if (!r.variants.empty()) {
    nlohmann::json v = nlohmann::json::object();
    for (const auto& [name, n] : r.variants) v[name] = n;
    j["variants"] = v;
  }
  if (r.published) {
    j["published"] = *r.published;
    j["relative_error"] = r.relative_error();
    j["tolerance"] = r.tolerance;
    j["within_tolerance"] = r.within_tolerance();
    j["discrepancy"] = r.discrepancy;
  }
  if (!r.note.empty()) j["note"] = r.note;
  return j;
}

void write_report(const std::vector<BenchResult>& rows, std::ostream& out, ReportFormat format) {
  if (format == ReportFormat::json) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : rows) arr.push_back(to_json(r));
    out << arr.dump(2) << '\n';
    return;
  }
  out << "config,dims,total_params,prefix_tokens,flops_fwd,ms_per_step,ms_std\n";
  const auto flags = out.flags();
  const auto precision = out.precision(17);
  for (const auto& r : rows) {
    out << r.config << ',' << r.dims << ',' << r.total_params << ',' << r.prefix_tokens << ',' << r.flops_fwd << ','
        << r.mean_ms << ',' << r.std_ms << '\n';
  }
  out.flags(flags);
  out.precision(precision);
}

void emit_report(const std::vector<BenchResult>& rows, const std::filesystem::path& path, ReportFormat format) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing: " + std::strerror(errno));
  write_report(rows, out, format);
  out.flush();
  if (!out) throw std::runtime_error("write to " + path.string() + " failed: " + std::strerror(errno));
}

}  // namespace plm
