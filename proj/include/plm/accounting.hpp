#pragma once

#include "plm/config.hpp"

#include "json.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace plm {

/// Closed-form trainable-parameter breakdown of one configuration.
struct ParamReport {
  std::string config;
  std::string dims;
  std::vector<std::pair<std::string, Index>> parts;
  Index total = 0;
  /// Counts under alternative readings of an under-determined block (e.g. feed-forward width).
  std::vector<std::pair<std::string, Index>> variants;
  /// Published count for the preset this config was expanded from, if any.
  std::optional<double> published;
  /// Relative tolerance the published count is checked against.
  double tolerance = 0.10;
  /// Set when the published count is known not to be reproduced by any variant.
  bool discrepancy = false;
  std::string note;

  double relative_error() const;
  bool within_tolerance() const;
};

/// Sums closed-form block sizes; never allocates weights.
ParamReport count_trainable(const AdapterConfig& cfg);

/// "full" when cfg.model matches full_dims(), "desk" when it matches desk_dims(), otherwise "custom".
std::string dims_label(const ModelDims& dims);

/// Forward multiply-add estimate for one batch.
struct FlopReport {
  Index prefix_tokens = 0;
  Index text_len = 0;
  Index batch = 1;
  double encoder = 0;
  double adapter = 0;
  double lm_layers = 0;
  double head = 0;
  /// Matrix multiply-adds only: what the instrumented counter sees.
  double total = 0;
  /// Softmax, normalisation and activation work, counted separately (see elementwise_constants()).
  double elementwise = 0;
};

/// Constants used for FlopReport::elementwise, as a human-readable string.
std::string elementwise_constants();

/// Tokens the configuration injects per injecting layer: the input prefix for
/// first-layer injection, the per-layer prefix for inner-layer injection and the
/// memory length for cross-attention.
Index injected_tokens(const AdapterConfig& cfg);

/// Multiply-adds of a forward pass with n_p injected tokens ahead of s text tokens.
/// n_p = 0 is the bare LM with no adapter or encoder work.
FlopReport estimate_flops(const AdapterConfig& cfg, Index prefix_tokens, Index text_len, Index batch = 1);

struct BenchOptions {
  Index batch = 8;
  Index text_len = 16;
  Index warmup = 3;
  Index trials = 10;
  /// Steps shorter than this are repeated inside one timed trial.
  double min_trial_ms = 5.0;
  std::uint64_t seed = 0;
};

struct BenchResult {
  std::string config;
  std::string dims;
  Index total_params = 0;
  Index prefix_tokens = 0;
  double flops_fwd = 0;
  double mean_ms = 0;
  double std_ms = 0;
  Index trials = 0;
  Index inner_reps = 1;
  Index threads = 1;
};

/// Times full training steps (encoder forward, adapter and LM forward, loss,
/// backward, clipping and AdamW) after discarding warmup steps.
BenchResult bench_step(const AdapterConfig& cfg, const BenchOptions& opt = {});
/// bench_step for several configurations at once, alternating their timed trials.
std::vector<BenchResult> bench_steps(const std::vector<AdapterConfig>& cfgs, const BenchOptions& opt = {});
/// Times a bare-LM step: forward and loss over the text alone.
BenchResult bench_bare_lm(const ModelDims& dims, const BenchOptions& opt = {});

enum class ReportFormat { csv, json };

/// Header: config,dims,total_params,prefix_tokens,flops_fwd,ms_per_step,ms_std
void emit_report(const std::vector<BenchResult>& rows, const std::filesystem::path& path, ReportFormat format);
void write_report(const std::vector<BenchResult>& rows, std::ostream& out, ReportFormat format);
nlohmann::json to_json(const BenchResult& r);
BenchResult bench_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ParamReport& r);

}  // namespace plm
