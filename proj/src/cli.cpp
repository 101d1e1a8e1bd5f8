#include "plm/cli.hpp"

#include "plm/accounting.hpp"
#include "plm/checkpoint.hpp"
#include "plm/injection.hpp"
#include "plm/model.hpp"
#include "plm/pretrain.hpp"
#include "plm/train.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

namespace plm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ConfigSource {
  std::string preset;
  std::string config_path;
  std::string dims = "desk";
  std::vector<std::string> overrides;
};

void add_config_options(CLI::App& cmd, ConfigSource& src) {
  auto* preset = cmd.add_option("--preset", src.preset, "Named preset (see list-presets)");
  auto* config = cmd.add_option("--config", src.config_path, "JSON configuration file");
  preset->excludes(config);
  cmd.add_option("--dims", src.dims, "Dimensions a preset is expanded at")
      ->check(CLI::IsMember({"desk", "full"}))
      ->capture_default_str();
  cmd.add_option("--override", src.overrides, "Dotted key=value override, repeatable");
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string() + " for reading");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write to " + path.string() + " failed");
}

AdapterConfig resolve_config(const ConfigSource& src) {
  json j;
  if (!src.config_path.empty()) {
    j = read_json(src.config_path);
  } else if (!src.preset.empty()) {
    j = to_json(make_preset(src.preset, src.dims == "full" ? full_dims() : desk_dims()));
  } else {
    throw ConfigError("one of --preset or --config is required");
  }
  for (const auto& o : src.overrides) apply_override(j, o);
  AdapterConfig cfg = config_from_json(j);
  validate(cfg);
  return cfg;
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  localtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return s.str();
}

/// Creates root/name, or root/name-<timestamp>[-k] when it already exists.
fs::path fresh_run_dir(const fs::path& root, const std::string& name, bool with_checkpoints = true) {
  fs::create_directories(root);
  fs::path dir = root / name;
  if (fs::exists(dir)) {
    const std::string stamped = name + "-" + timestamp();
    dir = root / stamped;
    for (int k = 2; fs::exists(dir); ++k) dir = root / (stamped + "-" + std::to_string(k));
  }
  fs::create_directories(with_checkpoints ? dir / "checkpoints" : dir);
  return dir;
}

struct RunOutcome {
  fs::path dir;
  TrainResult result;
};

struct TrainRequest {
  fs::path root = "runs";
  std::string run_name;
  std::string lm_path;
  Index max_steps = 0;
  Index eval_limit = 0;
  bool bench = true;
};

Checkpoint pretrained_lm(const AdapterConfig& cfg, std::ostream& log) {
  Rng lm_rng(cfg.pretrain.seed);
  ToyCausalLM<float> lm("lm", cfg.model, lm_rng);
  SyntheticTask task(cfg.task, cfg.model);
  auto rep = pretrain_toy_lm(lm, task, cfg.pretrain, &log);
  log << "pretrained LM: held-out loss " << rep.heldout_loss << " (unigram " << rep.unigram_entropy << ")\n";
  return lm_weights(lm);
}

RunOutcome run_training(const AdapterConfig& cfg, const TrainRequest& req, const std::optional<Checkpoint>& lm_ckpt,
                        std::ostream& log) {
  const fs::path dir = fresh_run_dir(req.root, req.run_name.empty() ? cfg.name : req.run_name);
  write_json(dir / "config.json", to_json(cfg));

  AdapterModel<float> model(cfg, seeds_from(cfg), log);
  if (lm_ckpt) {
    load_lm_weights(model.lm, *lm_ckpt);
  } else if (!req.lm_path.empty()) {
    load_lm_weights(model.lm, load_checkpoint(req.lm_path));
  } else {
    load_lm_weights(model.lm, pretrained_lm(cfg, log));
  }
  save_checkpoint((dir / "checkpoints" / "backbones.plbk").string(), snapshot(model.backbone_params()));

  json params = {{"report", to_json(count_trainable(cfg))},
                 {"registry", TrainableRegistry::of(model.all_params()).to_json()}};
  write_json(dir / "params.json", params);

  SyntheticTask task(cfg.task, cfg.model);
  const auto splits = make_splits(task);
  std::ofstream metrics(dir / "metrics.jsonl");
  if (!metrics) throw std::runtime_error("cannot open " + (dir / "metrics.jsonl").string() + " for writing");
  TrainOptions opts;
  opts.max_steps = req.max_steps;
  opts.eval_limit = req.eval_limit;
  opts.progress = &log;
  opts.on_metrics = [&metrics](const json& row) { metrics << row.dump() << '\n' << std::flush; };
  RunOutcome outcome{dir, train(model, splits.train, splits.eval, opts)};

  save_checkpoint((dir / "checkpoints" / "adapter.plbk").string(), snapshot(model.trainable_params()));
  std::vector<BenchResult> rows;
  if (req.bench) rows.push_back(bench_step(cfg));
  emit_report(rows, dir / "bench.csv", ReportFormat::csv);
  return outcome;
}

json eval_json(const EvalResult& e) {
  return {{"exact_match", e.exact_match},
          {"token_accuracy", e.token_accuracy},
          {"loss", e.loss},
          {"examples", e.examples}};
}

void print_param_report(const ParamReport& r, std::ostream& out) {
  out << r.config << " (" << r.dims << " dims)\n";
  for (const auto& [name, n] : r.parts) out << "  " << std::left << std::setw(24) << name << n << '\n';
  out << "  " << std::left << std::setw(24) << "total" << r.total << '\n';
  for (const auto& [name, n] : r.variants) out << "  variant " << name << ": " << n << '\n';
  if (r.published) {
    out << "  published " << std::fixed << std::setprecision(0) << *r.published << ", relative error " << std::showpos << std::fixed
        << std::setprecision(1) << 100.0 * r.relative_error() << std::noshowpos << "%, tolerance "
        << 100.0 * r.tolerance << "%" << std::defaultfloat << std::setprecision(6)
        << (r.within_tolerance() ? " [within]" : " [outside]") << (r.discrepancy ? " [discrepancy flagged]" : "")
        << '\n';
  }
  if (!r.note.empty()) out << "  note: " << r.note << '\n';
}

// Shortest decimal form that reads back to the same double.
std::string format_number(double v) { return json(v).dump(); }

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Frozen-backbone multimodal adapters: training, evaluation and accounting"};
  app.require_subcommand(1);

  auto* list = app.add_subcommand("list-presets", "Print every preset with a one-line summary");

  ConfigSource count_src;
  bool count_json = false;
  auto* count = app.add_subcommand("count-params", "Closed-form trainable-parameter report");
  add_config_options(*count, count_src);
  count->add_flag("--json", count_json, "Print JSON instead of a table");

  ConfigSource pre_src;
  std::string pre_out = "lm.plbk";
  auto* pre = app.add_subcommand("pretrain-lm", "Pretrain the frozen toy LM and save its weights");
  add_config_options(*pre, pre_src);
  pre->add_option("--out", pre_out, "Checkpoint path")->capture_default_str();

  ConfigSource train_src;
  TrainRequest train_req;
  std::string train_root = "runs";
  auto* train_cmd = app.add_subcommand("train", "Train an adapter into a new run directory");
  add_config_options(*train_cmd, train_src);
  train_cmd->add_option("--out", train_root, "Directory that receives run directories")->capture_default_str();
  train_cmd->add_option("--lm", train_req.lm_path, "Pretrained LM checkpoint; pretrains one when absent");
  train_cmd->add_option("--max-steps", train_req.max_steps, "Stop after this many steps (0: full schedule)");
  train_cmd->add_option("--eval-limit", train_req.eval_limit, "Evaluate on at most this many held-out examples");
  train_cmd->add_flag_function("--no-bench", [&train_req](std::int64_t) { train_req.bench = false; },
                      "Write a header-only bench.csv");

  std::string eval_run;
  Index eval_limit = 0;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a trained run on its held-out split");
  eval_cmd->add_option("--run", eval_run, "Run directory")->required();
  eval_cmd->add_option("--limit", eval_limit, "Evaluate on at most this many examples");

  ConfigSource bench_src;
  std::vector<std::string> bench_presets;
  std::string bench_out;
  BenchOptions bench_opt;
  bool bench_bare = false;
  auto* bench = app.add_subcommand("bench", "Time training steps of one or more configurations");
  bench->add_option("--preset", bench_presets, "Preset to benchmark, repeatable");
  bench->add_option("--config", bench_src.config_path, "JSON configuration file");
  bench->add_option("--dims", bench_src.dims, "Dimensions presets are expanded at")
      ->check(CLI::IsMember({"desk", "full"}))
      ->capture_default_str();
  bench->add_option("--override", bench_src.overrides, "Dotted key=value override applied to every config");
  bench->add_option("--out", bench_out, "Report path; .json writes JSON, anything else CSV (default: stdout CSV)");
  bench->add_option("--batch", bench_opt.batch, "Batch size")->capture_default_str();
  bench->add_option("--text-len", bench_opt.text_len, "Text length")->capture_default_str();
  bench->add_option("--trials", bench_opt.trials, "Timed trials (>= 10)")->capture_default_str();
  bench->add_option("--warmup", bench_opt.warmup, "Discarded warmup steps (>= 3)")->capture_default_str();
  bench->add_flag("--bare", bench_bare, "Also time the bare LM");

  ConfigSource sweep_src;
  TrainRequest sweep_req;
  std::string sweep_root = "runs";
  std::vector<double> lrs{1e-3, 8e-4, 4e-4};
  auto* sweep = app.add_subcommand("sweep", "Train once per peak learning rate and summarise");
  add_config_options(*sweep, sweep_src);
  sweep->add_option("--lrs", lrs, "Peak learning rates")->delimiter(',')->capture_default_str();
  sweep->add_option("--out", sweep_root, "Directory that receives the sweep directory")->capture_default_str();
  sweep->add_option("--lm", sweep_req.lm_path, "Pretrained LM checkpoint; pretrains one when absent");
  sweep->add_option("--max-steps", sweep_req.max_steps, "Stop each run after this many steps");
  sweep->add_option("--eval-limit", sweep_req.eval_limit, "Evaluate on at most this many held-out examples");
  sweep->add_flag_function("--no-bench", [&sweep_req](std::int64_t) { sweep_req.bench = false; },
                  "Write header-only bench.csv files");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  }

  try {
    if (list->parsed()) {
      for (const auto& name : preset_names()) out << std::left << std::setw(18) << name << preset_summary(name) << '\n';
    } else if (count->parsed()) {
      auto r = count_trainable(resolve_config(count_src));
      if (count_json) {
        out << to_json(r).dump(2) << '\n';
      } else {
        print_param_report(r, out);
      }
    } else if (pre->parsed()) {
      auto cfg = resolve_config(pre_src);
      save_checkpoint(pre_out, pretrained_lm(cfg, err));
      out << "saved " << pre_out << '\n';
    } else if (train_cmd->parsed()) {
      auto cfg = resolve_config(train_src);
      train_req.root = train_root;
      auto run = run_training(cfg, train_req, std::nullopt, err);
      json summary = {{"run_dir", run.dir.string()},
                      {"steps", run.result.steps},
                      {"final_train_loss", run.result.final_train_loss},
                      {"eval", eval_json(run.result.final_eval)}};
      out << summary.dump() << '\n';
    } else if (eval_cmd->parsed()) {
      const fs::path dir = eval_run;
      AdapterConfig cfg = config_from_json(read_json(dir / "config.json"));
      std::ostringstream quiet;
      AdapterModel<float> model(cfg, seeds_from(cfg), quiet);
      restore(model.backbone_params(), load_checkpoint((dir / "checkpoints" / "backbones.plbk").string()));
      restore(model.trainable_params(), load_checkpoint((dir / "checkpoints" / "adapter.plbk").string()));
      SyntheticTask task(cfg.task, cfg.model);
      const auto splits = make_splits(task);
      out << eval_json(evaluate(model, splits.eval, nullptr, 64, eval_limit)).dump() << '\n';
    } else if (bench->parsed()) {
      std::vector<AdapterConfig> cfgs;
      for (const auto& name : bench_presets) {
        ConfigSource s = bench_src;
        s.config_path.clear();
        s.preset = name;
        cfgs.push_back(resolve_config(s));
      }
      if (!bench_src.config_path.empty()) cfgs.push_back(resolve_config(bench_src));
      if (cfgs.empty() && !bench_bare) throw ConfigError("bench needs at least one --preset or --config, or --bare");
      std::vector<BenchResult> rows;
      if (bench_bare) {
        ModelDims dims = cfgs.empty() ? (bench_src.dims == "full" ? full_dims() : desk_dims()) : cfgs.front().model;
        rows.push_back(bench_bare_lm(dims, bench_opt));
      }
      if (!cfgs.empty()) {
        for (const auto& row : bench_steps(cfgs, bench_opt)) {
          rows.push_back(row);
          err << row.config << ": " << row.mean_ms << " ms/step\n";
        }
      }
      if (bench_out.empty()) {
        write_report(rows, out, ReportFormat::csv);
      } else {
        const bool as_json = fs::path(bench_out).extension() == ".json";
        emit_report(rows, bench_out, as_json ? ReportFormat::json : ReportFormat::csv);
        out << "wrote " << bench_out << '\n';
      }
    } else if (sweep->parsed()) {
      if (lrs.empty()) throw ConfigError("sweep: --lrs needs at least one value");
      auto base = resolve_config(sweep_src);
      const fs::path sweep_dir = fresh_run_dir(sweep_root, base.name + "-sweep", false);
      std::optional<Checkpoint> lm;
      if (!sweep_req.lm_path.empty()) {
        lm = load_checkpoint(sweep_req.lm_path);
      } else {
        lm = pretrained_lm(base, err);
      }
      std::ofstream summary(sweep_dir / "summary.csv");
      if (!summary) throw std::runtime_error("cannot open " + (sweep_dir / "summary.csv").string() + " for writing");
      summary << "lr_max,run_dir,status,exact_match,token_accuracy,final_train_loss\n";
      for (double lr : lrs) {
        AdapterConfig cfg = base;
        cfg.train.lr_max = lr;
        TrainRequest req = sweep_req;
        req.root = sweep_dir;
        req.run_name = base.name + "-lr" + format_number(lr);
        try {
          validate(cfg);
          auto run = run_training(cfg, req, lm, err);
          summary << format_number(lr) << ',' << run.dir.string() << ",ok," << run.result.final_eval.exact_match << ','
                  << run.result.final_eval.token_accuracy << ',' << run.result.final_train_loss << '\n';
        } catch (const std::exception& e) {
          err << "sweep: lr_max=" << lr << " failed: " << e.what() << '\n';
          summary << format_number(lr) << ",,failed,,,\n";
        }
        summary.flush();
      }
      out << "wrote " << (sweep_dir / "summary.csv").string() << '\n';
    }
  } catch (const ConfigError& e) {
    err << "invalid configuration: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const PlanError& e) {
    err << "invalid configuration: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace plm
