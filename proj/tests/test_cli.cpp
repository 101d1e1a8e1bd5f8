#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "plm/cli.hpp"
#include "plm/config.hpp"

#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace plm;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("plm_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<json> metrics_without_timing(const fs::path& file) {
  std::ifstream in(file);
  std::vector<json> rows;
  std::string line;
  while (std::getline(in, line)) {
    auto j = json::parse(line);
    j.erase("wall_ms_per_step");
    rows.push_back(j);
  }
  return rows;
}

Index count_lines(const fs::path& file) {
  std::ifstream in(file);
  std::string line;
  Index n = 0;
  while (std::getline(in, line)) ++n;
  return n;
}

// Tiny schedule so a full train command runs in seconds.
const std::vector<std::string> kQuick = {"--override", "pretrain.steps=3",   "--override", "task.train_size=64",
                                         "--override", "task.eval_size=16", "--max-steps", "3"};

std::vector<std::string> with_quick(std::vector<std::string> args) {
  args.insert(args.end(), kQuick.begin(), kQuick.end());
  return args;
}

}  // namespace

TEST_CASE("list-presets names every preset") {
  auto r = run({"list-presets"});
  CHECK(r.code == 0);
  for (const auto& name : preset_names()) CHECK(r.out.find(name) != std::string::npos);
}

TEST_CASE("count-params") {
  auto r = run({"count-params", "--preset", "depalm-qp-l0", "--dims", "full"});
  CHECK(r.code == 0);
  CHECK(r.out.find("17892352") != std::string::npos);
  auto j = run({"count-params", "--preset", "depalm-c-attn", "--dims", "full", "--json"});
  REQUIRE(j.code == 0);
  auto parsed = json::parse(j.out);
  CHECK(parsed.at("discrepancy").get<bool>());
  CHECK(parsed.contains("variants"));
}

TEST_CASE("validation failures exit 1 and name the key") {
  auto dir = scratch("validation");
  auto cfg = to_json(make_preset("depalm-qp-l0"));
  cfg["mapping"].erase("n_q");
  std::ofstream(dir / "missing.json") << cfg.dump();
  auto r = run({"count-params", "--config", (dir / "missing.json").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("mapping.n_q") != std::string::npos);
  CHECK(r.out.empty());

  auto unknown = to_json(make_preset("depalm-qp-l0"));
  unknown["train"]["learning_rate"] = 0.1;
  std::ofstream(dir / "unknown.json") << unknown.dump();
  auto u = run({"count-params", "--config", (dir / "unknown.json").string()});
  CHECK(u.code == 1);
  CHECK(u.err.find("train.learning_rate") != std::string::npos);

  CHECK(run({"count-params", "--preset", "no-such-preset"}).code == 1);
  CHECK(run({"count-params", "--preset", "depalm-qp-l0", "--override", "train.batch=0"}).code == 1);
  CHECK(run({"count-params", "--preset", "depalm-qp-l0", "--override", "nonsense"}).code == 1);
  CHECK(run({"count-params", "--preset", "depalm-qp-l0", "--dims", "huge"}).code == 1);
  CHECK(run({}).code == 1);
  CHECK(run({"frobnicate"}).code == 1);
}

TEST_CASE("runtime failures exit 2") {
  auto r = run({"eval", "--run", "/nonexistent/run"});
  CHECK(r.code == 2);
  CHECK_FALSE(r.err.empty());
  auto lm = run(with_quick({"train", "--preset", "depalm-qp-l0", "--out", scratch("bad_lm").string(), "--lm",
                            "/nonexistent/lm.plbk"}));
  CHECK(lm.code == 2);
}

TEST_CASE("train writes a complete run directory") {
  auto root = scratch("train");
  auto r = run(with_quick({"train", "--preset", "depalm-qp-l0", "--override", "train.seed=7", "--out", root.string(),
                           "--no-bench"}));
  REQUIRE(r.code == 0);
  const fs::path dir = root / "depalm-qp-l0";
  for (const char* f : {"config.json", "metrics.jsonl", "params.json", "bench.csv", "checkpoints/backbones.plbk",
                        "checkpoints/adapter.plbk"}) {
    CHECK(fs::exists(dir / f));
  }
  auto cfg = json::parse(std::ifstream(dir / "config.json"));
  CHECK(cfg["train"]["seed"] == 7);
  CHECK_NOTHROW(validate(config_from_json(cfg)));
  CHECK(count_lines(dir / "bench.csv") == 1);
  auto summary = json::parse(r.out);
  CHECK(summary["run_dir"] == dir.string());

  SUBCASE("eval reloads the run") {
    auto e = run({"eval", "--run", dir.string()});
    REQUIRE(e.code == 0);
    auto j = json::parse(e.out);
    CHECK(j["exact_match"] == summary["eval"]["exact_match"]);
    CHECK(j["token_accuracy"] == summary["eval"]["token_accuracy"]);
  }
  SUBCASE("collisions never overwrite") {
    const auto before = fs::last_write_time(dir / "config.json");
    auto again = run(with_quick({"train", "--preset", "depalm-qp-l0", "--override", "train.seed=7", "--out",
                                 root.string(), "--no-bench"}));
    REQUIRE(again.code == 0);
    const fs::path second = json::parse(again.out)["run_dir"].get<std::string>();
    CHECK(second != dir);
    CHECK(second.filename().string().starts_with("depalm-qp-l0-"));
    CHECK(fs::last_write_time(dir / "config.json") == before);
    SUBCASE("resolved config reruns to identical metrics") {
      auto rerun = run({"train", "--config", (dir / "config.json").string(), "--out", root.string(), "--max-steps",
                        "3", "--no-bench"});
      REQUIRE(rerun.code == 0);
      const fs::path third = json::parse(rerun.out)["run_dir"].get<std::string>();
      CHECK(metrics_without_timing(third / "metrics.jsonl") == metrics_without_timing(dir / "metrics.jsonl"));
    }
  }
}

TEST_CASE("bench prints one CSV row per configuration") {
  auto r = run({"bench", "--preset", "depalm-qp-l0", "--preset", "limber-1", "--batch", "2", "--text-len", "4"});
  REQUIRE(r.code == 0);
  std::istringstream lines(r.out);
  std::string header, line;
  std::getline(lines, header);
  CHECK(header == "config,dims,total_params,prefix_tokens,flops_fwd,ms_per_step,ms_std");
  Index rows = 0;
  while (std::getline(lines, line)) ++rows;
  CHECK(rows == 2);
  CHECK(run({"bench", "--preset", "depalm-qp-l0", "--trials", "2"}).code == 1);
}

TEST_CASE("sweep") {
  auto root = scratch("sweep");
  SUBCASE("one summary row per value; a single value equals plain train") {
    auto s = run(with_quick({"sweep", "--preset", "depalm-qp-l0", "--lrs", "0.001", "--out", root.string(),
                             "--no-bench"}));
    REQUIRE(s.code == 0);
    const fs::path sweep_dir = root / "depalm-qp-l0-sweep";
    CHECK(count_lines(sweep_dir / "summary.csv") == 2);
    auto t = run(with_quick({"train", "--preset", "depalm-qp-l0", "--override", "train.lr_max=0.001", "--out",
                             root.string(), "--no-bench"}));
    REQUIRE(t.code == 0);
    const fs::path plain = json::parse(t.out)["run_dir"].get<std::string>();
    CHECK(metrics_without_timing(plain / "metrics.jsonl") ==
          metrics_without_timing(sweep_dir / "depalm-qp-l0-lr0.001" / "metrics.jsonl"));
  }
  SUBCASE("default values") {
    auto s = run(with_quick({"sweep", "--preset", "limber-1", "--out", root.string(), "--no-bench"}));
    REQUIRE(s.code == 0);
    const fs::path sweep_dir = root / "limber-1-sweep";
    CHECK(count_lines(sweep_dir / "summary.csv") == 4);
    std::ifstream in(sweep_dir / "summary.csv");
    std::string line;
    std::getline(in, line);
    std::vector<std::string> lrs;
    while (std::getline(in, line)) lrs.push_back(line.substr(0, line.find(',')));
    CHECK(lrs == std::vector<std::string>{"0.001", "0.0008", "0.0004"});
  }
  SUBCASE("a failing value is recorded and the sweep continues") {
    auto s = run(with_quick({"sweep", "--preset", "limber-1", "--lrs", "-1,0.001", "--out", root.string(),
                             "--no-bench"}));
    REQUIRE(s.code == 0);
    std::ifstream in(root / "limber-1-sweep" / "summary.csv");
    std::string all((std::istreambuf_iterator<char>(in)), {});
    CHECK(all.find("failed") != std::string::npos);
    CHECK(all.find(",ok,") != std::string::npos);
  }
}
