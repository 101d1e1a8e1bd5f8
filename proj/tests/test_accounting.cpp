#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "plm/accounting.hpp"
#include "plm/model.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace plm;

namespace {

Index part(const ParamReport& r, const std::string& name) {
  for (const auto& [n, c] : r.parts) {
    if (n == name) return c;
  }
  return -1;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("plm_accounting_" + name);
}

std::vector<AdapterConfig> desk_presets() {
  std::vector<AdapterConfig> out;
  for (const auto& name : preset_names()) out.push_back(make_preset(name));
  return out;
}

}  // namespace

TEST_CASE("full-scale closed forms") {
  const auto full = full_dims();
  SUBCASE("ep-alm is one 1024 -> 4096 projection") {
    auto r = count_trainable(make_preset("ep-alm", full));
    CHECK(r.total == 1024 * 4096 + 4096);
    CHECK(r.dims == "full");
    CHECK(r.within_tolerance());
  }
  SUBCASE("query mapper decomposition") {
    auto r = count_trainable(make_preset("depalm-qp-l0", full));
    CHECK(part(r, "mapper.down") == 1024 * 1024 + 1024);
    CHECK(part(r, "mapper.pool.queries") == 32 * 1024);
    CHECK(part(r, "mapper.pool.layers") == 2 * (4 * (1024 * 1024 + 1024) + 2 * (1024 * 1024 + 1024) + 4 * 1024));
    CHECK(part(r, "mapper.up") == 1024 * 4096 + 4096);
    CHECK(part(r, "mapper.norm") == 4096);
    CHECK(part(r, "prompt") == 4096);
    CHECK(r.total == 17892352);
  }
  SUBCASE("r-linear block projection dominates") {
    auto r = count_trainable(make_preset("depalm-r-linear", full));
    CHECK(part(r, "mapper.pool") == 4 * 4096 * 4096 + 4096);
    CHECK(r.within_tolerance());
  }
  SUBCASE("totals are sums of parts") {
    for (const auto& name : preset_names()) {
      auto r = count_trainable(make_preset(name, full));
      Index sum = 0;
      for (const auto& [n, c] : r.parts) sum += c;
      CHECK(sum == r.total);
    }
  }
  SUBCASE("documented discrepancies are flagged, not hidden") {
    auto cross = count_trainable(make_preset("depalm-c-attn", full));
    CHECK(cross.discrepancy);
    CHECK(cross.tolerance == doctest::Approx(0.25));
    CHECK(cross.variants.size() == 3);
    auto mapl = count_trainable(make_preset("mapl", full));
    REQUIRE(mapl.variants.size() == 2);
    CHECK(mapl.variants[0].second == doctest::Approx(2.91e6).epsilon(0.01));
    CHECK(mapl.variants[1].second == doctest::Approx(3.43e6).epsilon(0.01));
    CHECK(count_trainable(make_preset("limber-all", full)).discrepancy);
  }
  SUBCASE("bias tuning adds the encoder biases") {
    auto cfg = make_preset("depalm-qp-l0", full);
    const Index base = count_trainable(cfg).total;
    cfg.finetune.bias_tuning = true;
    CHECK(count_trainable(cfg).total - base == encoder_bias_count(1024, 4096, 24));
  }
  SUBCASE("published counts apply only at full dims") {
    CHECK_FALSE(count_trainable(make_preset("depalm-qp-l0")).published.has_value());
  }
}

TEST_CASE("analytic count equals registry enumeration at desk scale") {
  for (auto cfg : desk_presets()) {
    for (bool bias : {false, true}) {
      cfg.finetune.bias_tuning = bias;
      CAPTURE(cfg.name);
      CAPTURE(bias);
      std::ostringstream quiet;
      AdapterModel<float> model(cfg, {}, quiet);
      auto reg = TrainableRegistry::of(model.all_params());
      auto r = count_trainable(cfg);
      CHECK(r.total == reg.trainable_total());
      auto by = reg.trainable_by_component();
      std::map<std::string, Index> analytic;
      for (const auto& [n, c] : r.parts) analytic[n.substr(0, n.find('.'))] += c;
      CHECK(by == analytic);
    }
  }
}

TEST_CASE("flop estimate matches the instrumented counter") {
  for (const auto& cfg : desk_presets()) {
    CAPTURE(cfg.name);
    std::ostringstream quiet;
    AdapterModel<float> model(cfg, {}, quiet);
    const Index batch = 2, s = 5;
    Rng rng(4);
    auto patches = Var<float>(normal_tensor<float>({batch, cfg.model.n_patches(), cfg.model.patch_dim}, 1.0, rng));
    std::vector<int> ids(static_cast<std::size_t>(batch * s), 3);
    reset_mac_count();
    model.forward_patches(patches, ids, batch, s, ForwardContext{});
    const double counted = static_cast<double>(mac_count());
    const auto est = estimate_flops(cfg, injected_tokens(cfg), s, batch);
    CHECK(std::abs(est.total - counted) / counted < 0.10);
    CHECK(est.elementwise > 0);
  }
  SUBCASE("bare LM") {
    AdapterConfig cfg;
    Rng init(1);
    ToyCausalLM<float> lm("lm", cfg.model, init);
    std::vector<int> ids(12, 2);
    reset_mac_count();
    lm.forward(ids, 2, 6);
    CHECK(estimate_flops(cfg, 0, 6, 2).total == doctest::Approx(static_cast<double>(mac_count())));
  }
}

TEST_CASE("flop estimate structure") {
  for (const auto& cfg : desk_presets()) {
    CAPTURE(cfg.name);
    const double bare = estimate_flops(cfg, 0, 16).total;
    double prev = bare;
    for (Index n_p : {1, 2, 8, 33, 257}) {
      const double cur = estimate_flops(cfg, n_p, 16).total;
      CHECK(cur > prev);
      prev = cur;
    }
    CHECK(bare < estimate_flops(cfg, injected_tokens(cfg), 16).total);
    const double s8 = estimate_flops(cfg, 1, 8).total, s16 = estimate_flops(cfg, 1, 16).total;
    CHECK(s16 < 4 * s8);
  }
  auto full = make_preset("depalm-qp-l0", full_dims());
  const double a = estimate_flops(full, 33, 64).total, b = estimate_flops(full, 33, 128).total;
  CHECK(b < 4 * a);
}

TEST_CASE("injected token counts") {
  CHECK(injected_tokens(make_preset("limber-all")) == 65);
  CHECK(injected_tokens(make_preset("limber-1")) == 1);
  CHECK(injected_tokens(make_preset("depalm-qp-l0")) == 33);
  CHECK(injected_tokens(make_preset("depalm-r-avgpool")) == 1 + 1 + 16);
  auto grid16 = desk_dims();
  grid16.grid = {16, 16};
  CHECK(injected_tokens(make_preset("limber-all", grid16)) == 257);
  CHECK(injected_tokens(make_preset("depalm-qp-l0", grid16)) == 33);
}

TEST_CASE("reports") {
  BenchResult a;
  a.config = "depalm-qp-l0";
  a.dims = "desk";
  a.total_params = 123457;
  a.prefix_tokens = 33;
  a.flops_fwd = 1234567891.25;
  a.mean_ms = 12.345678901234567;
  a.std_ms = 0.1 + 0.2;
  BenchResult b = a;
  b.config = "limber-all";
  b.prefix_tokens = 257;

  SUBCASE("empty list writes only the header") {
    const auto path = temp_path("empty.csv");
    emit_report({}, path, ReportFormat::csv);
    std::ifstream in(path);
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(in, line)) lines.push_back(line);
    REQUIRE(lines.size() == 1);
    CHECK(lines[0] == "config,dims,total_params,prefix_tokens,flops_fwd,ms_per_step,ms_std");
  }
  SUBCASE("one CSV row per configuration") {
    const auto path = temp_path("rows.csv");
    emit_report({a, b}, path, ReportFormat::csv);
    std::ifstream in(path);
    std::string line;
    Index n = 0;
    while (std::getline(in, line)) ++n;
    CHECK(n == 3);
  }
  SUBCASE("JSON round trip is exact") {
    const auto path = temp_path("rows.json");
    emit_report({a, b}, path, ReportFormat::json);
    std::ifstream in(path);
    auto j = nlohmann::json::parse(in);
    REQUIRE(j.size() == 2);
    auto back = bench_from_json(j[0]);
    CHECK(back.config == a.config);
    CHECK(back.total_params == a.total_params);
    CHECK(back.prefix_tokens == a.prefix_tokens);
    CHECK(back.flops_fwd == a.flops_fwd);
    CHECK(back.mean_ms == a.mean_ms);
    CHECK(back.std_ms == a.std_ms);
  }
  SUBCASE("I/O failures surface") {
    CHECK_THROWS_AS(emit_report({a}, "/nonexistent-dir/x.csv", ReportFormat::csv), std::runtime_error);
  }
}

TEST_CASE("bench harness") {
  BenchOptions opt;
  opt.batch = 2;
  opt.text_len = 8;
  auto cfg = make_preset("depalm-qp-l0");
  auto first = bench_step(cfg, opt);
  CHECK(first.trials == 10);
  CHECK(first.mean_ms > 0);
  CHECK(first.std_ms >= 0);
  CHECK(first.prefix_tokens == 33);
  CHECK(first.inner_reps * first.mean_ms >= opt.min_trial_ms * 0.5);
  auto bare = bench_bare_lm(cfg.model, opt);
  CHECK(bare.mean_ms < first.mean_ms);
  BenchOptions bad = opt;
  bad.trials = 3;
  CHECK_THROWS_AS(bench_step(cfg, bad), ConfigError);
}
