#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "gradcheck.hpp"
#include "plm/nn.hpp"

#include <cmath>

using namespace plm;
using plm::testing::grad_check;
using plm::testing::probe_loss;

namespace {

Tensor<double> randn(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  return normal_tensor<double>(std::move(shape), 1.0, rng);
}

void set_identity(Linear<double>& l) {
  auto& w = l.weight.mutable_value();
  w.array().setZero();
  for (Index i = 0; i < l.d_out(); ++i) w[i * l.d_in() + i] = 1;
  if (l.bias.defined()) l.bias.mutable_value().array().setZero();
}

}  // namespace

TEST_CASE("causal mask") {
  CHECK(build_causal_mask(1) == std::vector<std::uint8_t>{1});
  const auto m3 = build_causal_mask(3);
  CHECK(std::vector<std::uint8_t>(m3.begin(), m3.begin() + 3) == std::vector<std::uint8_t>{1, 0, 0});
  CHECK(std::vector<std::uint8_t>(m3.begin() + 6, m3.end()) == std::vector<std::uint8_t>{1, 1, 1});
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const Index s = std::uniform_int_distribution<Index>(1, 40)(rng);
    const auto m = build_causal_mask(s);
    Index allowed = 0;
    for (auto v : m) allowed += v;
    CHECK(allowed == s * (s + 1) / 2);
  }
}

TEST_CASE("attention") {
  Rng rng(2);
  SUBCASE("width must divide into heads") {
    CHECK_THROWS_AS(MultiHeadAttention<double>("a", AttentionSpec{10, 4, true, true}, rng), ConfigError);
  }
  SUBCASE("single key returns the projected value row") {
    MultiHeadAttention<double> mha("a", AttentionSpec{8, 2, true, true}, rng);
    Var<double> memory(randn({1, 8}, 3));
    const auto expected = (*mha.o)(mha.v(memory)).value();
    for (std::uint64_t seed : {4, 5}) {
      auto out = mha.forward(Var<double>(randn({3, 8}, seed)), memory).value();
      for (Index r = 0; r < 3; ++r) {
        for (Index c = 0; c < 8; ++c) CHECK(out[r * 8 + c] == doctest::Approx(expected[c]).epsilon(1e-12));
      }
    }
  }
  SUBCASE("hand-evaluated single head") {
    MultiHeadAttention<double> mha("a", AttentionSpec{2, 1, true, false}, rng);
    set_identity(mha.q);
    set_identity(mha.k);
    set_identity(mha.v);
    Var<double> q(Tensor<double>({1, 2}, {1, 0}));
    Var<double> kv(Tensor<double>({2, 2}, {1, 0, 0, 1}));
    // scores = [1, 0] / sqrt(2); weights = softmax; output = weighted rows of kv.
    const double s = 1 / std::sqrt(2.0);
    const double w0 = std::exp(s) / (std::exp(s) + 1.0);
    auto out = mha.forward(q, kv).value();
    CHECK(out[0] == doctest::Approx(w0).epsilon(1e-12));
    CHECK(out[1] == doctest::Approx(1 - w0).epsilon(1e-12));
  }
  SUBCASE("causal masking ignores future tokens bit-for-bit") {
    MultiHeadAttention<double> mha("a", AttentionSpec{8, 2, false, true}, rng);
    auto x = randn({2, 6, 8}, 6);
    auto base = mha.causal_self(Var<double>(x)).value();
    for (Index t = 0; t < 6; ++t) {
      auto y = x;
      for (Index c = 0; c < 8; ++c) y[(1 * 6 + t) * 8 + c] += 3.0;
      auto out = mha.causal_self(Var<double>(y)).value();
      for (Index pos = 0; pos < t; ++pos) {
        for (Index c = 0; c < 8; ++c) CHECK(out[(6 + pos) * 8 + c] == base[(6 + pos) * 8 + c]);
      }
    }
  }
  SUBCASE("gradient") {
    MultiHeadAttention<double> mha("a", AttentionSpec{8, 2, true, true}, rng);
    auto q = Var<double>::parameter("q_in", randn({2, 3, 8}, 7));
    auto kv = Var<double>::parameter("kv_in", randn({2, 5, 8}, 8));
    ParamList<double> params{q, kv};
    mha.collect(params);
    auto r = grad_check([&] { return probe_loss(mha.forward(q, kv)); }, params);
    CHECK(r.max_relative_error < 1e-4);
  }
}

TEST_CASE("encoder layer") {
  Rng rng(10);
  TransformerEncoderLayer<double> layer("enc", 8, 2, 8, 0.1, rng);
  const ForwardContext eval;
  SUBCASE("eval mode is deterministic and shape preserving") {
    for (Index s : {1, 4, 9}) {
      Var<double> x(randn({s, 8}, 11));
      auto a = layer.forward(x, eval).value();
      CHECK(a.shape() == Shape{s, 8});
      CHECK(a == layer.forward(x, eval).value());
    }
  }
  SUBCASE("train mode applies dropout") {
    Rng drop(3);
    Var<double> x(randn({4, 8}, 12));
    CHECK_FALSE(layer.forward(x, ForwardContext{true, &drop}).value() == layer.forward(x, eval).value());
  }
  SUBCASE("zeroed output projections reduce to the normalizations") {
    for (auto* l : {&*layer.attn.o, &layer.ffn.fc2}) {
      l->weight.mutable_value().array().setZero();
      l->bias.mutable_value().array().setZero();
    }
    Var<double> x(randn({4, 8}, 13));
    auto expected = layer.ln2(layer.ln1(x)).value();
    auto got = layer.forward(x, eval).value();
    CHECK((got.array() - expected.array()).abs().maxCoeff() < 1e-12);
  }
  SUBCASE("permutation equivariance") {
    auto x = randn({5, 8}, 14);
    auto out = layer.forward(Var<double>(x), eval).value();
    const std::vector<Index> perm{3, 0, 4, 1, 2};
    auto px = index_select(Var<double>(x), 0, perm);
    auto pout = layer.forward(px, eval).value();
    for (Index i = 0; i < 5; ++i) {
      for (Index c = 0; c < 8; ++c) CHECK(pout[i * 8 + c] == doctest::Approx(out[perm[i] * 8 + c]).epsilon(1e-10));
    }
  }
  SUBCASE("gradient on a random 4-token input") {
    auto x = Var<double>::parameter("x", randn({4, 8}, 15));
    ParamList<double> params{x};
    layer.collect(params);
    auto r = grad_check([&] { return probe_loss(layer.forward(x, eval)); }, params);
    CHECK(r.max_relative_error < 1e-4);
  }
  SUBCASE("tail rows match the full forward") {
    Var<double> x(randn({2, 6, 8}, 16));
    auto full = layer.forward(x, eval).value();
    for (Index keep : {1, 3, 6}) {
      auto tail = layer.forward_tail(x, keep, eval).value();
      REQUIRE(tail.shape() == Shape{2, keep, 8});
      double err = 0;
      for (Index b = 0; b < 2; ++b) {
        for (Index i = 0; i < keep; ++i) {
          for (Index c = 0; c < 8; ++c) {
            err = std::max(err, std::abs(tail[(b * keep + i) * 8 + c] - full[(b * 6 + 6 - keep + i) * 8 + c]));
          }
        }
      }
      CHECK(err < 1e-12);
    }
    CHECK_THROWS_AS(layer.forward_tail(x, 0, eval), DimensionError);
    CHECK_THROWS_AS(layer.forward_tail(x, 7, eval), DimensionError);
    auto xp = Var<double>::parameter("x", randn({2, 5, 8}, 17));
    ParamList<double> params{xp};
    layer.collect(params);
    CHECK(grad_check([&] { return probe_loss(layer.forward_tail(xp, 2, eval)); }, params).max_relative_error < 1e-4);
  }
  SUBCASE("parameter count") {
    ParamList<double> params;
    layer.collect(params);
    CHECK(count_elements(params) == encoder_layer_params(8, 8));
    CHECK(encoder_layer_params(1024, 1024) == 4 * (1024 * 1024 + 1024) + 2 * 1024 * 1024 + 2 * 1024 + 4 * 1024);
  }
}

TEST_CASE("decoder layer") {
  Rng rng(20);
  CausalDecoderLayer<double> a("dec0", 8, 2, 32, rng);
  CausalDecoderLayer<double> b("dec1", 8, 2, 32, rng);
  auto stack = [&](const Var<double>& x) { return b.forward(a.forward(x)); };
  SUBCASE("stack is causal") {
    auto x = randn({1, 7, 8}, 21);
    auto base = stack(Var<double>(x)).value();
    for (Index t = 0; t < 7; ++t) {
      auto y = x;
      for (Index c = 0; c < 8; ++c) y[t * 8 + c] -= 1.5;
      auto out = stack(Var<double>(y)).value();
      for (Index i = 0; i < t * 8; ++i) CHECK(out[i] == base[i]);
    }
  }
  SUBCASE("gradient") {
    auto x = Var<double>::parameter("x", randn({2, 4, 8}, 22));
    ParamList<double> params{x};
    a.collect(params);
    auto r = grad_check([&] { return probe_loss(a.forward(x)); }, params);
    CHECK(r.max_relative_error < 1e-4);
  }
  SUBCASE("parameter count") {
    ParamList<double> params;
    a.collect(params);
    CHECK(count_elements(params) == decoder_layer_params(8, 32));
  }
}
