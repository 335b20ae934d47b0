#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "retgen/model.hpp"

using namespace retgen;

namespace {

ModelConfig tiny_config(int d_model = 8, int n_layers = 2, int n_heads = 2) {
  ModelConfig cfg;
  cfg.vocab_size = 12;
  cfg.d_model = d_model;
  cfg.n_layers = n_layers;
  cfg.n_heads = n_heads;
  cfg.max_seq_len = 16;
  cfg.eos_token_id = 2;
  cfg.seed = 1234;
  return cfg;
}

}  // namespace

TEST_CASE("build_session_mask") {
  SECTION("T=0 equals the causal mask") {
    for (int m : {1, 3, 7}) CHECK(build_session_mask(m, 0) == causal_mask(m));
  }

  SECTION("m=1, T=1 second row allows both positions") {
    AttentionMask m = build_session_mask(1, 1);
    CHECK(m.allow(1, 0));
    CHECK(m.allow(1, 1));
  }

  SECTION("m=2, T=2 enumerated rows") {
    AttentionMask m = build_session_mask(2, 2);
    const bool expect[4][4] = {{1, 0, 0, 0}, {1, 1, 0, 0}, {0, 1, 1, 0}, {0, 1, 1, 1}};
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) CHECK(m.allow(i, j) == expect[i][j]);
    m.validate();
  }

  SECTION("m=0 rejected") { CHECK_THROWS_AS(build_session_mask(0, 2), ArgumentError); }
}

TEST_CASE("model config invariants") {
  ModelConfig cfg = tiny_config();
  cfg.d_model = 9;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.eos_token_id = 99;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.max_seq_len = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("sequence_embedding contract") {
  ModelState state = ModelState::init(tiny_config());

  SECTION("deterministic with d_model length") {
    Tensor a = sequence_embedding(state, {3, 1, 4});
    Tensor b = sequence_embedding(state, {3, 1, 4});
    CHECK(a.values == b.values);
    CHECK(a.cols() == state.config.d_model);
  }

  SECTION("changes when the last token changes") {
    Tensor a = sequence_embedding(state, {3, 1, 4});
    Tensor b = sequence_embedding(state, {3, 1, 5});
    double diff = 0;
    for (size_t i = 0; i < a.values.size(); ++i) diff += std::abs(a.values[i] - b.values[i]);
    CHECK(diff > 0.0);
  }

  SECTION("matches the straight-line oracle") {
    Tensor got = sequence_embedding(state, {3, 1, 4});
    std::vector<double> want = oracle::embedding(state, {3, 1, 4});
    REQUIRE(got.values.size() == want.size());
    for (size_t i = 0; i < want.size(); ++i)
      CHECK(got.values[i] == Catch::Approx(want[i]).margin(1e-10));
  }

  SECTION("token id and length validation") {
    CHECK_THROWS_AS(sequence_embedding(state, {3, 99}), IndexError);
    std::vector<int> long_seq(state.config.max_seq_len, 1);
    CHECK_THROWS_AS(sequence_embedding(state, long_seq), TruncationError);
  }
}

TEST_CASE("next_token_logits contract") {
  ModelState state = ModelState::init(tiny_config());
  std::vector<int> tokens = {3, 1, 4, 1, 5};
  const int t = static_cast<int>(tokens.size());

  SECTION("causal mask equals session mask with T=0") {
    Tensor a = next_token_logits(state, tokens, causal_mask(t));
    Tensor b = next_token_logits(state, tokens, build_session_mask(t, 0));
    CHECK(a.values == b.values);
  }

  SECTION("matches the straight-line oracle under a session mask") {
    AttentionMask m = build_session_mask(3, 2);
    Tensor got = next_token_logits(state, tokens, m);
    auto want = oracle::forward_logits(state, tokens, m);
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < state.config.vocab_size; ++j)
        CHECK(got.at(i, j) == Catch::Approx(want[i][j]).margin(1e-10));
  }

  SECTION("mask size mismatch") {
    CHECK_THROWS_AS(next_token_logits(state, tokens, causal_mask(t + 1)), DimensionError);
  }

  SECTION("attention weights are exactly zero at disallowed pairs in every layer") {
    AttentionMask m = build_session_mask(3, 2);
    AttentionProbe probe;
    next_token_logits(state, tokens, m, &probe);
    REQUIRE(probe.weights.size() ==
            static_cast<size_t>(state.config.n_layers * state.config.n_heads));
    for (const Tensor& w : probe.weights)
      for (int i = 0; i < t; ++i)
        for (int j = 0; j < t; ++j)
          if (!m.allow(i, j)) CHECK(w.at(i, j) == 0.0);
  }
}

TEST_CASE("end-to-end model gradient vs finite differences") {
  ModelConfig cfg = tiny_config(4, 1, 1);
  cfg.vocab_size = 9;
  ModelState state = ModelState::init(cfg);
  std::vector<int> tokens = {3, 1, 4};
  AttentionMask mask = causal_mask(3);

  // Analytic gradients for every parameter.
  Tape tape;
  ModelVars vars = ModelVars::bind(tape, state);
  tape.backward(tape.sum_all(next_token_logits_var(tape, vars, cfg, tokens, mask)));

  auto eval = [&]() {
    Tape t2;
    ModelVars v2 = ModelVars::bind(t2, state);
    return t2.value(t2.sum_all(next_token_logits_var(t2, v2, cfg, tokens, mask))).item();
  };

  const double h = 1e-5;
  double worst = 0;
  size_t param_index = 0;
  state.for_each_param([&](const std::string&, Tensor& p) {
    const Tensor& analytic = tape.grad(vars.flat[param_index++]);
    for (size_t e = 0; e < p.values.size(); ++e) {
      const double keep = p.values[e];
      p.values[e] = keep + h;
      const double fp = eval();
      p.values[e] = keep - h;
      const double fm = eval();
      p.values[e] = keep;
      worst = std::max(worst, oracle::rel_err(analytic.values[e], (fp - fm) / (2 * h)));
    }
  });
  CHECK(worst < 1e-4);
}

TEST_CASE("checkpoint round-trip") {
  ModelState state = ModelState::init(tiny_config());
  auto dir = std::filesystem::temp_directory_path() / "retgen_model_test";
  std::filesystem::create_directories(dir);
  auto path = dir / "model.ckpt";
  state.save(path);

  SECTION("bit-exact parameters and outputs") {
    ModelState loaded = ModelState::load(path);
    CHECK(loaded.config == state.config);
    CHECK(loaded.fingerprint() == state.fingerprint());
    Tensor a = sequence_embedding(state, {3, 1, 4});
    Tensor b = sequence_embedding(loaded, {3, 1, 4});
    CHECK(a.values == b.values);
  }

  SECTION("parameter change alters the fingerprint") {
    ModelState other = state;
    other.layers[0].wq.at(0, 0) += 1e-9;
    CHECK(other.fingerprint() != state.fingerprint());
  }

  SECTION("truncated file rejected") {
    auto trunc = dir / "trunc.ckpt";
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out(trunc, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    out.close();
    CHECK_THROWS_AS(ModelState::load(trunc), ParseError);
  }
}
