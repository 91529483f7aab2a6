#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "storydiff/csa.hpp"

using namespace storydiff;
using oracle::random_tensor;

namespace {

Tensor image_rows(const Tensor& flat, int image, int n) { return flat.rows_slice(image * n, n); }

}  // namespace

TEST_CASE("rate 0 reduces to per-image self-attention") {
  RngStream cases(11);
  for (int trial = 0; trial < 60; ++trial) {
    const int b = 1 + static_cast<int>(cases.below(6));
    const int n = 1 + static_cast<int>(cases.below(32));
    const int c = cases.below(2) ? 16 : 64;
    CsaConfig cfg;
    cfg.sampling_rate = 0.0f;
    cfg.tile_size = 1 + static_cast<int>(cases.below(static_cast<std::uint64_t>(b)));
    RngStream rng = cases.child(static_cast<std::uint64_t>(trial));
    const AttentionWeights w = AttentionWeights::init("a", c, 4, rng);
    const Tensor x = random_tensor({b * n, c}, rng);
    const Tensor out = consistent_self_attention(Var(x), b, n, w, cfg, rng).value();
    for (int i = 0; i < b; ++i) {
      const Tensor ref = self_attention(Var(image_rows(x, i, n)), w).value();
      REQUIRE(max_abs_diff(image_rows(out, i, n), ref) <= 1e-5f);
    }
  }
}

TEST_CASE("a tile covering the batch equals the single-window reference") {
  for (int trial = 0; trial < 30; ++trial) {
    RngStream rng(500 + trial);
    const int b = 1 + static_cast<int>(rng.below(6));
    const int n = 1 + static_cast<int>(rng.below(16));
    const int k = 1 + static_cast<int>(rng.below(20));
    CsaConfig cfg;
    cfg.sampling_rate = static_cast<float>(k) / 20.0f;
    cfg.tile_size = b + static_cast<int>(rng.below(3));
    const AttentionWeights w = AttentionWeights::init("a", 16, 2, rng);
    const Tensor x = random_tensor({b * n, 16}, rng);
    const std::uint64_t seed = rng.next();
    const Tensor out = consistent_self_attention(Var(x), b, n, w, cfg, RngStream(seed)).value();
    const Tensor ref = oracle::single_window_reference(x, b, n, w, k, oracle::SplitMix{seed}.child(0));
    INFO("b=" << b << " n=" << n << " k=" << k);
    CHECK(max_abs_diff(out, ref) <= 1e-6f);
  }
}

TEST_CASE("window coverage equals brute-force window enumeration") {
  for (int b = 1; b <= 12; ++b) {
    for (int w = 1; w <= b; ++w) {
      std::vector<int> brute(static_cast<std::size_t>(b), 0);
      for (int start = 0; start + w <= b; ++start) {
        for (int i = start; i < start + w; ++i) ++brute[static_cast<std::size_t>(i)];
      }
      REQUIRE(window_coverage(b, w) == brute);
    }
  }
  CHECK_THROWS_AS(window_coverage(3, 4), ContractError);
  CHECK_THROWS_AS(window_coverage(3, 0), ContractError);
}

TEST_CASE("overlapping windows average the per-window references by coverage") {
  for (int trial = 0; trial < 10; ++trial) {
    RngStream rng(600 + trial);
    const int b = 2 + static_cast<int>(rng.below(6));
    const int tile = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(b)));
    const int n = 1 + static_cast<int>(rng.below(6));
    const int c = 8;
    const AttentionWeights w = AttentionWeights::init("a", c, 2, rng);
    const Tensor x = random_tensor({b * n, c}, rng);
    CsaConfig cfg;
    cfg.tile_size = tile;
    cfg.sampling_rate = 0.5f;
    const std::uint64_t seed = rng.next();
    const Tensor out = consistent_self_attention(Var(x), b, n, w, cfg, RngStream(seed)).value();

    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(b * n, c);
    std::vector<int> hits(static_cast<std::size_t>(b), 0);
    for (int t = 0; t + tile <= b; ++t) {
      oracle::SplitMix window = oracle::SplitMix{seed}.child(static_cast<std::uint64_t>(t));
      const Tensor win = oracle::single_window_reference(x.rows_slice(t * n, tile * n), tile, n, w, 10, window);
      acc.middleRows(t * n, tile * n) += win.matrix().cast<double>();
      for (int i = t; i < t + tile; ++i) ++hits[static_cast<std::size_t>(i)];
    }
    CHECK(hits == window_coverage(b, tile));
    for (int i = 0; i < b; ++i) acc.middleRows(i * n, n) /= hits[static_cast<std::size_t>(i)];
    INFO("b=" << b << " tile=" << tile << " n=" << n);
    CHECK((acc - out.matrix().cast<double>()).cwiseAbs().maxCoeff() <= 1e-6);
  }
}

TEST_CASE("sample counts and draws") {
  CHECK(sample_count(100, 0.29f) == 29);
  CHECK(sample_count(10, 0.3f) == 3);
  CHECK(sample_count(64, 0.5f) == 32);
  CHECK(sample_count(7, 1.0f) == 7);
  CHECK(sample_count(7, 0.0f) == 0);
  CHECK(sample_count(0, 0.5f) == 0);

  RngStream rng(5);
  oracle::SplitMix ref{5};
  for (int trial = 0; trial < 50; ++trial) {
    const int pool = 1 + static_cast<int>(ref.below(40));
    rng.below(40);
    const int m = static_cast<int>(ref.below(static_cast<std::uint64_t>(pool + 1)));
    rng.below(static_cast<std::uint64_t>(pool + 1));
    const std::vector<int> got = sample_without_replacement(pool, m, rng);
    REQUIRE(got == oracle::fisher_yates(pool, m, ref));
    REQUIRE(std::set<int>(got.begin(), got.end()).size() == got.size());
  }
  CHECK_THROWS_AS(sample_without_replacement(3, 4, rng), ContractError);
}

TEST_CASE("rand_sample reports sources and paired tokens put samples first") {
  RngStream rng(6);
  const Tensor pool = random_tensor({12, 4}, rng);
  const SampledTokens s = rand_sample(pool, 0.5f, rng, 3);
  REQUIRE(s.count() == 6);
  for (int i = 0; i < s.count(); ++i) {
    const TokenRef r = s.source_indices[static_cast<std::size_t>(i)];
    CHECK(s.tokens.matrix().row(i) == pool.matrix().row(r.image * 3 + r.token));
  }
  const Tensor own = random_tensor({3, 4}, rng);
  const Tensor paired = build_paired_tokens(own, s);
  CHECK(paired.shape() == Shape{9, 4});
  CHECK(paired.rows_slice(6, 3) == own);
  CHECK(build_paired_tokens(own, rand_sample(pool, 0.0f, rng)) == own);
  CHECK_THROWS_AS(rand_sample(pool, 1.5f, rng), ContractError);
}

TEST_CASE("trace: windows, draw sizes and per-call paired-token bound") {
  RngStream rng(31);
  const int n = 4;
  const AttentionWeights w = AttentionWeights::init("a", 8, 2, rng);
  for (int b : {1, 3, 4, 9}) {
    CsaConfig cfg;
    cfg.tile_size = 4;
    cfg.sampling_rate = 0.5f;
    CsaTrace trace;
    const Tensor x = random_tensor({b * n, 8}, rng);
    consistent_self_attention(Var(x), b, n, w, cfg, rng, &trace);
    const int w_eff = std::min(4, b);
    CHECK(trace.windows == b - w_eff + 1);
    CHECK(trace.attention_calls == trace.windows);
    CHECK(trace.samples.size() == static_cast<std::size_t>(trace.windows));
    for (const auto& draw : trace.samples) CHECK(draw.size() == static_cast<std::size_t>(w_eff * n / 2));
    CHECK(trace.max_kv_length == n + w_eff * n / 2);
    CHECK(trace.max_window_tokens <= w_eff * n + w_eff * n / 2);
  }
}

TEST_CASE("excluding self draws only from the other images of the window") {
  RngStream rng(41);
  const int b = 4, n = 5;
  const AttentionWeights w = AttentionWeights::init("a", 8, 2, rng);
  const Tensor x = random_tensor({b * n, 8}, rng);
  CsaConfig cfg;
  cfg.include_self = false;
  cfg.tile_size = 4;
  CsaTrace trace;
  consistent_self_attention(Var(x), b, n, w, cfg, rng, &trace);
  REQUIRE(trace.samples.size() == 4);  // one draw per image
  for (int i = 0; i < b; ++i) {
    const auto& draw = trace.samples[static_cast<std::size_t>(i)];
    CHECK(draw.size() == static_cast<std::size_t>(sample_count(3 * n, 0.5f)));
    for (const TokenRef& r : draw) CHECK(r.image != i);
  }

  cfg.include_self = true;
  cfg.per_image_sampling = true;
  trace.reset();
  consistent_self_attention(Var(x), b, n, w, cfg, rng, &trace);
  REQUIRE(trace.samples.size() == 4);
  CHECK(trace.samples[0] != trace.samples[1]);
}

TEST_CASE("CSA is deterministic, mixes images and validates its inputs") {
  RngStream rng(51);
  const int b = 3, n = 6;
  const AttentionWeights w = AttentionWeights::init("a", 8, 2, rng);
  const Tensor x = random_tensor({b * n, 8}, rng);
  const CsaConfig cfg;
  const RngStream s(99);
  const Tensor a = consistent_self_attention(Var(x), b, n, w, cfg, s).value();
  CHECK(a == consistent_self_attention(Var(x), b, n, w, cfg, s).value());

  // changing image 2 changes image 0's output once image 2 tokens can be sampled
  Tensor y = x;
  for (int k = 0; k < n * 8; ++k) y[static_cast<std::size_t>(2 * n * 8 + k)] += 1.0f;
  const Tensor c = consistent_self_attention(Var(y), b, n, w, cfg, s).value();
  CHECK(max_abs_diff(image_rows(a, 0, n), image_rows(c, 0, n)) > 1e-4f);

  const TokenBatch tb(x.reshaped({b, n, 8}));
  CHECK(consistent_self_attention(tb, w, cfg, s).data().reshaped({b * n, 8}) == a);

  CsaConfig bad;
  bad.sampling_rate = -0.1f;
  CHECK_THROWS_AS(consistent_self_attention(Var(x), b, n, w, bad, s), ContractError);
  bad = CsaConfig{};
  bad.tile_size = 0;
  CHECK_THROWS_AS(consistent_self_attention(Var(x), b, n, w, bad, s), ContractError);
  CHECK_THROWS_AS(consistent_self_attention(Var(x), 4, n, w, cfg, s), DimensionError);
}
