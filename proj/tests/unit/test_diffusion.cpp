#include "doctest.h"
#include "oracles.hpp"
#include "storydiff/diffusion.hpp"

using namespace storydiff;
using oracle::random_tensor;

namespace {

DenoiserConfig tiny_config() {
  DenoiserConfig c;
  c.width = 16;
  c.heads = 2;
  c.blocks = 2;
  return c;
}

std::vector<std::vector<int>> story_prompts(int b) {
  std::vector<std::vector<int>> prompts;
  for (int i = 0; i < b; ++i) prompts.push_back(prompt_tokens({CharacterIdentity::from_index(5), i % 8, 0}));
  return prompts;
}

}  // namespace

TEST_CASE("linear schedule invariants") {
  const DiffusionSchedule s = DiffusionSchedule::linear();
  REQUIRE(s.steps == 1000);
  CHECK(s.betas[0] == doctest::Approx(1e-4));
  CHECK(s.betas[999] == doctest::Approx(0.02));
  for (int t = 0; t < s.steps; ++t) {
    REQUIRE(s.betas[t] > 0.0);
    REQUIRE(s.betas[t] < 1.0);
    if (t > 0) REQUIRE(s.alpha_bars[t] < s.alpha_bars[t - 1]);
  }
  CHECK(s.alpha_bars[0] == doctest::Approx(1.0 - 1e-4));
  // product form against an independent recurrence
  double prod = 1.0;
  for (int t = 0; t < s.steps; ++t) prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * t / 999.0);
  CHECK(s.alpha_bars[999] == doctest::Approx(prod).epsilon(1e-9));
  CHECK(s.alpha_bars_tensor().shape() == Shape{1000});
}

TEST_CASE("DDIM timesteps are evenly spaced and include both ends") {
  const DiffusionSchedule s = DiffusionSchedule::linear();
  const std::vector<int> ts = s.ddim_timesteps(50);
  REQUIRE(ts.size() == 50);
  CHECK(ts.front() == 999);
  CHECK(ts.back() == 0);
  for (std::size_t i = 1; i < ts.size(); ++i) {
    REQUIRE(ts[i] < ts[i - 1]);
    REQUIRE(std::abs((ts[i - 1] - ts[i]) - 999.0 / 49.0) < 1.0);
  }
  CHECK(s.ddim_timesteps(1000).back() == 0);
  CHECK(s.ddim_timesteps(1) == std::vector<int>{999});
  CHECK_THROWS_AS(s.ddim_timesteps(1001), ContractError);
  CHECK_THROWS_AS(s.ddim_timesteps(0), ContractError);
}

TEST_CASE("forward diffusion") {
  const DiffusionSchedule s = DiffusionSchedule::linear();
  RngStream rng(1);
  const Tensor x0 = random_tensor({16, 16, 3}, rng);
  const Tensor zero(x0.shape());
  const Tensor xt = forward_diffuse(x0, 300, zero, s);
  for (std::size_t i = 0; i < x0.size(); ++i) REQUIRE(xt[i] == static_cast<float>(std::sqrt(s.alpha_bars[300]) * x0[i]));
  CHECK_THROWS_AS(forward_diffuse(x0, 1000, zero, s), ContractError);
  CHECK_THROWS_AS(forward_diffuse(x0, -1, zero, s), ContractError);

  // Monte-Carlo: Var(x_t - sqrt(abar) x0) = 1 - abar
  const int t = 500;
  const Tensor one({1}, 0.7f);
  double sum = 0, sq = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const Tensor eps({1}, rng.normal());
    const double r = forward_diffuse(one, t, eps, s)[0] - std::sqrt(s.alpha_bars[t]) * 0.7;
    sum += r;
    sq += r * r;
  }
  const double var = sq / n - (sum / n) * (sum / n);
  CHECK(std::abs(var / (1.0 - s.alpha_bars[t]) - 1.0) < 0.05);
}

TEST_CASE("classifier-free guidance identities") {
  RngStream rng(2);
  const Tensor u = random_tensor({4, 5}, rng), c = random_tensor({4, 5}, rng);
  CHECK(cfg_epsilon(u, c, 0.0f) == u);
  CHECK(cfg_epsilon(u, c, 1.0f) == c);
  CHECK(cfg_epsilon(Tensor({1}, 0.0f), Tensor({1}, 1.0f), 5.0f)[0] == 5.0f);
  CHECK_THROWS_AS(cfg_epsilon(u, Tensor({5, 4}), 2.0f), DimensionError);
}

TEST_CASE("patchify round-trips and groups 4x4 blocks") {
  RngStream rng(3);
  const Tensor imgs = random_tensor({2, 16, 16, 3}, rng);
  const Tensor p = patchify(imgs);
  CHECK(p.shape() == Shape{32, 48});
  CHECK(unpatchify(p, 2) == imgs);
  // patch 5 of image 1 is grid cell (1, 1); its first element is pixel (4, 4)
  CHECK(p.at({16 + 5, 0}) == imgs.at({1, 4, 4, 0}));
  CHECK(p.at({16 + 5, 47}) == imgs.at({1, 7, 7, 2}));
  CHECK_THROWS_AS(patchify(Tensor({2, 8, 8, 3})), DimensionError);
}

TEST_CASE("denoiser shapes, size budget and conditioning") {
  RngStream rng(4);
  DenoiserParams p = DenoiserParams::init(DenoiserConfig{}, rng);
  CHECK(p.parameter_count() < 1000000);
  CHECK(p.null_token() == Vocabulary::size());
  const Tensor x = random_tensor({3 * 16, 48}, rng);
  const std::vector<int> ts{10, 500, 999};
  const CrossContext ctx = prompt_context(p, story_prompts(3));
  const Var out = predict_noise(p, x, ts, ctx);
  CHECK(out.shape() == Shape{48, 48});
  CHECK(out.value().all_finite());

  // an image's prediction depends only on its own tokens, timestep and prompt
  const Var first = predict_noise(p, x.rows_slice(0, 16), std::vector<int>{10}, prompt_context(p, story_prompts(1)));
  CHECK(max_abs_diff(first.value(), out.value().rows_slice(0, 16)) < 1e-5f);

  const CrossContext null = prompt_context(p, {{}});
  CHECK(null.lengths == std::vector<int>{1});
  CHECK_THROWS_AS(prompt_context(p, {{99}}), ContractError);
  CHECK_THROWS_AS(predict_noise(p, x, std::vector<int>{1, 2}, ctx), DimensionError);
}

TEST_CASE("zero denoiser: 50-step DDIM is the closed-form rescaling of the initial noise") {
  RngStream rng(5);
  DenoiserParams p = DenoiserParams::init(tiny_config(), rng);
  p.head.weight.var.mutable_value().fill(0.0f);
  p.head.bias.var.mutable_value().fill(0.0f);
  const DiffusionSchedule s = DiffusionSchedule::linear();
  SamplerOptions opt;
  opt.steps = 50;
  const RngStream seed(6);
  const Tensor out = ddim_sample(p, s, story_prompts(2), opt, seed);
  const Tensor xt = initial_noise(2, seed);
  const std::vector<int> ts = s.ddim_timesteps(50);
  const double factor = std::sqrt(s.alpha_bars[ts.back()] / s.alpha_bars[ts.front()]);
  // outputs reach a few hundred, so the tolerance is relative to float32 resolution there
  double worst = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double ref = factor * xt[i];
    worst = std::max(worst, std::abs(out[i] - ref) / std::max(1.0, std::abs(ref)));
  }
  CHECK(worst <= 1e-5);
}

TEST_CASE("DDIM loop with a constant epsilon follows the deterministic update") {
  const DiffusionSchedule s = DiffusionSchedule::linear();
  const Tensor x({1}, 0.3f);
  int calls = 0;
  const Tensor out = ddim_loop(s, x, 3, [&](const Tensor& xt, int, int) {
    ++calls;
    return Tensor(xt.shape(), 0.25f);
  });
  CHECK(calls == 2);
  double v = 0.3;
  const std::vector<int> ts = s.ddim_timesteps(3);
  for (int i = 0; i < 2; ++i) {
    const double a = s.alpha_bars[ts[i]], ap = s.alpha_bars[ts[i + 1]];
    const double x0 = (v - std::sqrt(1 - a) * 0.25) / std::sqrt(a);
    v = std::sqrt(ap) * x0 + std::sqrt(1 - ap) * 0.25;
  }
  CHECK(out[0] == doctest::Approx(v).epsilon(1e-6));
}

TEST_CASE("sampler: determinism, CSA degeneracy and contract errors") {
  RngStream rng(7);
  const DenoiserParams p = DenoiserParams::init(tiny_config(), rng);
  const DiffusionSchedule s = DiffusionSchedule::linear();
  const auto prompts = story_prompts(3);
  SamplerOptions vanilla;
  vanilla.steps = 8;
  const RngStream seed(8);
  const Tensor a = ddim_sample(p, s, prompts, vanilla, seed);
  CHECK(a.shape() == Shape{3, 16, 16, 3});
  CHECK(a == ddim_sample(p, s, prompts, vanilla, seed));
  CHECK_FALSE(a == ddim_sample(p, s, prompts, vanilla, RngStream(9)));

  SamplerOptions zero_rate = vanilla;
  zero_rate.csa = CsaConfig{};
  zero_rate.csa->sampling_rate = 0.0f;
  CHECK(max_abs_diff(ddim_sample(p, s, prompts, zero_rate, seed), a) <= 1e-5f);

  SamplerOptions csa = vanilla;
  csa.csa = CsaConfig{};
  CsaTrace trace;
  csa.trace = &trace;
  const Tensor c = ddim_sample(p, s, prompts, csa, seed);
  CHECK(max_abs_diff(c, a) > 1e-4f);
  // 7 denoising steps x 2 guidance passes x 2 layers, one window each
  CHECK(trace.windows == 7 * 2 * 2);

  SamplerOptions cond_only = csa;
  cond_only.csa_on_uncond = false;
  trace.reset();
  ddim_sample(p, s, prompts, cond_only, seed);
  CHECK(trace.windows == 7 * 2);

  SamplerOptions too_many = vanilla;
  too_many.steps = 1001;
  CHECK_THROWS_AS(ddim_sample(p, s, prompts, too_many, seed), ContractError);
  CHECK_THROWS_AS(ddim_sample(p, s, {}, vanilla, seed), ContractError);
}

TEST_CASE("training: finite loss, determinism and overfitting one image") {
  const DiffusionSchedule s = DiffusionSchedule::linear();
  RngStream data_rng(10);
  const std::vector<ImageExample> one = make_image_dataset(1, data_rng);

  const auto run = [&](int steps) {
    RngStream init(11);
    DenoiserParams p = DenoiserParams::init(tiny_config(), init);
    Adam adam({1e-3f});
    RngStream rng(12);
    std::vector<float> losses;
    const std::vector<ImageExample> batch(8, one[0]);
    for (int i = 0; i < steps; ++i) losses.push_back(train_step(p, adam, s, batch, rng));
    return losses;
  };
  const std::vector<float> losses = run(200);
  CHECK(std::isfinite(losses[0]));
  CHECK(losses[0] > 0.0f);
  CHECK(run(5) == std::vector<float>(losses.begin(), losses.begin() + 5));

  std::vector<double> windows;
  for (int w = 0; w < 10; ++w) {
    double m = 0;
    for (int i = 0; i < 20; ++i) m += losses[static_cast<std::size_t>(w * 20 + i)];
    windows.push_back(m / 20);
  }
  INFO("first window " << windows.front() << " last window " << windows.back());
  for (std::size_t w = 1; w < windows.size(); ++w) CHECK(windows[w] < windows[w - 1]);
}
