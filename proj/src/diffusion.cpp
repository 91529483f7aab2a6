#include "storydiff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace storydiff {

namespace {

constexpr std::uint64_t kNoiseTag = 0x6e6f697365ull;  // "noise"
constexpr std::uint64_t kCsaTag = 0x637361ull;        // "csa"

/// [B, C] sinusoidal features of the timesteps.
Tensor timestep_features(std::span<const int> timesteps, int width) {
  const int half = width / 2;
  Tensor out({static_cast<int>(timesteps.size()), width});
  for (std::size_t b = 0; b < timesteps.size(); ++b) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      const double arg = timesteps[b] * freq;
      out[b * static_cast<std::size_t>(width) + static_cast<std::size_t>(i)] = static_cast<float>(std::sin(arg));
      out[b * static_cast<std::size_t>(width) + static_cast<std::size_t>(half + i)] = static_cast<float>(std::cos(arg));
    }
  }
  return out;
}

std::vector<int> repeat_each(int groups, int times) {
  std::vector<int> rows(static_cast<std::size_t>(groups * times));
  for (int g = 0; g < groups; ++g) {
    std::fill_n(rows.begin() + static_cast<std::ptrdiff_t>(g) * times, times, g);
  }
  return rows;
}

std::vector<int> tile_range(int n, int times) {
  std::vector<int> rows(static_cast<std::size_t>(n * times));
  for (int i = 0; i < n * times; ++i) rows[static_cast<std::size_t>(i)] = i % n;
  return rows;
}

}  // namespace

DiffusionSchedule DiffusionSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 2) throw ContractError("schedule needs at least 2 steps");
  DiffusionSchedule s;
  s.steps = steps;
  s.betas = Eigen::VectorXd::LinSpaced(steps, beta_start, beta_end);
  s.alphas = (1.0 - s.betas.array()).matrix();
  s.alpha_bars.resize(steps);
  double prod = 1.0;
  for (int t = 0; t < steps; ++t) {
    prod *= s.alphas[t];
    s.alpha_bars[t] = prod;
  }
  return s;
}

Tensor DiffusionSchedule::betas_tensor() const {
  Tensor t({steps});
  for (int i = 0; i < steps; ++i) t[static_cast<std::size_t>(i)] = static_cast<float>(betas[i]);
  return t;
}

Tensor DiffusionSchedule::alpha_bars_tensor() const {
  Tensor t({steps});
  for (int i = 0; i < steps; ++i) t[static_cast<std::size_t>(i)] = static_cast<float>(alpha_bars[i]);
  return t;
}

std::vector<int> DiffusionSchedule::ddim_timesteps(int count) const {
  if (count < 1 || count > steps) {
    throw ContractError("DDIM step count " + std::to_string(count) + " outside [1, " + std::to_string(steps) + "]");
  }
  if (count == 1) return {steps - 1};
  std::vector<int> ts(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    ts[static_cast<std::size_t>(i)] =
        static_cast<int>(std::lround(static_cast<double>(steps - 1) * (count - 1 - i) / (count - 1)));
  }
  return ts;
}

Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& noise, const DiffusionSchedule& sched) {
  if (t < 0 || t >= sched.steps) throw ContractError("timestep " + std::to_string(t) + " out of range");
  require_same_shape(x0, noise, "forward_diffuse");
  const double a = std::sqrt(sched.alpha_bars[t]);
  const double b = std::sqrt(1.0 - sched.alpha_bars[t]);
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(a * x0[i] + b * noise[i]);
  return out;
}

Tensor cfg_epsilon(const Tensor& eps_uncond, const Tensor& eps_cond, float s) {
  require_same_shape(eps_uncond, eps_cond, "cfg_epsilon");
  Tensor out(eps_uncond.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = eps_uncond[i];
    out[i] = static_cast<float>(u + static_cast<double>(s) * (static_cast<double>(eps_cond[i]) - u));
  }
  return out;
}

Tensor patchify(const Tensor& images, int patch) {
  const int batch = images.rank() == 3 ? 1 : images.dim(0);
  if (images.size() != static_cast<std::size_t>(batch) * kImageSize * kImageSize * kImageChannels) {
    throw DimensionError("patchify: expected [B, 16, 16, 3], got " + shape_string(images.shape()));
  }
  const int grid = kImageSize / patch;
  const int dim = patch * patch * kImageChannels;
  Tensor out({batch * grid * grid, dim});
  for (int b = 0; b < batch; ++b) {
    for (int gy = 0; gy < grid; ++gy) {
      for (int gx = 0; gx < grid; ++gx) {
        const std::size_t row = static_cast<std::size_t>((b * grid + gy) * grid + gx);
        std::size_t k = 0;
        for (int py = 0; py < patch; ++py) {
          for (int px = 0; px < patch; ++px) {
            const std::size_t src =
                ((static_cast<std::size_t>(b) * kImageSize + gy * patch + py) * kImageSize + gx * patch + px) * 3;
            for (int ch = 0; ch < 3; ++ch, ++k) out[row * static_cast<std::size_t>(dim) + k] = images[src + static_cast<std::size_t>(ch)];
          }
        }
      }
    }
  }
  return out;
}

Tensor unpatchify(const Tensor& patches, int batch, int patch) {
  const int grid = kImageSize / patch;
  const int dim = patch * patch * kImageChannels;
  if (patches.rows() != batch * grid * grid || patches.cols() != dim) {
    throw DimensionError("unpatchify: unexpected patch shape " + shape_string(patches.shape()));
  }
  Tensor out({batch, kImageSize, kImageSize, kImageChannels});
  for (int b = 0; b < batch; ++b) {
    for (int gy = 0; gy < grid; ++gy) {
      for (int gx = 0; gx < grid; ++gx) {
        const std::size_t row = static_cast<std::size_t>((b * grid + gy) * grid + gx);
        std::size_t k = 0;
        for (int py = 0; py < patch; ++py) {
          for (int px = 0; px < patch; ++px) {
            const std::size_t dst =
                ((static_cast<std::size_t>(b) * kImageSize + gy * patch + py) * kImageSize + gx * patch + px) * 3;
            for (int ch = 0; ch < 3; ++ch, ++k) out[dst + static_cast<std::size_t>(ch)] = patches[row * static_cast<std::size_t>(dim) + k];
          }
        }
      }
    }
  }
  return out;
}

DenoiserParams DenoiserParams::init(const DenoiserConfig& config, RngStream& rng) {
  if (kImageSize % config.patch != 0) throw ContractError("patch size must divide the image size");
  DenoiserParams p;
  p.config = config;
  const int c = config.width;
  const float s = 1.0f / std::sqrt(static_cast<float>(c));
  p.patch_embed = AffineParams::init("patch_embed", config.patch_dim(), c,
                                     1.0f / std::sqrt(static_cast<float>(config.patch_dim())), rng);
  p.position_embed = init_normal("position_embed", {config.tokens_per_image(), c}, 0.5f, rng);
  p.time_in = AffineParams::init("time_in", c, c, s, rng);
  p.time_out = AffineParams::init("time_out", c, c, s, rng);
  p.token_embed = init_normal("token_embed", {Vocabulary::size() + 1, c}, 1.0f, rng);
  for (int i = 0; i < config.blocks; ++i) {
    p.blocks.push_back(TransformerBlockParams::init("block" + std::to_string(i), c, config.heads, true, rng));
  }
  if (config.temporal) {
    p.temporal = TransformerBlockParams::init("temporal", c, config.heads, false, rng);
    p.frame_embed = init_normal("frame_embed", {config.max_frames, c}, 0.5f, rng);
  }
  p.head = AffineParams::init("head", c, config.patch_dim(), 0.1f * s, rng);
  return p;
}

ParameterRefs DenoiserParams::parameters() {
  ParameterRefs out;
  patch_embed.collect(out);
  out.push_back(&position_embed);
  time_in.collect(out);
  time_out.collect(out);
  out.push_back(&token_embed);
  for (auto& b : blocks) b.collect(out);
  if (temporal) {
    temporal->collect(out);
    out.push_back(&frame_embed);
  }
  head.collect(out);
  return out;
}

std::size_t DenoiserParams::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : const_cast<DenoiserParams*>(this)->parameters()) n += p->value().size();
  return n;
}

bool CsaHook::applies_to(int layer) const {
  return layers.empty() || std::find(layers.begin(), layers.end(), layer) != layers.end();
}

CrossContext prompt_context(const DenoiserParams& params, const std::vector<std::vector<int>>& prompts) {
  std::vector<int> rows;
  std::vector<int> lengths;
  for (const auto& prompt : prompts) {
    if (prompt.empty()) {
      rows.push_back(params.null_token());
      lengths.push_back(1);
      continue;
    }
    for (int t : prompt) {
      if (t < 0 || t >= params.null_token()) throw ContractError("prompt token " + std::to_string(t) + " outside vocabulary");
      rows.push_back(t);
    }
    lengths.push_back(static_cast<int>(prompt.size()));
  }
  return {gather_rows(params.token_embed.var, std::move(rows)), std::move(lengths)};
}

Var predict_noise(const DenoiserParams& params, const Tensor& noisy_patches, std::span<const int> timesteps,
                  const CrossContext& context, const DenoiseOptions& options) {
  const int n = params.config.tokens_per_image();
  const int batch = static_cast<int>(timesteps.size());
  if (noisy_patches.rows() != batch * n || noisy_patches.cols() != params.config.patch_dim()) {
    throw DimensionError("predict_noise: patches " + shape_string(noisy_patches.shape()) + " do not match " +
                         std::to_string(batch) + " images");
  }
  if (context.lengths.size() != static_cast<std::size_t>(batch)) {
    throw DimensionError("predict_noise: context has " + std::to_string(context.lengths.size()) + " segments for " +
                         std::to_string(batch) + " images");
  }

  const Var time = params.time_out(silu(params.time_in(Var(timestep_features(timesteps, params.config.width)))));
  Var x = params.patch_embed(Var(noisy_patches));
  x = add(x, gather_rows(params.position_embed.var, tile_range(n, batch)));
  x = add(x, gather_rows(time, repeat_each(batch, n)));

  const std::vector<int> segments(static_cast<std::size_t>(batch), n);
  for (std::size_t l = 0; l < params.blocks.size(); ++l) {
    SelfAttentionFn attn;
    if (options.csa != nullptr && options.csa->applies_to(static_cast<int>(l))) {
      const CsaHook* hook = options.csa;
      const RngStream layer_rng = hook->rng.child(l);
      attn = [hook, layer_rng, batch, n](const Var& normed, const AttentionWeights& w) {
        return consistent_self_attention(normed, batch, n, w, hook->config, layer_rng, hook->trace);
      };
    }
    x = transformer_block(x, params.blocks[l], segments, &context, attn);
  }

  if (params.temporal && options.frames_per_clip > 0) {
    const int frames = options.frames_per_clip;
    if (batch % frames != 0 || frames > params.config.max_frames) {
      throw DimensionError("predict_noise: batch of " + std::to_string(batch) + " is not whole clips of " +
                           std::to_string(frames) + " frames");
    }
    const int clips = batch / frames;
    // (clip, frame, token) -> (clip, token, frame)
    std::vector<int> to_temporal, frame_of_row, back(static_cast<std::size_t>(batch * n));
    for (int c = 0; c < clips; ++c) {
      for (int k = 0; k < n; ++k) {
        for (int f = 0; f < frames; ++f) {
          back[static_cast<std::size_t>((c * frames + f) * n + k)] = static_cast<int>(to_temporal.size());
          to_temporal.push_back((c * frames + f) * n + k);
          frame_of_row.push_back(f);
        }
      }
    }
    Var seq = gather_rows(x, std::move(to_temporal));
    seq = add(seq, gather_rows(params.frame_embed.var, std::move(frame_of_row)));
    const std::vector<int> tsegs(static_cast<std::size_t>(clips * n), frames);
    seq = transformer_block(seq, *params.temporal, tsegs);
    x = gather_rows(seq, std::move(back));
  }

  // no final norm: it would discard the per-token scale that epsilon tracks
  return params.head(x);
}

Tensor ddim_loop(const DiffusionSchedule& sched, Tensor x, int steps, const EpsilonFn& eps, bool clip_x0) {
  const std::vector<int> ts = sched.ddim_timesteps(steps);
  std::vector<double> state(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
    const int t = ts[i];
    const int tp = ts[i + 1];
    for (std::size_t j = 0; j < state.size(); ++j) x[j] = static_cast<float>(state[j]);
    const Tensor e = eps(x, t, static_cast<int>(i));
    require_same_shape(x, e, "ddim_loop");
    const double sa = std::sqrt(sched.alpha_bars[t]), sb = std::sqrt(1.0 - sched.alpha_bars[t]);
    const double pa = std::sqrt(sched.alpha_bars[tp]), pb = std::sqrt(1.0 - sched.alpha_bars[tp]);
    for (std::size_t j = 0; j < state.size(); ++j) {
      double x0 = (state[j] - sb * e[j]) / sa;
      double ej = e[j];
      if (clip_x0 && std::abs(x0) > 1.0) {
        // keep the trajectory consistent with the clipped estimate
        x0 = std::clamp(x0, -1.0, 1.0);
        ej = (state[j] - sa * x0) / sb;
      }
      state[j] = pa * x0 + pb * ej;
    }
  }
  for (std::size_t j = 0; j < state.size(); ++j) x[j] = static_cast<float>(state[j]);
  return x;
}

Tensor initial_noise(int batch, const RngStream& rng) {
  RngStream noise = rng.child(kNoiseTag);
  Tensor x({batch, kImageSize, kImageSize, kImageChannels});
  for (float& v : x.data()) v = noise.normal();
  return x;
}

Tensor ddim_sample(const DenoiserParams& params, const DiffusionSchedule& sched,
                   const std::vector<std::vector<int>>& prompts, const SamplerOptions& options, const RngStream& rng) {
  if (prompts.empty()) throw ContractError("ddim_sample: no prompts");
  if (options.steps > sched.steps) throw ContractError("ddim_sample: more sampling steps than schedule steps");
  if (options.csa) options.csa->validate();
  NoGradGuard no_grad;
  const int batch = static_cast<int>(prompts.size());
  const CrossContext cond = prompt_context(params, prompts);
  const CrossContext uncond = prompt_context(params, std::vector<std::vector<int>>(prompts.size()));
  const RngStream csa_rng = rng.child(kCsaTag);

  const EpsilonFn eps = [&](const Tensor& x, int t, int step) {
    const Tensor patches = patchify(x, params.config.patch);
    const std::vector<int> ts(static_cast<std::size_t>(batch), t);
    std::optional<CsaHook> hook;
    if (options.csa) hook = CsaHook{*options.csa, csa_rng.child(static_cast<std::uint64_t>(step)), options.csa_layers, options.trace};
    const auto run = [&](const CrossContext& ctx, bool with_csa) {
      DenoiseOptions o;
      o.csa = with_csa && hook ? &*hook : nullptr;
      return predict_noise(params, patches, ts, ctx, o).value();
    };
    Tensor e;
    if (options.guidance == 1.0f) {
      e = run(cond, true);
    } else if (options.guidance == 0.0f) {
      e = run(uncond, options.csa_on_uncond);
    } else {
      e = cfg_epsilon(run(uncond, options.csa_on_uncond), run(cond, true), options.guidance);
    }
    return unpatchify(e, batch, params.config.patch);
  };
  return ddim_loop(sched, initial_noise(batch, rng), options.steps, eps, options.clip_x0);
}

float train_step(DenoiserParams& params, Adam& optimizer, const DiffusionSchedule& sched,
                 std::span<const ImageExample> batch, RngStream& rng, const TrainOptions& options) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  const int b = static_cast<int>(batch.size());
  std::vector<int> ts;
  std::vector<std::vector<int>> prompts;
  Tensor noisy({b, kImageSize, kImageSize, kImageChannels});
  Tensor noise({b, kImageSize, kImageSize, kImageChannels});
  const std::size_t per = static_cast<std::size_t>(kImageSize) * kImageSize * kImageChannels;
  for (int i = 0; i < b; ++i) {
    const auto& ex = batch[static_cast<std::size_t>(i)];
    const int t = static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps)));
    Tensor eps({kImageSize, kImageSize, kImageChannels});
    for (float& v : eps.data()) v = rng.normal();
    const Tensor xt = forward_diffuse(ex.image, t, eps, sched);
    std::copy(xt.data().begin(), xt.data().end(), noisy.data().begin() + static_cast<std::ptrdiff_t>(i * per));
    std::copy(eps.data().begin(), eps.data().end(), noise.data().begin() + static_cast<std::ptrdiff_t>(i * per));
    ts.push_back(t);
    prompts.push_back(rng.bernoulli(options.cond_dropout) ? std::vector<int>{} : ex.prompt);
  }
  const Var pred = predict_noise(params, patchify(noisy, params.config.patch), ts, prompt_context(params, prompts));
  const Var loss = mse_loss(pred, patchify(noise, params.config.patch));
  backward(loss);
  optimizer.step(params.parameters());
  return loss.value()[0];
}

}  // namespace storydiff
