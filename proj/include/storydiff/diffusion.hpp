#pragma once

#include <Eigen/Core>

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "storydiff/attention.hpp"
#include "storydiff/csa.hpp"
#include "storydiff/synthetic.hpp"

namespace storydiff {

/// Linear-beta DDPM noise schedule.
struct DiffusionSchedule {
  int steps = 0;
  Eigen::VectorXd betas;
  Eigen::VectorXd alphas;
  Eigen::VectorXd alpha_bars;

  static DiffusionSchedule linear(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);

  Tensor betas_tensor() const;
  Tensor alpha_bars_tensor() const;

  /// `count` evenly spaced timesteps from steps-1 down to 0, both included.
  std::vector<int> ddim_timesteps(int count) const;
};

/// sqrt(abar_t) x0 + sqrt(1 - abar_t) noise, elementwise over any shape.
Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& noise, const DiffusionSchedule& sched);

/// eps_uncond + s (eps_cond - eps_uncond), evaluated in double.
Tensor cfg_epsilon(const Tensor& eps_uncond, const Tensor& eps_cond, float s);

struct DenoiserConfig {
  int width = 64;
  int heads = 4;
  int blocks = 4;
  int patch = 4;
  bool temporal = false;  // adds one attention block across frames
  int max_frames = 16;

  int tokens_per_image() const { return (kImageSize / patch) * (kImageSize / patch); }
  int patch_dim() const { return patch * patch * kImageChannels; }
};

/// [B, 16, 16, 3] (or [16, 16, 3]) images to [B * 16, 48] patch rows.
Tensor patchify(const Tensor& images, int patch = 4);
Tensor unpatchify(const Tensor& patches, int batch, int patch = 4);

/// Transformer denoiser over 4x4 patch tokens with cross-attention to a
/// prompt context. Self-attention layers are the weights CSA reuses.
struct DenoiserParams {
  DenoiserConfig config;
  AffineParams patch_embed;
  Parameter position_embed;  // [tokens, C]
  AffineParams time_in;
  AffineParams time_out;
  Parameter token_embed;     // [vocab + 1, C]; last row is the null prompt
  std::vector<TransformerBlockParams> blocks;
  std::optional<TransformerBlockParams> temporal;
  Parameter frame_embed;     // [max_frames, C] when temporal
  AffineParams head;

  static DenoiserParams init(const DenoiserConfig& config, RngStream& rng);
  ParameterRefs parameters();
  std::size_t parameter_count() const;
  int null_token() const { return token_embed.value().dim(0) - 1; }
};

/// Routes self-attention of selected layers through consistent_self_attention.
struct CsaHook {
  CsaConfig config;
  RngStream rng;            // stream for this forward pass; layer l uses rng.child(l)
  std::vector<int> layers;  // empty: every layer
  CsaTrace* trace = nullptr;

  bool applies_to(int layer) const;
};

struct DenoiseOptions {
  const CsaHook* csa = nullptr;
  int frames_per_clip = 0;  // > 0 enables the temporal block over consecutive images
};

/// Prompt-token context, one segment per prompt; an empty prompt is the null token.
CrossContext prompt_context(const DenoiserParams& params, const std::vector<std::vector<int>>& prompts);

/// Predicted noise for patch rows [B * 16, 48] at per-image timesteps.
Var predict_noise(const DenoiserParams& params, const Tensor& noisy_patches, std::span<const int> timesteps,
                  const CrossContext& context, const DenoiseOptions& options = {});

/// Deterministic DDIM (eta = 0). eps(x_t, t, step_index) supplies the noise
/// estimate; the loop stops at the smallest timestep of the subset.
/// With clip_x0 the x0 estimate is clamped to the data range [-1, 1] and the
/// noise re-derived from it, as pixel-space samplers usually do; near t = T
/// the unclipped estimate divides by sqrt(abar) ~ 0.006 and amplifies any
/// error in eps.
using EpsilonFn = std::function<Tensor(const Tensor& x, int t, int step_index)>;
Tensor ddim_loop(const DiffusionSchedule& sched, Tensor x, int steps, const EpsilonFn& eps, bool clip_x0 = false);

struct SamplerOptions {
  int steps = 50;
  float guidance = 5.0f;
  std::optional<CsaConfig> csa;
  std::vector<int> csa_layers;  // empty: all
  bool csa_on_uncond = true;
  bool clip_x0 = false;
  CsaTrace* trace = nullptr;
};

/// Batch of images [B, 16, 16, 3], one per prompt. With CSA the batch axis is
/// the story axis.
Tensor ddim_sample(const DenoiserParams& params, const DiffusionSchedule& sched,
                   const std::vector<std::vector<int>>& prompts, const SamplerOptions& options, const RngStream& rng);

/// Initial noise used by ddim_sample for a given stream, [B, 16, 16, 3].
Tensor initial_noise(int batch, const RngStream& rng);

struct TrainOptions {
  float cond_dropout = 0.1f;
};

/// One epsilon-prediction step with classifier-free conditioning dropout.
float train_step(DenoiserParams& params, Adam& optimizer, const DiffusionSchedule& sched,
                 std::span<const ImageExample> batch, RngStream& rng, const TrainOptions& options = {});

}  // namespace storydiff
