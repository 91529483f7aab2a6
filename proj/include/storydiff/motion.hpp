#pragma once

#include <span>
#include <utility>
#include <vector>

#include "storydiff/diffusion.hpp"

namespace storydiff {

inline constexpr int kSemanticDim = 64;
inline constexpr int kMaxClipFrames = 16;

/// Frozen random feature map from an image to one semantic vector.
struct SemanticEncoder {
  AffineParams patch_embed;
  Parameter position_embed;
  std::vector<TransformerBlockParams> blocks;
  AffineParams proj;

  static SemanticEncoder init(RngStream& rng, int width = 64, int heads = 4);
  ParameterRefs parameters();

  Tensor encode(const Tensor& image) const;          // [D]
  Tensor encode_batch(const Tensor& images) const;   // [B, 16, 16, 3] -> [B, D]
};

std::pair<Tensor, Tensor> encode_frames(const Tensor& f_s, const Tensor& f_e, const SemanticEncoder& enc);

enum class EmbeddingRole { Interpolated, Predicted };

struct EmbeddingSequence {
  Tensor vectors;  // [L, D]
  EmbeddingRole role = EmbeddingRole::Interpolated;

  int length() const { return vectors.dim(0); }
};

/// K_i = k_s + (i - 1) / (L - 1) (k_e - k_s); the endpoints are copied, not computed.
EmbeddingSequence interpolate_embeddings(const Tensor& k_s, const Tensor& k_e, int length);

struct PredictorParams {
  AffineParams in_proj;       // D -> C
  Parameter sequence_embed;   // [kMaxClipFrames, C]
  std::vector<TransformerBlockParams> blocks;
  AffineParams out_proj;      // C -> D, zero at init

  static PredictorParams init(RngStream& rng, int width = 64, int heads = 4, int blocks = 2);
  void collect(ParameterRefs& out);
};

/// Stacked sequences [clips * L, D] -> predicted embeddings of the same shape.
Var predict_embeddings(const PredictorParams& p, const Var& interpolated, int clips, int length);
EmbeddingSequence predict_transition_embeddings(const EmbeddingSequence& seq, const PredictorParams& p);

/// [T tokens; proj(p_i)]. The projected embedding is always the last row.
Var condition_context(const Var& text_tokens, const Var& p_i, const AffineParams& proj);

struct MotionConfig {
  int frames = 8;
  DenoiserConfig decoder{64, 4, 4, 4, true, kMaxClipFrames};
};

struct MotionModel {
  MotionConfig config;
  SemanticEncoder encoder;
  PredictorParams predictor;
  AffineParams cond_proj;  // D -> C
  DenoiserParams decoder;
  long trained_steps = 0;

  static MotionModel init(const MotionConfig& config, RngStream& rng);
  /// Everything except the frozen encoder.
  ParameterRefs trainable_parameters();
  /// Named parameters for checkpointing, encoder included.
  ParameterRefs all_parameters();
};

/// Text prompt used to condition a transition: the character's identity tokens.
std::vector<int> transition_prompt(const TransitionClip& clip);

struct MotionTrainOptions {
  float cond_dropout = 0.1f;
  bool direct_regression = false;  // pixel MSE on the one-step x0 estimate instead of noise MSE
};

/// One training step over whole clips; endpoints come from the ground-truth frames.
float train_motion_step(MotionModel& model, Adam& optimizer, const DiffusionSchedule& sched,
                        std::span<const TransitionClip> clips, RngStream& rng, const MotionTrainOptions& options = {});

struct TransitionRequest {
  Tensor start;  // [16, 16, 3]
  Tensor end;
  std::vector<int> prompt;
};

struct TransitionOptions {
  int frames = 8;
  int steps = 50;
  float guidance = 7.5f;
  bool use_predictor = true;  // false: condition on the raw interpolated K
  bool clip_x0 = false;
};

/// Clips [L, 16, 16, 3], one per request, decoded jointly. Request r uses rng.child(r).
std::vector<Tensor> generate_transitions(const MotionModel& model, const DiffusionSchedule& sched,
                                         const std::vector<TransitionRequest>& requests,
                                         const TransitionOptions& options, const RngStream& rng);

Tensor generate_transition(const MotionModel& model, const DiffusionSchedule& sched, const TransitionRequest& request,
                           const TransitionOptions& options, const RngStream& rng);

/// Baseline clip: f_s for the first L/2 frames, f_e after.
Tensor hard_cut_clip(const Tensor& f_s, const Tensor& f_e, int length);

}  // namespace storydiff
