#include "storydiff/motion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace storydiff {

namespace {

/// Per-frame cross-attention context: frame i sees its prompt tokens followed
/// by its projected semantic embedding.
struct FrameContextLayout {
  std::vector<int> text_rows;  // token_embed rows, frame-major
  std::vector<int> order;      // gather into [frame0 text, frame0 P, frame1 text, ...]
  std::vector<int> lengths;
};

FrameContextLayout frame_layout(const std::vector<std::vector<int>>& prompts, int frames, int null_token) {
  FrameContextLayout lay;
  const int total_frames = static_cast<int>(prompts.size()) * frames;
  std::vector<int> text_start;
  for (std::size_t c = 0; c < prompts.size(); ++c) {
    for (int f = 0; f < frames; ++f) {
      text_start.push_back(static_cast<int>(lay.text_rows.size()));
      if (prompts[c].empty()) {
        lay.text_rows.push_back(null_token);
      } else {
        lay.text_rows.insert(lay.text_rows.end(), prompts[c].begin(), prompts[c].end());
      }
    }
  }
  const int text_total = static_cast<int>(lay.text_rows.size());
  for (int i = 0; i < total_frames; ++i) {
    const int begin = text_start[static_cast<std::size_t>(i)];
    const int end = i + 1 < total_frames ? text_start[static_cast<std::size_t>(i + 1)] : text_total;
    for (int r = begin; r < end; ++r) lay.order.push_back(r);
    lay.order.push_back(text_total + i);
    lay.lengths.push_back(end - begin + 1);
  }
  return lay;
}

CrossContext frame_contexts(const MotionModel& m, const std::vector<std::vector<int>>& prompts, const Var& p_rows,
                            int frames) {
  for (const auto& prompt : prompts) {
    for (int t : prompt) {
      if (t < 0 || t >= m.decoder.null_token()) throw ContractError("prompt token " + std::to_string(t) + " outside vocabulary");
    }
  }
  FrameContextLayout lay = frame_layout(prompts, frames, m.decoder.null_token());
  const Var text = gather_rows(m.decoder.token_embed.var, std::move(lay.text_rows));
  const Var both = concat_rows(std::vector<Var>{text, m.cond_proj(p_rows)});
  return {gather_rows(both, std::move(lay.order)), std::move(lay.lengths)};
}

Tensor stack_frames(std::span<const Tensor> images) {
  const std::size_t per = static_cast<std::size_t>(kImageSize) * kImageSize * kImageChannels;
  Tensor out({static_cast<int>(images.size()), kImageSize, kImageSize, kImageChannels});
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].size() != per) throw DimensionError("expected a 16x16x3 image, got " + shape_string(images[i].shape()));
    std::copy(images[i].data().begin(), images[i].data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

/// [clips * L, D] interpolated sequences for stacked start / end encodings.
Tensor interpolated_rows(const Tensor& k_start, const Tensor& k_end, int frames) {
  const int clips = k_start.rows();
  const int d = k_start.cols();
  Tensor out({clips * frames, d});
  for (int c = 0; c < clips; ++c) {
    const EmbeddingSequence seq = interpolate_embeddings(k_start.rows_slice(c, 1).reshaped({d}),
                                                         k_end.rows_slice(c, 1).reshaped({d}), frames);
    std::copy(seq.vectors.data().begin(), seq.vectors.data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(c) * frames * d);
  }
  return out;
}

}  // namespace

SemanticEncoder SemanticEncoder::init(RngStream& rng, int width, int heads) {
  SemanticEncoder e;
  e.patch_embed = AffineParams::init("encoder.patch_embed", 48, width, 1.0f / std::sqrt(48.0f), rng);
  e.position_embed = init_normal("encoder.position_embed", {16, width}, 0.5f, rng);
  for (int i = 0; i < 2; ++i) {
    e.blocks.push_back(TransformerBlockParams::init("encoder.block" + std::to_string(i), width, heads, false, rng));
  }
  e.proj = AffineParams::init("encoder.proj", width, kSemanticDim, 1.0f / std::sqrt(static_cast<float>(width)), rng);
  for (Parameter* p : e.parameters()) p->freeze();
  return e;
}

ParameterRefs SemanticEncoder::parameters() {
  ParameterRefs out;
  patch_embed.collect(out);
  out.push_back(&position_embed);
  for (auto& b : blocks) b.collect(out);
  proj.collect(out);
  return out;
}

Tensor SemanticEncoder::encode_batch(const Tensor& images) const {
  NoGradGuard no_grad;
  const int batch = images.rank() == 3 ? 1 : images.dim(0);
  const Tensor patches = patchify(images, 4);
  std::vector<int> pos(static_cast<std::size_t>(batch * 16));
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i % 16);
  Var x = add(patch_embed(Var(patches)), gather_rows(position_embed.var, std::move(pos)));
  const std::vector<int> segments(static_cast<std::size_t>(batch), 16);
  for (const auto& b : blocks) x = transformer_block(x, b, segments);
  Tensor pool({batch, batch * 16});
  for (int b = 0; b < batch; ++b) {
    for (int k = 0; k < 16; ++k) pool.at({b, b * 16 + k}) = 1.0f / 16.0f;
  }
  return proj(matmul(Var(pool), x)).value();
}

Tensor SemanticEncoder::encode(const Tensor& image) const { return encode_batch(image).reshaped({kSemanticDim}); }

std::pair<Tensor, Tensor> encode_frames(const Tensor& f_s, const Tensor& f_e, const SemanticEncoder& enc) {
  return {enc.encode(f_s), enc.encode(f_e)};
}

EmbeddingSequence interpolate_embeddings(const Tensor& k_s, const Tensor& k_e, int length) {
  if (length < 2) throw ContractError("interpolate_embeddings: length must be >= 2, got " + std::to_string(length));
  require_same_shape(k_s, k_e, "interpolate_embeddings");
  const int d = static_cast<int>(k_s.size());
  EmbeddingSequence seq{Tensor({length, d}), EmbeddingRole::Interpolated};
  for (int i = 0; i < length; ++i) {
    const double a = static_cast<double>(i) / (length - 1);
    for (int j = 0; j < d; ++j) {
      const double s = k_s[static_cast<std::size_t>(j)];
      const double e = k_e[static_cast<std::size_t>(j)];
      seq.vectors[static_cast<std::size_t>(i * d + j)] = static_cast<float>(s + a * (e - s));
    }
  }
  std::copy(k_s.data().begin(), k_s.data().end(), seq.vectors.data().begin());
  std::copy(k_e.data().begin(), k_e.data().end(), seq.vectors.data().begin() + static_cast<std::ptrdiff_t>(length - 1) * d);
  return seq;
}

PredictorParams PredictorParams::init(RngStream& rng, int width, int heads, int blocks) {
  PredictorParams p;
  p.in_proj = AffineParams::init("predictor.in_proj", kSemanticDim, width, 1.0f / std::sqrt(float(kSemanticDim)), rng);
  p.sequence_embed = init_normal("predictor.sequence_embed", {kMaxClipFrames, width}, 0.5f, rng);
  for (int i = 0; i < blocks; ++i) {
    p.blocks.push_back(TransformerBlockParams::init("predictor.block" + std::to_string(i), width, heads, false, rng));
  }
  p.out_proj = AffineParams::zeros("predictor.out_proj", width, kSemanticDim);
  return p;
}

void PredictorParams::collect(ParameterRefs& out) {
  in_proj.collect(out);
  out.push_back(&sequence_embed);
  for (auto& b : blocks) b.collect(out);
  out_proj.collect(out);
}

Var predict_embeddings(const PredictorParams& p, const Var& interpolated, int clips, int length) {
  if (length < 2 || length > p.sequence_embed.value().dim(0)) {
    throw ContractError("predictor length " + std::to_string(length) + " outside [2, " +
                        std::to_string(p.sequence_embed.value().dim(0)) + "]");
  }
  if (interpolated.rows() != clips * length || interpolated.cols() != p.in_proj.weight.value().dim(0)) {
    throw DimensionError("predict_embeddings: got " + shape_string(interpolated.shape()));
  }
  std::vector<int> pos(static_cast<std::size_t>(clips * length));
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i) % length;
  Var x = add(p.in_proj(interpolated), gather_rows(p.sequence_embed.var, std::move(pos)));
  const std::vector<int> segments(static_cast<std::size_t>(clips), length);
  for (const auto& b : p.blocks) x = transformer_block(x, b, segments);
  return p.out_proj(x);
}

EmbeddingSequence predict_transition_embeddings(const EmbeddingSequence& seq, const PredictorParams& p) {
  NoGradGuard no_grad;
  const Var out = predict_embeddings(p, Var(seq.vectors), 1, seq.length());
  return {out.value(), EmbeddingRole::Predicted};
}

Var condition_context(const Var& text_tokens, const Var& p_i, const AffineParams& proj) {
  const Var projected = proj(reshape(p_i, {1, static_cast<int>(p_i.value().size())}));
  return concat_rows(std::vector<Var>{text_tokens, projected});
}

MotionModel MotionModel::init(const MotionConfig& config, RngStream& rng) {
  if (config.frames < 2 || config.frames > kMaxClipFrames) throw ContractError("clip length outside [2, 16]");
  if (!config.decoder.temporal) throw ContractError("the video decoder needs its temporal block");
  MotionModel m;
  m.config = config;
  RngStream enc_rng = rng.child(1);
  RngStream pred_rng = rng.child(2);
  RngStream proj_rng = rng.child(3);
  RngStream dec_rng = rng.child(4);
  m.encoder = SemanticEncoder::init(enc_rng);
  m.predictor = PredictorParams::init(pred_rng);
  m.cond_proj = AffineParams::init("cond_proj", kSemanticDim, config.decoder.width,
                                   1.0f / std::sqrt(static_cast<float>(kSemanticDim)), proj_rng);
  m.decoder = DenoiserParams::init(config.decoder, dec_rng);
  return m;
}

ParameterRefs MotionModel::trainable_parameters() {
  ParameterRefs out;
  predictor.collect(out);
  cond_proj.collect(out);
  const ParameterRefs dec = decoder.parameters();
  out.insert(out.end(), dec.begin(), dec.end());
  return out;
}

ParameterRefs MotionModel::all_parameters() {
  ParameterRefs out = encoder.parameters();
  const ParameterRefs rest = trainable_parameters();
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

std::vector<int> transition_prompt(const TransitionClip& clip) { return identity_tokens(clip.start.identity); }

float train_motion_step(MotionModel& model, Adam& optimizer, const DiffusionSchedule& sched,
                        std::span<const TransitionClip> clips, RngStream& rng, const MotionTrainOptions& options) {
  if (clips.empty()) throw ContractError("train_motion_step: no clips");
  const int n_clips = static_cast<int>(clips.size());
  const int frames = clips.front().length();
  std::vector<Tensor> starts, ends, all_frames;
  for (const auto& clip : clips) {
    if (clip.length() != frames) throw DimensionError("train_motion_step: clips of different lengths");
    starts.push_back(clip.frame(0));
    ends.push_back(clip.frame(frames - 1));
    for (int f = 0; f < frames; ++f) all_frames.push_back(clip.frame(f));
  }
  const Tensor k_start = model.encoder.encode_batch(stack_frames(starts));
  const Tensor k_end = model.encoder.encode_batch(stack_frames(ends));
  const Tensor x0 = stack_frames(all_frames);

  std::vector<std::vector<int>> prompts;
  Tensor keep({n_clips * frames, kSemanticDim}, 1.0f);
  std::vector<int> ts;
  Tensor noise(x0.shape());
  Tensor noisy(x0.shape());
  std::vector<float> a_rows, b_rows;
  const std::size_t per = static_cast<std::size_t>(kImageSize) * kImageSize * kImageChannels;
  for (int c = 0; c < n_clips; ++c) {
    const bool drop = rng.bernoulli(options.cond_dropout);
    prompts.push_back(drop ? std::vector<int>{} : transition_prompt(clips[static_cast<std::size_t>(c)]));
    if (drop) {
      std::fill_n(keep.data().begin() + static_cast<std::ptrdiff_t>(c) * frames * kSemanticDim, frames * kSemanticDim,
                  0.0f);
    }
    const int t = static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps)));
    const double a = std::sqrt(sched.alpha_bars[t]);
    const double b = std::sqrt(1.0 - sched.alpha_bars[t]);
    for (int f = 0; f < frames; ++f) {
      ts.push_back(t);
      const std::size_t base = static_cast<std::size_t>(c * frames + f) * per;
      for (std::size_t i = 0; i < per; ++i) {
        noise[base + i] = rng.normal();
        noisy[base + i] = static_cast<float>(a * x0[base + i] + b * noise[base + i]);
      }
    }
    a_rows.push_back(static_cast<float>(a));
    b_rows.push_back(static_cast<float>(b));
  }

  const Var predicted = predict_embeddings(model.predictor, Var(interpolated_rows(k_start, k_end, frames)), n_clips, frames);
  const Var p_rows = mul(predicted, Var(keep));
  const CrossContext ctx = frame_contexts(model, prompts, p_rows, frames);
  DenoiseOptions dopt;
  dopt.frames_per_clip = frames;
  const Tensor noisy_patches = patchify(noisy, model.config.decoder.patch);
  const Var eps = predict_noise(model.decoder, noisy_patches, ts, ctx, dopt);

  Var loss;
  if (!options.direct_regression) {
    loss = mse_loss(eps, patchify(noise, model.config.decoder.patch));
  } else {
    // x0_hat = (x_t - b eps_hat) / a per clip
    const int rows_per_clip = frames * model.config.decoder.tokens_per_image();
    Tensor inv_a(noisy_patches.shape());
    Tensor b_over_a(noisy_patches.shape());
    const int cols = noisy_patches.cols();
    for (int r = 0; r < noisy_patches.rows(); ++r) {
      const std::size_t c = static_cast<std::size_t>(r / rows_per_clip);
      for (int k = 0; k < cols; ++k) {
        const std::size_t i = static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(k);
        inv_a[i] = noisy_patches[i] / a_rows[c];
        b_over_a[i] = b_rows[c] / a_rows[c];
      }
    }
    const Var x0_hat = sub(Var(inv_a), mul(eps, Var(b_over_a)));
    loss = mse_loss(x0_hat, patchify(x0, model.config.decoder.patch));
  }
  backward(loss);
  optimizer.step(model.trainable_parameters());
  ++model.trained_steps;
  return loss.value()[0];
}

std::vector<Tensor> generate_transitions(const MotionModel& model, const DiffusionSchedule& sched,
                                         const std::vector<TransitionRequest>& requests,
                                         const TransitionOptions& options, const RngStream& rng) {
  if (model.trained_steps <= 0) throw ContractError("motion model is untrained; load a trained checkpoint first");
  if (requests.empty()) return {};
  if (options.frames < 2 || options.frames > model.config.decoder.max_frames) {
    throw ContractError("clip length " + std::to_string(options.frames) + " outside [2, " +
                        std::to_string(model.config.decoder.max_frames) + "]");
  }
  if (options.steps < 1 || options.steps > sched.steps) throw ContractError("sampling steps outside [1, T]");
  NoGradGuard no_grad;
  const int n = static_cast<int>(requests.size());
  const int frames = options.frames;

  std::vector<Tensor> starts, ends;
  std::vector<std::vector<int>> prompts;
  for (const auto& r : requests) {
    starts.push_back(r.start);
    ends.push_back(r.end);
    prompts.push_back(r.prompt);
  }
  const Tensor k_rows = interpolated_rows(model.encoder.encode_batch(stack_frames(starts)),
                                          model.encoder.encode_batch(stack_frames(ends)), frames);
  const Var p_rows = options.use_predictor ? predict_embeddings(model.predictor, Var(k_rows), n, frames) : Var(k_rows);
  const CrossContext cond = frame_contexts(model, prompts, p_rows, frames);
  const CrossContext uncond = frame_contexts(model, std::vector<std::vector<int>>(requests.size()),
                                            Var(Tensor({n * frames, kSemanticDim})), frames);

  const std::size_t clip_size = static_cast<std::size_t>(frames) * kImageSize * kImageSize * kImageChannels;
  Tensor x({n * frames, kImageSize, kImageSize, kImageChannels});
  for (int r = 0; r < n; ++r) {
    const Tensor noise = initial_noise(frames, rng.child(static_cast<std::uint64_t>(r)));
    std::copy(noise.data().begin(), noise.data().end(), x.data().begin() + static_cast<std::ptrdiff_t>(r * clip_size));
  }

  DenoiseOptions dopt;
  dopt.frames_per_clip = frames;
  const int patch = model.config.decoder.patch;
  const EpsilonFn eps = [&](const Tensor& xt, int t, int) {
    const Tensor patches = patchify(xt, patch);
    const std::vector<int> ts(static_cast<std::size_t>(n * frames), t);
    const auto run = [&](const CrossContext& ctx) { return predict_noise(model.decoder, patches, ts, ctx, dopt).value(); };
    Tensor e;
    if (options.guidance == 1.0f) {
      e = run(cond);
    } else if (options.guidance == 0.0f) {
      e = run(uncond);
    } else {
      e = cfg_epsilon(run(uncond), run(cond), options.guidance);
    }
    return unpatchify(e, n * frames, patch);
  };
  const Tensor out = ddim_loop(sched, std::move(x), options.steps, eps, options.clip_x0);

  std::vector<Tensor> clips;
  for (int r = 0; r < n; ++r) {
    Tensor clip({frames, kImageSize, kImageSize, kImageChannels});
    std::copy(out.data().begin() + static_cast<std::ptrdiff_t>(r * clip_size),
              out.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * clip_size), clip.data().begin());
    clips.push_back(std::move(clip));
  }
  return clips;
}

Tensor generate_transition(const MotionModel& model, const DiffusionSchedule& sched, const TransitionRequest& request,
                           const TransitionOptions& options, const RngStream& rng) {
  return generate_transitions(model, sched, {request}, options, rng).front();
}

Tensor hard_cut_clip(const Tensor& f_s, const Tensor& f_e, int length) {
  if (length < 2) throw ContractError("hard_cut_clip: length must be >= 2");
  std::vector<Tensor> frames;
  for (int i = 0; i < length; ++i) frames.push_back(i < length / 2 ? f_s : f_e);
  return stack_frames(frames);
}

}  // namespace storydiff
