#include "storydiff/attention.hpp"

#include <cmath>

namespace storydiff {

Parameter init_normal(std::string name, Shape shape, float stddev, RngStream& rng) {
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = stddev * rng.normal();
  return Parameter(std::move(name), std::move(t));
}

Parameter init_constant(std::string name, Shape shape, float value) {
  return Parameter(std::move(name), Tensor(std::move(shape), value));
}

AttentionWeights AttentionWeights::init(const std::string& prefix, int channels, int heads, RngStream& rng) {
  if (heads <= 0 || channels % heads != 0) {
    throw DimensionError("attention: " + std::to_string(channels) + " channels not divisible by " +
                         std::to_string(heads) + " heads");
  }
  const float s = 1.0f / std::sqrt(static_cast<float>(channels));
  AttentionWeights w;
  w.w_q = init_normal(prefix + ".w_q", {channels, channels}, s, rng);
  w.w_k = init_normal(prefix + ".w_k", {channels, channels}, s, rng);
  w.w_v = init_normal(prefix + ".w_v", {channels, channels}, s, rng);
  w.w_o = init_normal(prefix + ".w_o", {channels, channels}, 0.5f * s, rng);
  w.heads = heads;
  return w;
}

void AttentionWeights::validate() const {
  const Shape sq{channels(), channels()};
  for (const Parameter* p : {&w_q, &w_k, &w_v, &w_o}) {
    if (p->value().shape() != sq) throw DimensionError("attention weight " + p->name + " must be square");
  }
  if (heads <= 0 || channels() % heads != 0) throw DimensionError("attention heads must divide channels");
}

void AttentionWeights::collect(ParameterRefs& out) {
  out.insert(out.end(), {&w_q, &w_k, &w_v, &w_o});
}

LayerNormParams LayerNormParams::init(const std::string& prefix, int channels) {
  return {init_constant(prefix + ".gain", {channels}, 1.0f), init_constant(prefix + ".bias", {channels}, 0.0f)};
}

void LayerNormParams::collect(ParameterRefs& out) { out.insert(out.end(), {&gain, &bias}); }

AffineParams AffineParams::init(const std::string& prefix, int in, int out, float stddev, RngStream& rng) {
  return {init_normal(prefix + ".weight", {in, out}, stddev, rng), init_constant(prefix + ".bias", {out}, 0.0f)};
}

AffineParams AffineParams::zeros(const std::string& prefix, int in, int out) {
  return {init_constant(prefix + ".weight", {in, out}, 0.0f), init_constant(prefix + ".bias", {out}, 0.0f)};
}

void AffineParams::collect(ParameterRefs& out) { out.insert(out.end(), {&weight, &bias}); }

MlpParams MlpParams::init(const std::string& prefix, int channels, int hidden, RngStream& rng) {
  return {AffineParams::init(prefix + ".up", channels, hidden, 1.0f / std::sqrt(static_cast<float>(channels)), rng),
          AffineParams::init(prefix + ".down", hidden, channels, 0.5f / std::sqrt(static_cast<float>(hidden)), rng)};
}

void MlpParams::collect(ParameterRefs& out) {
  up.collect(out);
  down.collect(out);
}

TransformerBlockParams TransformerBlockParams::init(const std::string& prefix, int channels, int heads,
                                                    bool with_cross, RngStream& rng) {
  TransformerBlockParams p;
  p.attention = AttentionWeights::init(prefix + ".attn", channels, heads, rng);
  if (with_cross) {
    p.cross_attention = AttentionWeights::init(prefix + ".cross", channels, heads, rng);
    p.ln_cross = LayerNormParams::init(prefix + ".ln_cross", channels);
  }
  p.mlp = MlpParams::init(prefix + ".mlp", channels, 4 * channels, rng);
  p.ln_attention = LayerNormParams::init(prefix + ".ln_attn", channels);
  p.ln_mlp = LayerNormParams::init(prefix + ".ln_mlp", channels);
  return p;
}

void TransformerBlockParams::collect(ParameterRefs& out) {
  ln_attention.collect(out);
  attention.collect(out);
  if (cross_attention) {
    ln_cross->collect(out);
    cross_attention->collect(out);
  }
  ln_mlp.collect(out);
  mlp.collect(out);
}

Var attend(const Var& xq, const Var& xk, const Var& xv, const AttentionWeights& w, std::span<const int> q_lengths,
           std::span<const int> kv_lengths) {
  const int c = w.channels();
  if (xq.cols() != c || xk.cols() != c || xv.cols() != c) {
    throw DimensionError("attend: token width does not match attention weights of width " + std::to_string(c));
  }
  const Var q = matmul(xq, w.w_q.var);
  const Var k = matmul(xk, w.w_k.var);
  const Var v = matmul(xv, w.w_v.var);
  return matmul(multihead_attention(q, k, v, q_lengths, kv_lengths, w.heads), w.w_o.var);
}

Var scaled_dot_product_attention(const Var& q, const Var& k, const Var& v, const AttentionWeights& w) {
  if (k.value().empty() || k.rows() == 0) throw ContractError("attention: empty key set");
  const int ql[] = {q.rows()};
  const int kl[] = {k.rows()};
  return attend(q, k, v, w, ql, kl);
}

Var self_attention(const Var& tokens, const AttentionWeights& w) {
  return scaled_dot_product_attention(tokens, tokens, tokens, w);
}

Var cross_attention(const Var& queries, const Var& context, const AttentionWeights& w) {
  if (!context.defined() || context.value().empty()) throw ContractError("cross_attention: empty context");
  return scaled_dot_product_attention(queries, context, context, w);
}

Var segmented_self_attention(const Var& tokens, std::span<const int> segments, const AttentionWeights& w) {
  return attend(tokens, tokens, tokens, w, segments, segments);
}

Var transformer_block(const Var& tokens, const TransformerBlockParams& params, std::span<const int> segments,
                      const CrossContext* context, const SelfAttentionFn& self_attn) {
  Var x = tokens;
  const Var n1 = layernorm(x, params.ln_attention.gain.var, params.ln_attention.bias.var);
  x = add(x, self_attn ? self_attn(n1, params.attention) : segmented_self_attention(n1, segments, params.attention));
  if (context != nullptr && params.cross_attention) {
    const Var n2 = layernorm(x, params.ln_cross->gain.var, params.ln_cross->bias.var);
    x = add(x, attend(n2, context->tokens, context->tokens, *params.cross_attention, segments, context->lengths));
  }
  const Var n3 = layernorm(x, params.ln_mlp.gain.var, params.ln_mlp.bias.var);
  return add(x, params.mlp(n3));
}

Var transformer_block(const Var& tokens, const TransformerBlockParams& params, const Var* context) {
  const int seg[] = {tokens.rows()};
  if (context == nullptr) return transformer_block(tokens, params, seg, nullptr);
  const CrossContext ctx{*context, {context->rows()}};
  return transformer_block(tokens, params, seg, &ctx);
}

}  // namespace storydiff
