#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "storydiff/autodiff.hpp"
#include "storydiff/rng.hpp"

namespace storydiff {

/// Normal(0, stddev) initialisation of a [rows, cols] parameter.
Parameter init_normal(std::string name, Shape shape, float stddev, RngStream& rng);
Parameter init_constant(std::string name, Shape shape, float value);

/// The four square projections of one attention layer (row convention:
/// projected = tokens * W). Consistent self-attention reuses exactly this set.
struct AttentionWeights {
  Parameter w_q;
  Parameter w_k;
  Parameter w_v;
  Parameter w_o;
  int heads = 1;

  static AttentionWeights init(const std::string& prefix, int channels, int heads, RngStream& rng);
  int channels() const { return w_q.value().dim(0); }
  void validate() const;
  void collect(ParameterRefs& out);
};

struct LayerNormParams {
  Parameter gain;
  Parameter bias;

  static LayerNormParams init(const std::string& prefix, int channels);
  void collect(ParameterRefs& out);
};

struct AffineParams {
  Parameter weight;  // [in, out]
  Parameter bias;    // [out]

  static AffineParams init(const std::string& prefix, int in, int out, float stddev, RngStream& rng);
  static AffineParams zeros(const std::string& prefix, int in, int out);
  Var operator()(const Var& x) const { return linear(x, weight.var, bias.var); }
  void collect(ParameterRefs& out);
};

struct MlpParams {
  AffineParams up;
  AffineParams down;

  static MlpParams init(const std::string& prefix, int channels, int hidden, RngStream& rng);
  Var operator()(const Var& x) const { return down(gelu(up(x))); }
  void collect(ParameterRefs& out);
};

struct TransformerBlockParams {
  AttentionWeights attention;
  std::optional<AttentionWeights> cross_attention;
  MlpParams mlp;
  LayerNormParams ln_attention;
  std::optional<LayerNormParams> ln_cross;
  LayerNormParams ln_mlp;

  static TransformerBlockParams init(const std::string& prefix, int channels, int heads, bool with_cross,
                                     RngStream& rng);
  void collect(ParameterRefs& out);
};

/// Projects, attends and applies w_o. Rows of xq are grouped by q_lengths and
/// attend only within the matching kv group of xk / xv.
Var attend(const Var& xq, const Var& xk, const Var& xv, const AttentionWeights& w,
           std::span<const int> q_lengths, std::span<const int> kv_lengths);

Var scaled_dot_product_attention(const Var& q, const Var& k, const Var& v, const AttentionWeights& w);
Var self_attention(const Var& tokens, const AttentionWeights& w);
Var cross_attention(const Var& queries, const Var& context, const AttentionWeights& w);

/// Per-segment self-attention over a stack of independent token sequences.
Var segmented_self_attention(const Var& tokens, std::span<const int> segments, const AttentionWeights& w);

/// Cross-attention context for a stack of sequences: segment g of the
/// queries attends to context rows of segment g.
struct CrossContext {
  Var tokens;
  std::vector<int> lengths;
};

/// Replacement for the self-attention sublayer, given LN(x).
using SelfAttentionFn = std::function<Var(const Var& normed, const AttentionWeights& w)>;

/// Pre-norm block: x += attn(LN(x)); x += cross(LN(x), ctx); x += mlp(LN(x)).
Var transformer_block(const Var& tokens, const TransformerBlockParams& params, std::span<const int> segments,
                      const CrossContext* context = nullptr, const SelfAttentionFn& self_attn = {});

/// Single-sequence convenience form.
Var transformer_block(const Var& tokens, const TransformerBlockParams& params, const Var* context = nullptr);

}  // namespace storydiff
